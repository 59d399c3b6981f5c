#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gazedrop/gaze_oracle.hpp"
#include "gazedrop/gazefield.hpp"
#include "gazedrop/metrics.hpp"
#include "gazedrop/pgm.hpp"
#include "gazedrop/simworld/world.hpp"
#include "test_util.hpp"

using namespace gazedrop;

TEST(NormalizeMax, DividesByMax) {
  const GazeMap g(2, 2, std::vector<float>{0, 2, 4, 0});
  const GazeMap n = normalize_max(g);
  const float want[] = {0.0f, 0.5f, 1.0f, 0.0f};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(n.values()[static_cast<std::size_t>(i)], want[i]);
}

TEST(NormalizeMax, ZerosStayZero) {
  const GazeMap z(3, 3);
  EXPECT_EQ(normalize_max(z), z);
}

TEST(NormalizeMax, IdempotentAndScaleInvariant) {
  RngStream rng(8);
  const Tensor t = sample_uniform({6, 5}, rng);
  const GazeMap g = GazeMap::from_tensor(t);
  const GazeMap n = normalize_max(g);
  EXPECT_EQ(normalize_max(n), n);
  EXPECT_FLOAT_EQ(n.max(), 1.0f);
  for (float c : {0.01f, 3.0f, 250.0f}) {
    std::vector<float> scaled(g.values().begin(), g.values().end());
    for (float& v : scaled) v *= c;
    const GazeMap ns = normalize_max(GazeMap(6, 5, scaled));
    for (std::size_t i = 0; i < scaled.size(); ++i) EXPECT_NEAR(ns.values()[i], n.values()[i], 1e-6);
  }
}

TEST(GaussianBlob, PeakAndSigma) {
  const GazeMap g = gaussian_blob(21, 31, 15.0, 10.0, 4.0);
  EXPECT_FLOAT_EQ(g.at(10, 15), 1.0f);
  EXPECT_NEAR(g.at(10, 19), std::exp(-0.5), 1e-6);
  EXPECT_NEAR(g.at(14, 15), std::exp(-0.5), 1e-6);
}

TEST(GaussianBlob, MirrorSymmetric) {
  const GazeMap g = gaussian_blob(9, 11, 5.0, 4.0, 2.5);
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 11; ++j) {
      EXPECT_FLOAT_EQ(g.at(i, j), g.at(i, 10 - j));
      EXPECT_FLOAT_EQ(g.at(i, j), g.at(8 - i, j));
    }
  }
}

TEST(GaussianBlob, OffFrameCenterAllowed) {
  const GazeMap g = gaussian_blob(5, 5, -3.0, 20.0, 2.0);
  for (float v : g.values()) EXPECT_GE(v, 0.0f);
}

TEST(GaussianBlob, RejectsBadSigma) {
  EXPECT_THROW(gaussian_blob(4, 4, 1, 1, 0.0), ParameterError);
  EXPECT_THROW(gaussian_blob(4, 4, 1, 1, -2.0), ParameterError);
  EXPECT_THROW(center_blob(4, 4, 0.0), ParameterError);
}

TEST(CenterBlob, CenteredAndDefinition) {
  const GazeMap g = center_blob(5, 5, 1.3);
  std::size_t arg = 0;
  for (std::size_t i = 0; i < g.values().size(); ++i) {
    if (g.values()[i] > g.values()[arg]) arg = i;
  }
  EXPECT_EQ(arg, 12u);
  EXPECT_EQ(center_blob(7, 12, 2.0), gaussian_blob(7, 12, 5.5, 3.0, 2.0));
}

TEST(CenterBlob, LargeSigmaApproachesConstant) {
  const GazeMap g = center_blob(48, 128, 1e3);
  float lo = 1.0f;
  for (float v : g.values()) lo = std::min(lo, v);
  EXPECT_GT(lo / g.max(), 0.995f);
}

TEST(GazeMap, RejectsNegativeValues) {
  EXPECT_THROW(GazeMap(1, 2, std::vector<float>{0.5f, -0.1f}), ParameterError);
  GazeMap g(2, 2);
  EXPECT_THROW(g.set(0, 0, -1.0f), ParameterError);
}

class PgmTest : public ::testing::Test {
 protected:
  test::TempDir dir;
};

TEST_F(PgmTest, QuantizationOracle) {
  const GazeMap g(2, 2, std::vector<float>{0.0f, 1.0f, 0.5f, 0.25f});
  save_pgm(g, dir / "g.pgm");
  const std::string bytes = read_file_bytes(dir / "g.pgm");
  EXPECT_EQ(bytes.substr(0, 11), "P5\n2 2\n255\n");
  ASSERT_EQ(bytes.size(), 15u);
  // 127.5 and 63.75 round half up.
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 255);
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 128);
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 64);
}

TEST_F(PgmTest, RoundTripWithinQuantum) {
  RngStream rng(4);
  const GazeMap g = GazeMap::from_tensor(elementwise(ElementwiseOp::scale, sample_uniform({13, 17}, rng), 3.0f));
  save_pgm(g, dir / "r.pgm");
  const GazeMap back = load_pgm(dir / "r.pgm");
  const GazeMap n = normalize_max(g);
  ASSERT_EQ(back.height(), 13);
  ASSERT_EQ(back.width(), 17);
  for (std::size_t i = 0; i < n.values().size(); ++i) EXPECT_LE(std::abs(back.values()[i] - n.values()[i]), 1.0f / 255.0f);
}

TEST_F(PgmTest, ZerosRoundTripExactly) {
  save_pgm(GazeMap(4, 3), dir / "z.pgm");
  EXPECT_EQ(load_pgm(dir / "z.pgm"), GazeMap(4, 3));
}

TEST(PgmDecode, CommentsToleratedOnRead) {
  const std::string bytes = std::string("P5\n# made elsewhere\n2 1\n# max\n255\n") + '\x00' + '\xff';
  const GrayImage img = decode_pgm(bytes);
  EXPECT_EQ(img.width, 2);
  EXPECT_EQ(img.pixels[1], 255);
}

TEST(PgmDecode, MalformedHeaderReportsOffset) {
  try {
    decode_pgm("P6\n2 2\n255\n....");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  try {
    decode_pgm("P5\n2 x\n255\n....");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 5u);
  }
}

TEST(PgmDecode, TruncatedPayload) {
  try {
    decode_pgm("P5\n2 2\n255\nabc");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    EXPECT_EQ(e.offset(), 14u);
  }
}

TEST(PgmDecode, NoCommentsOnWrite) {
  const std::string bytes = encode_pgm(to_gray(1, 3, std::vector<float>{0.f, 0.5f, 1.f}));
  EXPECT_EQ(bytes.find('#'), std::string::npos);
}

namespace {

sim::Track straight_track() {
  sim::TrackParams p;
  p.max_curvature = 0.0;
  return sim::generate_track(3, p);
}

int local_maxima(const GazeMap& g) {
  int count = 0;
  for (std::int64_t i = 0; i < g.height(); ++i) {
    for (std::int64_t j = 0; j < g.width(); ++j) {
      const float v = g.at(i, j);
      if (v < 1e-3f) continue;
      bool peak = true;
      for (int di = -1; di <= 1 && peak; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          if (!di && !dj) continue;
          const auto a = i + di, b = j + dj;
          if (a < 0 || b < 0 || a >= g.height() || b >= g.width()) continue;
          // Plateaus (a blob centered between pixels) count once.
          const bool earlier = a < i || (a == i && b < j);
          if (g.at(a, b) > v || (g.at(a, b) == v && earlier)) {
            peak = false;
            break;
          }
        }
      }
      count += peak;
    }
  }
  return count;
}

}  // namespace

TEST(GazeOracle, StraightCenteredSingleBlobOnLane) {
  const sim::Track t = straight_track();
  sim::WorldState st;
  st.ego = {100.0, t.lane_center(0), 0.0, 15.0};
  const sim::CameraConfig cam;
  const GazeMap g = gaze_oracle(t, st, cam, GazeOracleConfig{});
  EXPECT_EQ(local_maxima(g), 1);
  std::size_t arg = 0;
  for (std::size_t i = 0; i < g.values().size(); ++i) {
    if (g.values()[i] > g.values()[arg]) arg = i;
  }
  // On a straight road the lane center at the lookahead projects onto the
  // optical axis column when the ego is centered in its lane.
  const auto col = static_cast<double>(arg % static_cast<std::size_t>(cam.width));
  EXPECT_NEAR(col, cam.center_col(), 1.0);
  for (float v : g.values()) EXPECT_GE(v, 0.0f);
}

TEST(GazeOracle, OvertakeShowsTwoBlobs) {
  const sim::Track t = straight_track();
  sim::WorldState st;
  st.ego = {100.0, t.lane_center(0), 0.0, 15.0};
  st.traffic.push_back({0, 125.0, 10.0});
  const GazeMap g = gaze_oracle(t, st, sim::CameraConfig{}, GazeOracleConfig{});
  EXPECT_EQ(local_maxima(g), 2);
}

TEST(GazeOracle, JitterMovesMapAwayFromReal) {
  const sim::Track t = straight_track();
  sim::WorldState st;
  st.ego = {100.0, t.lane_center(0), 0.0, 15.0};
  const sim::CameraConfig cam;
  const GazeMap real = gaze_oracle(t, st, cam, GazeOracleConfig{});
  RngStream rng(12);
  const GazeMap est = gaze_oracle(t, st, cam, GazeOracleConfig::estimated(), &rng);
  RngStream rng0(12);
  const GazeMap none = gaze_oracle(t, st, cam, GazeOracleConfig{}, &rng0);
  EXPECT_GT(kl_divergence(real, est), 0.0);
  EXPECT_NEAR(kl_divergence(real, none), 0.0, 1e-9);
}
