#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gazedrop/checkpoint.hpp"
#include "gazedrop/net.hpp"
#include "gazedrop/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gazedrop;

namespace {

DropoutSpec spec(DropoutMode mode, double dp, Phase phase = Phase::train) {
  DropoutSpec s;
  s.mode = mode;
  s.dp = dp;
  s.phase = phase;
  return s;
}

PilotNetMini mini(std::uint64_t seed) {
  PilotNetMini net(ArchConfig::miniature());
  net.init_he(seed);
  return net;
}

std::vector<TrainSample> random_samples(const ArchConfig& a, std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainSample s;
    s.id = "s" + std::to_string(i);
    s.frame = sample_uniform({a.in_h, a.in_w, 1}, rng);
    s.steering = static_cast<float>(5.0 * rng.normal());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZero) {
  PilotNetMini net(ArchConfig::miniature());
  RngStream rng(1);
  const Tensor x = sample_uniform({2, 12, 16, 1}, rng);
  const Tensor y = forward(net, x, spec(DropoutMode::uniform, 0.5), {}, rng);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, OneOutputPerSample) {
  const PilotNetMini net = mini(2);
  RngStream rng(2);
  const Tensor y = forward(net, sample_uniform({3, 12, 16, 1}, rng), spec(DropoutMode::uniform, 0.1, Phase::test), {}, rng);
  EXPECT_EQ(y.shape(), (Shape{3}));
}

TEST(Forward, TrainPhaseDeterministicGivenSeed) {
  const PilotNetMini net = mini(3);
  RngStream data(3);
  const Tensor x = sample_uniform({4, 12, 16, 1}, data);
  RngStream a(9), b(9), c(10);
  const auto s = spec(DropoutMode::uniform, 0.5);
  const Tensor ya = forward(net, x, s, {}, a), yb = forward(net, x, s, {}, b), yc = forward(net, x, s, {}, c);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ya[i], yb[i]);
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) differs |= ya[i] != yc[i];
  EXPECT_TRUE(differs);
}

TEST(Forward, TestPhaseIgnoresRng) {
  const PilotNetMini net = mini(4);
  RngStream data(4);
  const Tensor x = sample_uniform({2, 12, 16, 1}, data);
  const std::vector<GazeMap> g{gaussian_blob(12, 16, 8.0, 6.0, 2.0)};
  RngStream a(1), b(2);
  const auto s = spec(DropoutMode::gaze, 0.5, Phase::test);
  const Tensor ya = forward(net, x, s, g, a), yb = forward(net, x, s, g, b);
  EXPECT_EQ(ya.values()[0], yb.values()[0]);
  EXPECT_EQ(ya.values()[1], yb.values()[1]);
}

TEST(Forward, Errors) {
  const PilotNetMini net = mini(5);
  RngStream rng(5);
  EXPECT_THROW(forward(net, sample_uniform({1, 10, 16, 1}, rng), spec(DropoutMode::uniform, 0.1), {}, rng), ShapeError);
  EXPECT_THROW(forward(net, sample_uniform({1, 12, 16, 1}, rng), spec(DropoutMode::gaze, 0.1), {}, rng), ConfigError);
}

TEST(Backward, PerfectTargetsGiveZeroLossAndGradients) {
  const PilotNetMini net = mini(6);
  RngStream data(6);
  const Tensor x = sample_uniform({3, 12, 16, 1}, data);
  const auto s = spec(DropoutMode::uniform, 0.3);
  RngStream a(1), b(1);
  const Tensor y = forward(net, x, s, {}, a);
  const LossAndGrads lg = backward(net, x, y, s, {}, b);
  EXPECT_EQ(lg.loss, 0.0);
  for (float g : lg.grads) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, LossScalesQuadraticallyWithOffset) {
  const PilotNetMini net = mini(7);
  RngStream data(7);
  const Tensor x = sample_uniform({3, 12, 16, 1}, data);
  const auto s = spec(DropoutMode::uniform, 0.3, Phase::test);
  RngStream r(1);
  const Tensor y = forward(net, x, s, {}, r);
  auto shifted = [&](float d) {
    Tensor t = y;
    for (auto& v : t.values()) v += d;
    return backward(net, x, t, s, {}, r).loss;
  };
  EXPECT_NEAR(shifted(2.0f), 4.0, 1e-4);
  EXPECT_NEAR(shifted(4.0f) / shifted(2.0f), 4.0, 1e-4);
}

TEST(Backward, MatchesFiniteDifferences) {
  const auto r = oracle::gradient_check(ArchConfig::miniature(), 11);
  EXPECT_GT(r.checked, 1000u);
  EXPECT_LT(r.skipped * 10, r.checked);
  EXPECT_LE(r.max_rel_error, 1e-3) << "worst " << r.worst;
}

TEST(Backward, TargetsMustMatchAndBeFinite) {
  const PilotNetMini net = mini(8);
  RngStream rng(8);
  const Tensor x = sample_uniform({2, 12, 16, 1}, rng);
  EXPECT_THROW(backward(net, x, Tensor({3}, 0.0f), spec(DropoutMode::uniform, 0.1), {}, rng), ShapeError);
  Tensor bad({2}, 0.0f);
  bad.values()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(backward(net, x, bad, spec(DropoutMode::uniform, 0.1), {}, rng), ParameterError);
}

TEST(DropoutPlacement, ZeroKeepAtPixelZeroesAllConv1Channels) {
  PilotNetMini net = mini(9);
  RngStream rng(9);
  const std::vector<float> x = [&] {
    const Tensor t = sample_uniform({1, 12, 16, 1}, rng);
    return std::vector<float>(t.values().begin(), t.values().end());
  }();
  const auto [h, w] = net.slot_size(0);
  Tensor m0({1, h, w}, 1.0f), m1({1, net.slot_size(1).first, net.slot_size(1).second}, 1.0f);
  const std::int64_t pi = h / 2, pj = w / 2;
  m0.values()[static_cast<std::size_t>(pi * w + pj)] = 0.0f;
  const std::vector<const Tensor*> ptrs{&m0, &m1};
  ForwardCache<float> cache;
  net.forward(x, 1, ptrs, cache);
  const int c1 = net.geometry()[0].out_c;
  int nonzero_elsewhere = 0;
  for (int c = 0; c < c1; ++c) {
    EXPECT_EQ(cache.conv_out[0][static_cast<std::size_t>((pi * w + pj) * c1 + c)], 0.0f);
  }
  for (std::size_t i = 0; i < cache.conv_out[0].size(); ++i) nonzero_elsewhere += cache.conv_out[0][i] != 0.0f;
  EXPECT_GT(nonzero_elsewhere, 0);
}

TEST(Train, OverfitsThirtyTwoSamples) {
  TrainConfig cfg;
  cfg.dropout = spec(DropoutMode::uniform, 0.0);
  cfg.epochs = 200;
  cfg.batch_size = 8;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 3e-4;
  cfg.augment.enabled = false;
  cfg.seed = 1;
  const auto data = random_samples(cfg.arch, 32, 21);
  const TrainResult r = train(data, cfg);
  const EpochStats s = evaluate(r.checkpoint.net, cfg.dropout, data, cfg.epochs, "train");
  EXPECT_LT(s.mse, 1.0);
  EXPECT_EQ(r.trace.size(), 200u);
}

TEST(Train, SameSeedSameCheckpoint) {
  TrainConfig cfg;
  cfg.arch = ArchConfig::miniature();
  cfg.dropout = spec(DropoutMode::uniform, 0.3);
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 5;
  const auto data = random_samples(cfg.arch, 20, 22);
  const auto a = train(data, cfg), b = train(data, cfg);
  EXPECT_EQ(encode_checkpoint(a.checkpoint.net, a.checkpoint.meta), encode_checkpoint(b.checkpoint.net, b.checkpoint.meta));
  cfg.augment.enabled = false;
  const auto c = train(data, cfg);
  bool differs = false;
  for (std::size_t i = 0; i < a.trace.size(); ++i) differs |= a.trace[i].mse != c.trace[i].mse;
  EXPECT_TRUE(differs);
}

TEST(Train, EmptyDatasetIsAnError) {
  TrainConfig cfg;
  cfg.arch = ArchConfig::miniature();
  EXPECT_THROW(train({}, cfg), DataError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  test::TempDir dir;
  Checkpoint c{mini(10), {}};
  c.meta.seed = 77;
  c.meta.variant = "gaze-real";
  c.meta.dropout = spec(DropoutMode::gaze, 0.5);
  save_checkpoint(c, dir / "net.ckpt");
  const Checkpoint back = load_checkpoint(dir / "net.ckpt");
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.net.parameter_count(), c.net.parameter_count());
  for (std::size_t i = 0; i < c.net.parameter_count(); ++i) EXPECT_EQ(back.net.parameters()[i], c.net.parameters()[i]);
  RngStream rng(10);
  const Tensor x = sample_uniform({2, 12, 16, 1}, rng);
  const auto s = spec(DropoutMode::uniform, 0.1, Phase::test);
  EXPECT_EQ(forward(c.net, x, s, {}, rng).values()[1], forward(back.net, x, s, {}, rng).values()[1]);
}

TEST(Checkpoint, TruncatedBlobIsRejected) {
  const std::string bytes = encode_checkpoint(mini(11), {});
  EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(""), CheckpointError);
}

TEST(Checkpoint, HeaderSizeEditIsRejected) {
  std::string bytes = encode_checkpoint(mini(12), {});
  const auto nl = bytes.find('\n');
  auto header = nlohmann::json::parse(bytes.substr(0, nl));
  header["blob_floats"] = header["blob_floats"].get<std::size_t>() + 1;
  std::string edited = header.dump() + bytes.substr(nl);
  EXPECT_THROW(decode_checkpoint(edited), CheckpointError);
  header = nlohmann::json::parse(bytes.substr(0, nl));
  header["version"] = 99;
  EXPECT_THROW(decode_checkpoint(header.dump() + bytes.substr(nl)), CheckpointError);
}

TEST(Checkpoint, MissingFileIsCheckpointError) {
  test::TempDir dir;
  EXPECT_THROW(load_checkpoint(dir / "nope.ckpt"), CheckpointError);
}
