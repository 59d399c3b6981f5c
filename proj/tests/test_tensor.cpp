#include <gtest/gtest.h>

#include <cmath>

#include "gazedrop/rng.hpp"
#include "gazedrop/tensor.hpp"

using namespace gazedrop;

TEST(RngStream, SameSeedSameSequence) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, DerivedStreamsAreIndependent) {
  const RngStream root(42, 7);
  RngStream a = root.derive(1), b = root.derive(2);
  int same = 0;
  for (int i = 0; i < 1000; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
  // Deriving does not advance the parent.
  RngStream c = root.derive(1);
  RngStream a2 = root.derive(1);
  EXPECT_EQ(c.next_u64(), a2.next_u64());
}

TEST(SampleUniform, Deterministic) {
  RngStream a(5), b(5);
  const Tensor x = sample_uniform({2, 2}, a);
  const Tensor y = sample_uniform({2, 2}, b);
  ASSERT_EQ(x.shape(), y.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(SampleUniform, RangeAndMean) {
  RngStream rng(11);
  const Tensor x = sample_uniform({1000, 1000}, rng);
  double sum = 0.0;
  for (float v : x.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LT(v, 1.0f);
    sum += v;
  }
  // CLT: sd of the mean is 0.289 / 1000.
  EXPECT_NEAR(sum / 1e6, 0.5, 0.002);
}

TEST(SampleUniform, RejectsNonPositiveExtent) {
  RngStream rng(1);
  EXPECT_THROW(sample_uniform({0, 2}, rng), ShapeError);
  EXPECT_THROW(sample_uniform({2, -1}, rng), ShapeError);
}

TEST(BilinearResize, IdentitySize) {
  RngStream rng(3);
  const Tensor m = sample_uniform({5, 7}, rng);
  const Tensor r = bilinear_resize(m, 5, 7);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(r[i], m[i]);
}

TEST(BilinearResize, ConstantStaysConstant) {
  const Tensor m({3, 4}, 0.37f);
  const Tensor r = bilinear_resize(m, 9, 2);
  for (float v : r.values()) EXPECT_FLOAT_EQ(v, 0.37f);
}

TEST(BilinearResize, AlignCornersHandOracle) {
  const Tensor m({1, 2}, std::vector<float>{0.0f, 1.0f});
  const Tensor r = bilinear_resize(m, 1, 4);
  const float want[] = {0.0f, 1.0f / 3.0f, 2.0f / 3.0f, 1.0f};
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(r.at(0, j), want[j], 1e-7);
}

TEST(BilinearResize, ExactOnPlanarFields) {
  // f(i, j) = a + b*y + c*x in normalized coordinates is reproduced exactly.
  const int ih = 4, iw = 6, oh = 11, ow = 3;
  Tensor m({ih, iw});
  auto plane = [](double y, double x) { return 0.2 + 0.3 * y - 0.15 * x; };
  for (int i = 0; i < ih; ++i) {
    for (int j = 0; j < iw; ++j) m.at(i, j) = static_cast<float>(plane(i / 3.0, j / 5.0));
  }
  const Tensor r = bilinear_resize(m, oh, ow);
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) EXPECT_NEAR(r.at(i, j), plane(i / 10.0, j / 2.0), 1e-6);
  }
}

TEST(BilinearResize, StaysWithinInputRange) {
  RngStream rng(9);
  const Tensor m = sample_uniform({6, 9}, rng);
  const Tensor r = bilinear_resize(m, 17, 4);
  EXPECT_GE(r.min(), m.min());
  EXPECT_LE(r.max(), m.max());
}

TEST(BilinearResize, RejectsNon2D) {
  EXPECT_THROW(bilinear_resize(Tensor({2, 2, 1}), 3, 3), ShapeError);
}

TEST(Elementwise, Basics) {
  RngStream rng(2);
  const Tensor f = sample_uniform({2, 3, 4, 2}, rng);
  const Tensor same = elementwise(ElementwiseOp::mul, f, Tensor(f.shape(), 1.0f));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(same[i], f[i]);
  const Tensor zero = elementwise(ElementwiseOp::mul, f, Tensor(f.shape(), 0.0f));
  for (float v : zero.values()) EXPECT_EQ(v, 0.0f);
  const Tensor r = relu(Tensor({2}, std::vector<float>{-1.0f, 2.0f}));
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 2.0f);
  const Tensor s = elementwise(ElementwiseOp::scale, Tensor({2}, std::vector<float>{1.0f, -2.0f}), 3.0f);
  EXPECT_EQ(s[1], -6.0f);
  const Tensor a = elementwise(ElementwiseOp::add, s, s);
  EXPECT_EQ(a[0], 6.0f);
}

TEST(Elementwise, MaskBroadcastsOverChannels) {
  RngStream rng(4);
  const Tensor f = sample_uniform({3, 4, 5, 2}, rng);
  const Tensor mask = sample_uniform({4, 5}, rng);
  const Tensor out = elementwise(ElementwiseOp::mul, f, mask);
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j)
        for (int c = 0; c < 2; ++c) ASSERT_EQ(out.at(n, i, j, c), f.at(n, i, j, c) * mask.at(i, j));
}

TEST(Elementwise, PerSampleMaskBroadcasts) {
  RngStream rng(6);
  const Tensor f = sample_uniform({3, 4, 5, 2}, rng);
  const Tensor masks = sample_uniform({3, 4, 5}, rng);
  const Tensor out = elementwise(ElementwiseOp::mul, f, masks);
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j)
        for (int c = 0; c < 2; ++c) {
          ASSERT_EQ(out.at(n, i, j, c), f.at(n, i, j, c) * masks[static_cast<std::size_t>((n * 4 + i) * 5 + j)]);
        }
}

TEST(Elementwise, IncompatibleShapes) {
  EXPECT_THROW(elementwise(ElementwiseOp::add, Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(elementwise(ElementwiseOp::mul, Tensor({1, 4, 5, 2}), Tensor({4, 6})), ShapeError);
}

TEST(Tensor, ConstructorChecksLength) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  const Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_TRUE(t.all_finite());
}
