#include <gtest/gtest.h>

#include <random>

#include "cvloc/refine.hpp"
#include "oracles.hpp"

using namespace cvloc;

namespace {

ConvLayer random_layer(std::mt19937_64& rng, std::size_t k, std::size_t c) {
  return {oracle::random_kernel(rng, k, c, c, 0.2), oracle::random_vector(rng, c, -0.1, 0.1)};
}

RefineWeights random_weights(std::mt19937_64& rng, std::size_t c) {
  return {random_layer(rng, 7, c), random_layer(rng, 3, c), random_layer(rng, 3, c),
          random_layer(rng, 1, c)};
}

FeatureMap relu_ref(FeatureMap m) {
  for (double& v : m.data()) v = std::max(v, 0.0);
  return m;
}

}  // namespace

TEST(Refine, ZeroWeightsGiveZero) {
  std::mt19937_64 rng(31);
  const FeatureMap x = oracle::random_map(rng, 10, 12, 4);
  const FeatureMap y = refine_block(x, RefineWeights::zeros(4));
  EXPECT_TRUE(y.same_shape(x));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Refine, DeadPathWithIdentityConv1) {
  std::mt19937_64 rng(32);
  const FeatureMap x = oracle::random_map(rng, 8, 8, 3);
  RefineWeights w = RefineWeights::zeros(3);
  for (std::size_t c = 0; c < 3; ++c) w.conv1.kernel(0, 0, c, c) = 1.0;
  const FeatureMap out = refine_block(x, w);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Refine, MatchesLayerCompositionOracle) {
  std::mt19937_64 rng(33);
  const FeatureMap x = oracle::random_map(rng, 32, 32, 8);
  const RefineWeights w = random_weights(rng, 8);
  const FeatureMap y1 = relu_ref(oracle::conv_same(x, w.conv7));
  const FeatureMap br = oracle::conv_same(relu_ref(oracle::conv_same(y1, w.res3a)), w.res3b);
  FeatureMap y2 = y1;
  for (std::size_t i = 0; i < y2.size(); ++i) y2.data()[i] += br.data()[i];
  const FeatureMap ref = oracle::conv_same(relu_ref(y2), w.conv1);
  const FeatureMap out = refine_block(x, w);
  ASSERT_TRUE(out.same_shape(x));
  EXPECT_LT(oracle::max_abs_diff(out.data(), ref.data()), 1e-9);
  EXPECT_EQ(out, refine_block(x, w));
}

TEST(Refine, ZeroResidualLeavesY1) {
  std::mt19937_64 rng(34);
  const FeatureMap x = oracle::random_map(rng, 9, 7, 2);
  RefineWeights w = random_weights(rng, 2);
  w.res3a = ConvLayer{ConvKernel(3, 2, 2), std::vector<double>(2, 0.0)};
  w.res3b = ConvLayer{ConvKernel(3, 2, 2), std::vector<double>(2, 0.0)};
  w.conv1 = ConvLayer{ConvKernel(1, 2, 2), {}};
  for (std::size_t c = 0; c < 2; ++c) w.conv1.kernel(0, 0, c, c) = 1.0;
  // With y2 = y1 >= 0, the identity 1x1 output equals y1 exactly.
  EXPECT_EQ(refine_block(x, w), relu(conv2d_same(x, w.conv7)));
}

TEST(Refine, ShapeErrors) {
  EXPECT_THROW(refine_block(FeatureMap(4, 4, 3), RefineWeights::zeros(4)), ShapeError);
}

TEST(Refine, WeightStoreRoundTrip) {
  std::mt19937_64 rng(35);
  RefineWeights w = random_weights(rng, 4);
  for (ConvLayer* l : {&w.conv7, &w.res3a, &w.res3b, &w.conv1}) {
    for (double& v : l->kernel.values) v = static_cast<float>(v);
    for (double& v : l->bias) v = static_cast<float>(v);
  }
  WeightStore s;
  w.store_into(s);
  EXPECT_EQ(s.size(), 8u);
  const RefineWeights back = RefineWeights::from_store(s);
  std::mt19937_64 rng2(36);
  const FeatureMap x = oracle::random_map(rng2, 6, 6, 4);
  EXPECT_EQ(refine_block(x, back), refine_block(x, w));

  WeightStore bad = s;
  bad.insert("refine.res3a.w", Tensor{{3, 3, 4, 5}, std::vector<float>(180, 0.0f)});
  try {
    RefineWeights::from_store(bad);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("refine.res3a.w"), std::string::npos);
  }
  WeightStore missing;
  EXPECT_THROW(RefineWeights::from_store(missing), ShapeError);
}
