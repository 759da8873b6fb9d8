#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "cvloc/flow.hpp"
#include "cvloc/supervision.hpp"
#include "cvloc/synth.hpp"
#include "oracles.hpp"

using namespace cvloc;

namespace {

FeatureMap distinct_texture(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t c) {
  SplitMix64 rng(seed);
  return gen_texture(h, w, c, 1.5, rng);
}

Tensor random_tensor(std::mt19937_64& rng, std::vector<std::uint32_t> dims, float scale) {
  Tensor t{std::move(dims), {}};
  std::uniform_real_distribution<float> u(-scale, scale);
  t.values.resize(t.element_count());
  for (float& v : t.values) v = u(rng);
  return t;
}

// hidden 4, 2 levels, radius 1, context 3 -> Cx = 2*9 + 2 + 3 = 23.
WeightStore gru_store(std::mt19937_64& rng, float scale, std::uint32_t cx = 23) {
  const std::uint32_t ch = 4;
  WeightStore s;
  for (const char* g : {"gru.convz", "gru.convr", "gru.convh"}) {
    s.insert(std::string(g) + ".w", random_tensor(rng, {3, 3, ch + cx, ch}, scale));
    s.insert(std::string(g) + ".b", random_tensor(rng, {ch}, scale));
  }
  s.insert("head.flow.w", random_tensor(rng, {3, 3, ch, 2}, scale));
  s.insert("head.flow.b", random_tensor(rng, {2}, scale));
  s.insert("head.score.w", random_tensor(rng, {1, 1, ch, 1}, scale));
  s.insert("head.score.b", random_tensor(rng, {1}, scale));
  return s;
}

WeightStore zeroed(WeightStore s) {
  WeightStore out;
  for (auto [name, t] : s.tensors()) {
    std::fill(t.values.begin(), t.values.end(), 0.0f);
    out.insert(name, t);
  }
  return out;
}

ConvLayer layer(const WeightStore& s, const std::string& p) { return conv_layer(s, p, 0, 0, 0); }

}  // namespace

TEST(InitFlow, ZeroFlowHalfScore) {
  const FlowField f = init_flow(4, 4, Mask(4, 4, 1));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(f.flow(r, c), Vec2::Zero());
      EXPECT_EQ(f.score(r, c), 0.5);
    }
  const FlowField none = init_flow(3, 2, Mask(3, 2, 0));
  EXPECT_EQ(none.visibility().count(), 0u);
  EXPECT_EQ(init_flow(4, 4, Mask(4, 4, 1)), f);
  EXPECT_THROW(init_flow(3, 3, Mask(2, 3, 1)), ShapeError);
}

TEST(Argmax, SelfMatching) {
  const FeatureMap f = distinct_texture(1, 16, 16, 8);
  const CorrelationPyramid p = build_pyramid(f, f, 2);
  const FlowField out = argmax_update(p, init_flow(16, 16, Mask(16, 16, 1)));
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      // Integer peak is the cell itself; the fit moves it by at most half a pixel.
      EXPECT_LE(out.flow(r, c).cwiseAbs().maxCoeff(), 0.5);
      // Score is the softmax mass of the self-similarity peak.
      const auto plane = p.levels[0].plane(r, c);
      const double vmax = *std::max_element(plane.begin(), plane.end());
      double z = 0;
      for (double v : plane) z += std::exp(v - vmax);
      EXPECT_NEAR(out.score(r, c), 1.0 / z, 1e-12);
    }
}

TEST(Argmax, ConstructedShift) {
  const std::size_t n = 24;
  const FeatureMap f1 = distinct_texture(2, n, n, 8);
  FeatureMap f2(n, n, 8);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t k = 0; k < 8; ++k) f2(r, (c + 3) % n, k) = f1(r, c, k);
  const FlowField out = argmax_update(build_pyramid(f1, f2, 1), init_flow(n, n, Mask(n, n, 1)));
  for (std::size_t r = 2; r + 2 < n; ++r)
    for (std::size_t c = 2; c + 5 < n; ++c) {
      EXPECT_NEAR(out.flow(r, c).x(), 3.0, 0.5) << r << "," << c;
      EXPECT_NEAR(out.flow(r, c).y(), 0.0, 0.5) << r << "," << c;
    }
}

TEST(Argmax, QuadraticPeakRecoveredExactly) {
  std::mt19937_64 rng(50);
  std::uniform_real_distribution<double> off(-0.45, 0.45), curv(0.3, 2.0), skew(-0.2, 0.2);
  const std::size_t w = 7, h = 6, kx = 3, ky = 2;
  for (int trial = 0; trial < 50; ++trial) {
    const double x0 = double(kx) + off(rng), y0 = double(ky) + off(rng);
    const double a = curv(rng), b = curv(rng), e = skew(rng);
    std::vector<double> plane(w * h);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = double(x) - x0, dy = double(y) - y0;
        plane[y * w + x] = 5.0 - a * dx * dx - b * dy * dy - e * dx * dy;
      }
    const Vec2 o = detail::refine_peak(plane.data(), h, w, kx, ky);
    EXPECT_NEAR(o.x(), x0 - double(kx), 1e-12);
    EXPECT_NEAR(o.y(), y0 - double(ky), 1e-12);
  }
  // Border peaks fall back to the available axis only.
  std::vector<double> row{0.0, 1.0, 0.5};
  const Vec2 o = detail::refine_peak(row.data(), 1, 3, 1, 0);
  EXPECT_NEAR(o.x(), 0.5 * (0.0 - 0.5) / (0.0 - 2.0 + 0.5), 1e-15);
  EXPECT_EQ(o.y(), 0.0);
  EXPECT_EQ(detail::refine_peak(row.data(), 1, 3, 2, 0), Vec2::Zero());
}

TEST(Argmax, FlatMapsHaveUniformScore) {
  const FeatureMap f(6, 6, 3, 1.0);
  const FeatureMap g(8, 10, 3, 1.0);
  const FlowField out = argmax_update(build_pyramid(f, g, 1), init_flow(6, 6, Mask(6, 6, 1)));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(out.score(r, c), 1.0 / 80.0, 1e-12);
}

TEST(Argmax, EndpointsInBoundsAndInvisibleUntouched) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 5; ++trial) {
    const FeatureMap f1 = oracle::random_map(rng, 10, 12, 4);
    const FeatureMap f2 = oracle::random_map(rng, 9, 7, 4);
    Mask vis(10, 12, 1);
    for (std::size_t c = 0; c < 12; ++c) vis.set(3, c, false);
    FlowField in = init_flow(10, 12, vis);
    in.flow(3, 4) = Vec2(100.0, -7.0);
    in.score(3, 4) = 0.25;
    const FlowField out = argmax_update(build_pyramid(f1, f2, 2), in, 0.3);
    EXPECT_EQ(out.flow(3, 4), Vec2(100.0, -7.0));
    EXPECT_EQ(out.score(3, 4), 0.25);
    for (std::size_t r = 0; r < 10; ++r)
      for (std::size_t c = 0; c < 12; ++c) {
        EXPECT_GE(out.score(r, c), 0.0);
        EXPECT_LE(out.score(r, c), 1.0);
        if (!vis(r, c)) continue;
        const Vec2 q = Vec2(double(c), double(r)) + out.flow(r, c);
        EXPECT_GE(q.x(), -0.5);
        EXPECT_LE(q.x(), 6.5);
        EXPECT_GE(q.y(), -0.5);
        EXPECT_LE(q.y(), 8.5);
      }
  }
}

TEST(Argmax, RejectsBadTemperatureAndShape) {
  const FeatureMap f(4, 4, 2, 1.0);
  const CorrelationPyramid p = build_pyramid(f, f, 1);
  EXPECT_THROW(argmax_update(p, init_flow(4, 4, Mask(4, 4, 1)), 0.0), ShapeError);
  EXPECT_THROW(argmax_update(p, init_flow(3, 4, Mask(3, 4, 1))), ShapeError);
}

TEST(Gru, ZeroWeightAlgebra) {
  std::mt19937_64 rng(52);
  const WeightStore s = zeroed(gru_store(rng, 1.0f));
  const CorrelationPyramid p = build_pyramid(oracle::random_map(rng, 8, 8, 3), oracle::random_map(rng, 8, 8, 3), 2);
  const FeatureMap hidden = oracle::random_map(rng, 8, 8, 4);
  const FeatureMap ctx = oracle::random_map(rng, 8, 8, 3);
  FlowField flow = init_flow(8, 8, Mask(8, 8, 1));
  flow.flow(2, 2) = Vec2(0.5, -1.0);
  const GruStep out = gru_update(p, flow, hidden, &ctx, s, 1);
  for (std::size_t i = 0; i < hidden.size(); ++i) EXPECT_EQ(out.hidden.data()[i], 0.5 * hidden.data()[i]);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(out.flow.flow(r, c), flow.flow(r, c));
      EXPECT_EQ(out.flow.score(r, c), 0.5);
    }
}

TEST(Gru, ZeroFlowHeadPreservesFlow) {
  std::mt19937_64 rng(53);
  WeightStore s = gru_store(rng, 0.3f);
  s.insert("head.flow.w", Tensor{{3, 3, 4, 2}, std::vector<float>(72, 0.0f)});
  s.insert("head.flow.b", Tensor{{2}, {0.0f, 0.0f}});
  const CorrelationPyramid p = build_pyramid(oracle::random_map(rng, 8, 8, 3), oracle::random_map(rng, 10, 10, 3), 2);
  const FeatureMap ctx = oracle::random_map(rng, 8, 8, 3);
  FlowField flow = init_flow(8, 8, Mask(8, 8, 1));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) flow.flow(r, c) = Vec2(0.1 * double(r), -0.2 * double(c));
  const GruStep out = gru_update(p, flow, oracle::random_map(rng, 8, 8, 4), &ctx, s, 1);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.flow.flow(r, c), flow.flow(r, c));
}

TEST(Gru, MatchesStepByStepOracle) {
  std::mt19937_64 rng(54);
  const WeightStore s = gru_store(rng, 0.3f);
  const FeatureMap f1 = oracle::random_map(rng, 8, 8, 3);
  const FeatureMap f2 = oracle::random_map(rng, 12, 12, 3);
  const CorrelationPyramid p = build_pyramid(f1, f2, 2);
  const FeatureMap hidden = oracle::random_map(rng, 8, 8, 4);
  const FeatureMap ctx = oracle::random_map(rng, 8, 8, 3);
  Mask vis(8, 8, 1);
  vis.set(0, 0, false);
  FlowField flow = init_flow(8, 8, vis);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) flow.flow(r, c) = Vec2(u(rng), u(rng));

  const GruStep out = gru_update(p, flow, hidden, &ctx, s, 1);
  EXPECT_EQ(out.flow.flow(0, 0), flow.flow(0, 0));

  // Oracle assembled from naive conv and explicit gate algebra.
  CoordGrid coords(8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) coords(r, c) = Vec2(double(c), double(r)) + flow.flow(r, c);
  const FeatureMap corr = oracle::lookup(p, coords, 1);
  const std::size_t cx = corr.channels() + 2 + 3;
  FeatureMap hx(8, 8, 4 + cx), x(8, 8, cx);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      std::size_t k = 0;
      for (std::size_t q = 0; q < corr.channels(); ++q) x(r, c, k++) = corr(r, c, q);
      x(r, c, k++) = flow.flow(r, c).x();
      x(r, c, k++) = flow.flow(r, c).y();
      for (std::size_t q = 0; q < 3; ++q) x(r, c, k++) = ctx(r, c, q);
      for (std::size_t q = 0; q < 4; ++q) hx(r, c, q) = hidden(r, c, q);
      for (std::size_t q = 0; q < cx; ++q) hx(r, c, 4 + q) = x(r, c, q);
    }
  const FeatureMap zl = oracle::conv_same(hx, layer(s, "gru.convz"));
  const FeatureMap rl = oracle::conv_same(hx, layer(s, "gru.convr"));
  FeatureMap rhx = hx;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t q = 0; q < 4; ++q) rhx(r, c, q) = oracle::sigmoid(rl(r, c, q)) * hidden(r, c, q);
  const FeatureMap hl = oracle::conv_same(rhx, layer(s, "gru.convh"));
  FeatureMap hn(8, 8, 4);
  for (std::size_t i = 0; i < hn.size(); ++i) {
    const double z = oracle::sigmoid(zl.data()[i]);
    hn.data()[i] = (1 - z) * hidden.data()[i] + z * std::tanh(hl.data()[i]);
  }
  EXPECT_LT(oracle::max_abs_diff(out.hidden.data(), hn.data()), 1e-12);
  const FeatureMap d = oracle::conv_same(hn, layer(s, "head.flow"));
  const FeatureMap sc = oracle::conv_same(hn, layer(s, "head.score"));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      if (!vis(r, c)) continue;
      EXPECT_NEAR(out.flow.flow(r, c).x(), flow.flow(r, c).x() + d(r, c, 0), 1e-12);
      EXPECT_NEAR(out.flow.flow(r, c).y(), flow.flow(r, c).y() + d(r, c, 1), 1e-12);
      EXPECT_NEAR(out.flow.score(r, c), oracle::sigmoid(sc(r, c, 0)), 1e-12);
    }

  const GruStep again = gru_update(p, flow, hidden, &ctx, s, 1);
  EXPECT_EQ(again.flow, out.flow);
  EXPECT_EQ(again.hidden, out.hidden);
}

TEST(Gru, NamedShapeErrors) {
  std::mt19937_64 rng(55);
  const CorrelationPyramid p = build_pyramid(oracle::random_map(rng, 4, 4, 2), oracle::random_map(rng, 4, 4, 2), 2);
  const FeatureMap hidden(4, 4, 4);
  const FeatureMap ctx(4, 4, 3);
  const FlowField flow = init_flow(4, 4, Mask(4, 4, 1));
  WeightStore s = gru_store(rng, 0.1f);
  s.insert("head.score.w", Tensor{{1, 1, 5, 1}, std::vector<float>(5, 0.0f)});
  try {
    gru_update(p, flow, hidden, &ctx, s, 1);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("head.score.w"), std::string::npos);
  }
  const WeightStore good = gru_store(rng, 0.1f);
  EXPECT_THROW(gru_update(p, flow, hidden, nullptr, good, 1), ShapeError);  // context channels missing
  EXPECT_THROW(gru_update(p, flow, FeatureMap(4, 4, 3), &ctx, good, 1), ShapeError);
  WeightStore missing = good;
  WeightStore partial;
  for (const auto& [n, t] : missing.tensors())
    if (n != "gru.convr.w") partial.insert(n, t);
  try {
    gru_update(p, flow, hidden, &ctx, partial, 1);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("gru.convr.w"), std::string::npos);
  }
}

TEST(EstimateFlow, SingleIterationAndDeterminism) {
  const FeatureMap f1 = distinct_texture(3, 12, 12, 4);
  const FeatureMap f2 = distinct_texture(4, 16, 16, 4);
  const Mask vis(12, 12, 1);
  const FlowTrace one = estimate_flow(f1, f2, ArgmaxOperator{1.0}, 1, vis, 3);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.final(), argmax_update(build_pyramid(f1, f2, 3), init_flow(12, 12, vis)));
  const FlowTrace a = estimate_flow(f1, f2, ArgmaxOperator{}, 12, vis);
  const FlowTrace b = estimate_flow(f1, f2, ArgmaxOperator{}, 12, vis);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(a.iterations[k], b.iterations[k]);
  EXPECT_THROW(estimate_flow(f1, f2, ArgmaxOperator{}, 0, vis), ShapeError);
  EXPECT_THROW(estimate_flow(f1, f2, ArgmaxOperator{}, 2, Mask(3, 3, 1)), ShapeError);
}

TEST(EstimateFlow, GruTraceLengthAndInvisibleCells) {
  std::mt19937_64 rng(56);
  const WeightStore s = gru_store(rng, 0.2f);
  const FeatureMap f1 = oracle::random_map(rng, 8, 8, 3);
  const FeatureMap f2 = oracle::random_map(rng, 8, 8, 3);
  const FeatureMap ctx = oracle::random_map(rng, 8, 8, 3);
  Mask vis(8, 8, 1);
  vis.set(4, 4, false);
  const FlowTrace t = estimate_flow(f1, f2, GruOperator{&s, &ctx, 1}, 5, vis, 2);
  ASSERT_EQ(t.size(), 5u);
  for (const FlowField& f : t.iterations) {
    EXPECT_EQ(f.flow(4, 4), Vec2::Zero());
    EXPECT_EQ(f.score(4, 4), 0.5);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_GE(f.score(r, c), 0.0);
        EXPECT_LE(f.score(r, c), 1.0);
      }
  }
  EXPECT_THROW(estimate_flow(f1, f2, GruOperator{nullptr, nullptr, 1}, 1, vis, 2), ShapeError);
}

TEST(EstimateFlow, SyntheticRigidSceneEndpointError) {
  SynthConfig cfg;
  cfg.seed = 5;
  const BevGrid grid = synth_grid(cfg);
  SplitMix64 rng = trial_rng(cfg.seed, 0);
  const SceneSample sc = gen_scene(cfg, grid, rng);
  const FlowTrace t = estimate_flow(sc.f_bev, sc.f_sat, ArgmaxOperator{}, 12, sc.visibility);
  const FlowField gt = gt_flow(sc.gt, grid, sc.visibility, cfg.sat_size, cfg.sat_size);
  std::vector<double> err;
  for (std::size_t r = 0; r < grid.size; ++r)
    for (std::size_t c = 0; c < grid.size; ++c)
      if (gt.visible(r, c)) err.push_back((t.final().flow(r, c) - gt.flow(r, c)).norm());
  ASSERT_GT(err.size(), 1000u);
  std::sort(err.begin(), err.end());
  const double within = double(std::lower_bound(err.begin(), err.end(), 1.0) - err.begin()) / double(err.size());
  EXPECT_LT(err[err.size() / 2], 0.5);
  EXPECT_GT(within, 0.9);
}
