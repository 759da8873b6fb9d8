#pragma once

// Seeded synthetic oracles: poses, weighted correspondence sets with noise
// and outliers, and rigid planar scenes with a known pose.
//
// Randomness comes from a SplitMix64 counter generator with explicit
// uniform/normal transforms, so samples are identical across platforms and
// every trial can be generated independently from (seed, trial index).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "cvloc/error.hpp"
#include "cvloc/geometry.hpp"
#include "cvloc/pose_solver.hpp"
#include "cvloc/tensor.hpp"

namespace cvloc {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

/// Independent stream for trial `index` of a run seeded with `seed`.
inline SplitMix64 trial_rng(std::uint64_t seed, std::uint64_t index) {
  SplitMix64 mix(seed ^ (0xD1B54A32D192ED03ULL * (index + 1)));
  return SplitMix64(mix.next());
}

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n = 100;             // matches per set
  double patch_size = 500.0;       // px; match coordinates span [0, patch)
  double noise_sigma = 0.0;        // px
  double outlier_fraction = 0.0;   // [0, 1)
  double outlier_weight_max = 0.1; // outlier weights in [0, max); 0 means exactly 0
  double rot_range_deg = 10.0;
  double trans_range_px = 12.0;
  // scenes
  std::size_t grid_size = 64;
  std::size_t sat_size = 80;
  std::size_t channels = 8;
  double texture_sigma = 2.0;      // px, low-pass filter on the white-noise texture
  double mpp = 0.2;

  void validate() const {
    if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0)) {
      throw Error("synth: outlier_fraction must lie in [0, 1)");
    }
    if (rot_range_deg < 0.0 || trans_range_px < 0.0 || noise_sigma < 0.0 ||
        outlier_weight_max < 0.0 || !(patch_size > 0.0) || !(mpp > 0.0)) {
      throw Error("synth: ranges must be non-negative");
    }
  }
};

inline Se2Pose gen_pose(const SynthConfig& cfg, SplitMix64& rng) {
  const double r = deg_to_rad(cfg.rot_range_deg);
  const double theta = r > 0.0 ? rng.uniform(-r, r) : 0.0;
  const double tr = cfg.trans_range_px;
  const double tu = tr > 0.0 ? rng.uniform(-tr, tr) : 0.0;
  const double tv = tr > 0.0 ? rng.uniform(-tr, tr) : 0.0;
  return {theta, tu, tv};
}

inline Se2Pose gen_pose(const SynthConfig& cfg) {
  SplitMix64 rng = trial_rng(cfg.seed, 0);
  return gen_pose(cfg, rng);
}

struct MatchSample {
  Se2Pose gt;
  MatchSet matches;
  std::vector<std::uint8_t> inlier;
};

inline MatchSample gen_matches(const SynthConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  if (cfg.n < 3) throw Error("gen_matches: n must be >= 3");
  MatchSample s;
  s.gt = gen_pose(cfg, rng);
  const std::size_t n = cfg.n;
  const auto n_out = static_cast<std::size_t>(std::llround(cfg.outlier_fraction * static_cast<double>(n)));

  // Outliers are the first n_out entries of a random permutation.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  s.inlier.assign(n, 1);
  for (std::size_t k = 0; k < n_out; ++k) s.inlier[perm[k]] = 0;

  const Mat2 rot = s.gt.rotation();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p(rng.uniform(0.0, cfg.patch_size), rng.uniform(0.0, cfg.patch_size));
    if (s.inlier[i]) {
      Vec2 q = rot * p + s.gt.t;
      if (cfg.noise_sigma > 0.0) q += cfg.noise_sigma * Vec2(rng.normal(), rng.normal());
      s.matches.add(p, q, 1.0 - 0.5 * rng.uniform());  // (0.5, 1]
    } else {
      const Vec2 q(rng.uniform(0.0, cfg.patch_size), rng.uniform(0.0, cfg.patch_size));
      const double w = cfg.outlier_weight_max > 0.0 ? cfg.outlier_weight_max * rng.uniform() : 0.0;
      s.matches.add(p, q, w);
    }
  }
  return s;
}

inline MatchSample gen_matches(const SynthConfig& cfg) {
  SplitMix64 rng = trial_rng(cfg.seed, 0);
  return gen_matches(cfg, rng);
}

/// Separable Gaussian blur with clamped borders.
inline FeatureMap gaussian_blur(const FeatureMap& in, double sigma) {
  if (!(sigma > 0.0)) return in;
  const auto radius = static_cast<long long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (long long i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    ksum += v;
  }
  for (double& v : k) v /= ksum;

  const long long h = static_cast<long long>(in.height());
  const long long w = static_cast<long long>(in.width());
  const std::size_t ch = in.channels();
  auto clampi = [](long long v, long long hi) { return std::clamp(v, 0LL, hi - 1); };
  FeatureMap tmp(in.height(), in.width(), ch);
  for (long long r = 0; r < h; ++r)
    for (long long c = 0; c < w; ++c)
      for (long long i = -radius; i <= radius; ++i) {
        const auto src = in.pixel(static_cast<std::size_t>(r), static_cast<std::size_t>(clampi(c + i, w)));
        auto dst = tmp.pixel(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        const double kv = k[static_cast<std::size_t>(i + radius)];
        for (std::size_t q = 0; q < ch; ++q) dst[q] += kv * src[q];
      }
  FeatureMap out(in.height(), in.width(), ch);
  for (long long r = 0; r < h; ++r)
    for (long long c = 0; c < w; ++c)
      for (long long i = -radius; i <= radius; ++i) {
        const auto src = tmp.pixel(static_cast<std::size_t>(clampi(r + i, h)), static_cast<std::size_t>(c));
        auto dst = out.pixel(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        const double kv = k[static_cast<std::size_t>(i + radius)];
        for (std::size_t q = 0; q < ch; ++q) dst[q] += kv * src[q];
      }
  return out;
}

/// Low-pass filtered white noise, standardised per channel and then
/// normalised to unit length per texel.
inline FeatureMap gen_texture(std::size_t h, std::size_t w, std::size_t ch, double sigma,
                              SplitMix64& rng) {
  FeatureMap noise(h, w, ch);
  for (double& v : noise.data()) v = rng.normal();
  FeatureMap tex = gaussian_blur(noise, sigma);
  for (std::size_t q = 0; q < ch; ++q) {
    double mean = 0.0;
    for (std::size_t i = q; i < tex.size(); i += ch) mean += tex.data()[i];
    mean /= static_cast<double>(h * w);
    double var = 0.0;
    for (std::size_t i = q; i < tex.size(); i += ch) {
      const double d = tex.data()[i] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(h * w));
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    for (std::size_t i = q; i < tex.size(); i += ch) tex.data()[i] = (tex.data()[i] - mean) * inv;
  }
  // Unit-length feature vectors: the dot-product similarity then peaks at
  // the true correspondence instead of at high-norm texels.
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      auto px = tex.pixel(r, c);
      double nrm = 0.0;
      for (double v : px) nrm += v * v;
      nrm = std::sqrt(nrm);
      if (nrm > 0.0)
        for (double& v : px) v /= nrm;
    }
  }
  return tex;
}

struct SceneSample {
  Se2Pose gt;          // maps BEV pixels to satellite pixels
  FeatureMap f_sat;    // sat_size x sat_size x C
  FeatureMap f_bev;    // grid x grid x C, zero where invisible
  Mask visibility;
};

/// The BEV grid is centred in the satellite patch; the sampled pose rotates
/// the grid about its anchor and shifts it by the sampled translation.
inline Se2Pose scene_pose(const Se2Pose& offset, const BevGrid& grid, std::size_t sat_size) {
  const double centre = 0.5 * static_cast<double>(sat_size - grid.size);
  const Vec2 target = grid.anchor + Vec2(centre, centre) + offset.t;
  return {offset.theta, target - rotation_matrix(offset.theta) * grid.anchor};
}

/// Warps `f_sat` into the BEV frame: f_bev(p') = f_sat(R p' + t).
inline SceneSample warp_scene(FeatureMap f_sat, const Se2Pose& pose, std::size_t grid_size) {
  SceneSample s{pose, std::move(f_sat), FeatureMap(grid_size, grid_size, 1), Mask(grid_size, grid_size, 0)};
  s.f_bev = FeatureMap(grid_size, grid_size, s.f_sat.channels());
  const Mat2 rot = pose.rotation();
  for (std::size_t r = 0; r < grid_size; ++r) {
    for (std::size_t c = 0; c < grid_size; ++c) {
      const Vec2 q = rot * Vec2(static_cast<double>(c), static_cast<double>(r)) + pose.t;
      s.visibility.set(r, c, sample_point(s.f_sat, q.x(), q.y(), s.f_bev.pixel(r, c)));
    }
  }
  return s;
}

inline SceneSample gen_scene(const SynthConfig& cfg, const BevGrid& grid, SplitMix64& rng) {
  cfg.validate();
  grid.validate();
  if (grid.size != cfg.grid_size) throw GeometryError("gen_scene: grid size differs from config");
  if (grid.size > cfg.sat_size) {
    throw GeometryError("gen_scene: BEV grid (" + std::to_string(grid.size) +
                        ") larger than the satellite patch (" + std::to_string(cfg.sat_size) + ")");
  }
  if (cfg.trans_range_px >= 0.5 * static_cast<double>(cfg.sat_size)) {
    throw GeometryError("gen_scene: translation prior exceeds the satellite patch");
  }
  const Se2Pose offset = gen_pose(cfg, rng);
  FeatureMap tex = gen_texture(cfg.sat_size, cfg.sat_size, cfg.channels, cfg.texture_sigma, rng);
  return warp_scene(std::move(tex), scene_pose(offset, grid, cfg.sat_size), grid.size);
}

inline SceneSample gen_scene(const SynthConfig& cfg, const BevGrid& grid) {
  SplitMix64 rng = trial_rng(cfg.seed, 0);
  return gen_scene(cfg, grid, rng);
}

/// Grid matching a synthetic config: anchor at the grid centre.
inline BevGrid synth_grid(const SynthConfig& cfg) {
  BevGrid g;
  g.size = cfg.grid_size;
  g.meters_per_pixel = cfg.mpp;
  const double a = 0.5 * static_cast<double>(cfg.grid_size);
  g.anchor = Vec2(a, a);
  return g;
}

}  // namespace cvloc
