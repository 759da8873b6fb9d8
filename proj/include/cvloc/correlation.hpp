#pragma once

// All-pairs correlation between a source map (H1 x W1) and a target map
// (H2 x W2), its 2x2-pooled pyramid over the target dimensions, and the
// windowed lookup used by the flow update operators.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "cvloc/tensor.hpp"

namespace cvloc {

/// 4D volume vol[i, j, k, l]: source cell (i, j), target cell (k, l).
class CorrelationVolume {
 public:
  CorrelationVolume() = default;
  CorrelationVolume(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w)
      : src_h_(src_h), src_w_(src_w), dst_h_(dst_h), dst_w_(dst_w),
        data_(src_h * src_w * dst_h * dst_w, 0.0) {}

  std::size_t src_height() const noexcept { return src_h_; }
  std::size_t src_width() const noexcept { return src_w_; }
  std::size_t dst_height() const noexcept { return dst_h_; }
  std::size_t dst_width() const noexcept { return dst_w_; }
  std::size_t plane_size() const noexcept { return dst_h_ * dst_w_; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * src_w_ + j) * dst_h_ + k) * dst_w_ + l];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * src_w_ + j) * dst_h_ + k) * dst_w_ + l];
  }

  /// Target plane (dst_h x dst_w, row-major) for source cell (i, j).
  std::span<const double> plane(std::size_t i, std::size_t j) const {
    return {data_.data() + (i * src_w_ + j) * plane_size(), plane_size()};
  }
  std::span<double> plane(std::size_t i, std::size_t j) {
    return {data_.data() + (i * src_w_ + j) * plane_size(), plane_size()};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

 private:
  std::size_t src_h_ = 0, src_w_ = 0, dst_h_ = 0, dst_w_ = 0;
  std::vector<double> data_;
};

struct CorrelationPyramid {
  std::vector<CorrelationVolume> levels;
  double normalization = 1.0;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t src_height() const { return levels.front().src_height(); }
  std::size_t src_width() const { return levels.front().src_width(); }
};

inline constexpr std::size_t kDefaultPyramidLevels = 4;
inline constexpr std::size_t kDefaultLookupRadius = 4;

/// vol[i,j,k,l] = <f1[i,j,:], f2[k,l,:]> / sqrt(C).
inline CorrelationVolume build_correlation(const FeatureMap& f1, const FeatureMap& f2,
                                           double* normalization = nullptr) {
  if (f1.channels() != f2.channels()) {
    throw ShapeError("build_correlation: channel mismatch " + f1.shape_string() + " vs " +
                     f2.shape_string());
  }
  const std::size_t c = f1.channels();
  const double norm = std::sqrt(static_cast<double>(c));
  if (normalization) *normalization = norm;
  CorrelationVolume vol(f1.height(), f1.width(), f2.height(), f2.width());

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> a(f1.data().data(), static_cast<Eigen::Index>(f1.height() * f1.width()),
                                     static_cast<Eigen::Index>(c));
  const Eigen::Map<const RowMajor> b(f2.data().data(), static_cast<Eigen::Index>(f2.height() * f2.width()),
                                     static_cast<Eigen::Index>(c));
  Eigen::Map<RowMajor> out(vol.data().data(), a.rows(), b.rows());
  out.noalias() = a * b.transpose();
  out *= 1.0 / norm;
  return vol;
}

/// 2x2 mean pooling over the target dimensions of every source cell.
inline CorrelationVolume pool_target_dims(const CorrelationVolume& v) {
  CorrelationVolume out(v.src_height(), v.src_width(), (v.dst_height() + 1) / 2,
                        (v.dst_width() + 1) / 2);
  for (std::size_t i = 0; i < v.src_height(); ++i) {
    for (std::size_t j = 0; j < v.src_width(); ++j) {
      detail::pool_plane(v.plane(i, j).data(), v.dst_height(), v.dst_width(), 1,
                         out.plane(i, j).data(), 1);
    }
  }
  return out;
}

inline CorrelationPyramid build_pyramid(CorrelationVolume level0, std::size_t num_levels,
                                        double normalization = 1.0) {
  if (num_levels < 1) throw ShapeError("build_pyramid: num_levels must be >= 1");
  CorrelationPyramid pyr;
  pyr.normalization = normalization;
  pyr.levels.reserve(num_levels);
  pyr.levels.push_back(std::move(level0));
  for (std::size_t k = 1; k < num_levels; ++k) {
    pyr.levels.push_back(pool_target_dims(pyr.levels.back()));
  }
  return pyr;
}

inline CorrelationPyramid build_pyramid(const FeatureMap& f1, const FeatureMap& f2,
                                        std::size_t num_levels = kDefaultPyramidLevels) {
  double norm = 1.0;
  CorrelationVolume vol = build_correlation(f1, f2, &norm);
  return build_pyramid(std::move(vol), num_levels, norm);
}

inline std::size_t lookup_channels(std::size_t num_levels, std::size_t radius) {
  const std::size_t side = 2 * radius + 1;
  return num_levels * side * side;
}

/// For every source cell, samples level k at coords / 2^k + (dx, dy) for all
/// integer offsets in [-radius, radius]^2. Channel index is
/// k * (2r+1)^2 + (dy + r) * (2r+1) + (dx + r). Out-of-bounds samples are 0.
inline FeatureMap lookup(const CorrelationPyramid& pyr, const CoordGrid& coords,
                         std::size_t radius = kDefaultLookupRadius) {
  const std::size_t h1 = pyr.src_height();
  const std::size_t w1 = pyr.src_width();
  if (coords.height() != h1 || coords.width() != w1) {
    throw ShapeError("lookup: coordinate grid " + std::to_string(coords.height()) + "x" +
                     std::to_string(coords.width()) + " does not match source " +
                     std::to_string(h1) + "x" + std::to_string(w1));
  }
  const std::size_t side = 2 * radius + 1;
  const auto r = static_cast<long long>(radius);
  FeatureMap out(h1, w1, lookup_channels(pyr.num_levels(), radius));
  for (std::size_t i = 0; i < h1; ++i) {
    for (std::size_t j = 0; j < w1; ++j) {
      auto dst = out.pixel(i, j);
      const Vec2& p = coords(i, j);
      double scale = 1.0;
      for (std::size_t k = 0; k < pyr.num_levels(); ++k, scale *= 2.0) {
        const CorrelationVolume& lvl = pyr.levels[k];
        const double* plane = lvl.plane(i, j).data();
        const double cx = p.x() / scale;
        const double cy = p.y() / scale;
        std::size_t ch = k * side * side;
        for (long long dy = -r; dy <= r; ++dy) {
          for (long long dx = -r; dx <= r; ++dx, ++ch) {
            dst[ch] = detail::sample_plane(plane, lvl.dst_height(), lvl.dst_width(),
                                           cx + static_cast<double>(dx),
                                           cy + static_cast<double>(dy));
          }
        }
      }
    }
  }
  return out;
}

}  // namespace cvloc
