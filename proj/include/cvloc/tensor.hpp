#pragma once

// Dense feature-map substrate: storage, convolution, pooling and bilinear
// sampling. All reductions run in (row, col, channel) order so results are
// reproducible bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cvloc/error.hpp"

namespace cvloc {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// H x W x C grid of reals stored row-major as (row, col, channel).
class FeatureMap {
 public:
  FeatureMap() = default;

  FeatureMap(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels) {
    check_dims();
    data_.assign(height * width * channels, fill);
  }

  FeatureMap(std::size_t height, std::size_t width, std::size_t channels,
             std::vector<double> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    check_dims();
    if (data_.size() != height * width * channels) {
      throw ShapeError("feature map data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string());
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c, std::size_t ch) {
    return data_[index(r, c, ch)];
  }
  double operator()(std::size_t r, std::size_t c, std::size_t ch) const {
    return data_[index(r, c, ch)];
  }

  std::span<double> pixel(std::size_t r, std::size_t c) {
    return {data_.data() + index(r, c, 0), channels_};
  }
  std::span<const double> pixel(std::size_t r, std::size_t c) const {
    return {data_.data() + index(r, c, 0), channels_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool same_shape(const FeatureMap& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool same_spatial(std::size_t h, std::size_t w) const noexcept {
    return height_ == h && width_ == w;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" +
           std::to_string(channels_);
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::size_t index(std::size_t r, std::size_t c, std::size_t ch) const noexcept {
    return (r * width_ + c) * channels_ + ch;
  }

  void check_dims() const {
    if (height_ == 0 || width_ == 0 || channels_ == 0) {
      throw ShapeError("feature map dimensions must be >= 1, got " + shape_string());
    }
  }

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

/// Per-cell {0,1} flags over an H x W grid.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width, std::uint8_t fill = 1)
      : height_(height), width_(width), data_(height * width, fill ? 1 : 0) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }

  bool operator()(std::size_t r, std::size_t c) const { return data_[r * width_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { data_[r * width_ + c] = v ? 1 : 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }

  const std::vector<std::uint8_t>& data() const noexcept { return data_; }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Per-cell (x, y) sampling coordinates; x addresses columns, y rows.
class CoordGrid {
 public:
  CoordGrid() = default;
  CoordGrid(std::size_t height, std::size_t width)
      : height_(height),
        width_(width),
        coords_(height * width, Vec2::Constant(std::numeric_limits<double>::quiet_NaN())) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }

  Vec2& operator()(std::size_t r, std::size_t c) { return coords_[r * width_ + c]; }
  const Vec2& operator()(std::size_t r, std::size_t c) const { return coords_[r * width_ + c]; }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Vec2> coords_;
};

/// K x K x Cin x Cout cross-correlation kernel, stored [ky][kx][ci][co].
struct ConvKernel {
  std::size_t size = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<double> values;

  ConvKernel() = default;
  ConvKernel(std::size_t k, std::size_t cin, std::size_t cout, double fill = 0.0)
      : size(k), in_channels(cin), out_channels(cout), values(k * k * cin * cout, fill) {}

  double& operator()(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) {
    return values[((ky * size + kx) * in_channels + ci) * out_channels + co];
  }
  double operator()(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) const {
    return values[((ky * size + kx) * in_channels + ci) * out_channels + co];
  }
};

/// A convolution with its optional bias; used by the network blocks.
struct ConvLayer {
  ConvKernel kernel;
  std::vector<double> bias;  // empty means no bias
};

inline std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride,
                                    std::size_t padding) {
  const auto padded = static_cast<long long>(in + 2 * padding);
  const auto span = padded - static_cast<long long>(k);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

inline FeatureMap conv2d(const FeatureMap& input, const ConvKernel& kernel, std::size_t stride,
                         std::size_t padding, std::span<const double> bias = {}) {
  if (kernel.in_channels != input.channels()) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.in_channels) +
                     " input channels, map has " + std::to_string(input.channels()));
  }
  if (kernel.size == 0 || kernel.out_channels == 0) throw ShapeError("conv2d: empty kernel");
  if (stride == 0) throw GeometryError("conv2d: stride must be >= 1");
  if (!bias.empty() && bias.size() != kernel.out_channels) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != Cout " +
                     std::to_string(kernel.out_channels));
  }
  const std::size_t out_h = conv_output_size(input.height(), kernel.size, stride, padding);
  const std::size_t out_w = conv_output_size(input.width(), kernel.size, stride, padding);
  if (out_h < 1 || out_w < 1) {
    throw GeometryError("conv2d: output size < 1 for input " + input.shape_string());
  }

  const std::size_t k = kernel.size;
  const std::size_t cin = kernel.in_channels;
  const std::size_t cout = kernel.out_channels;
  const auto h = static_cast<long long>(input.height());
  const auto w = static_cast<long long>(input.width());
  FeatureMap out(out_h, out_w, cout);
  std::vector<double> acc(cout);

  for (std::size_t r = 0; r < out_h; ++r) {
    for (std::size_t c = 0; c < out_w; ++c) {
      if (bias.empty()) {
        std::fill(acc.begin(), acc.end(), 0.0);
      } else {
        std::copy(bias.begin(), bias.end(), acc.begin());
      }
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long long y = static_cast<long long>(r * stride + ky) - static_cast<long long>(padding);
        if (y < 0 || y >= h) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long long x =
              static_cast<long long>(c * stride + kx) - static_cast<long long>(padding);
          if (x < 0 || x >= w) continue;
          const auto px = input.pixel(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
          const double* kp = &kernel.values[(ky * k + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double v = px[ci];
            const double* kr = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) acc[co] += v * kr[co];
          }
        }
      }
      std::copy(acc.begin(), acc.end(), out.pixel(r, c).begin());
    }
  }
  return out;
}

/// Stride-1 convolution with (K-1)/2 zero padding; K must be odd.
inline FeatureMap conv2d_same(const FeatureMap& input, const ConvLayer& layer) {
  if (layer.kernel.size % 2 == 0) {
    throw ShapeError("same-padded convolution needs an odd kernel, got " +
                     std::to_string(layer.kernel.size));
  }
  return conv2d(input, layer.kernel, 1, layer.kernel.size / 2, layer.bias);
}

namespace detail {

/// 2x2 mean pooling of one h x w plane with `stride` between consecutive
/// elements. Odd sizes are replication-padded on the bottom/right.
inline void pool_plane(const double* src, std::size_t h, std::size_t w, std::size_t stride,
                       double* dst, std::size_t dst_stride) {
  const std::size_t oh = (h + 1) / 2;
  const std::size_t ow = (w + 1) / 2;
  for (std::size_t r = 0; r < oh; ++r) {
    const std::size_t r0 = 2 * r;
    const std::size_t r1 = std::min(r0 + 1, h - 1);
    for (std::size_t c = 0; c < ow; ++c) {
      const std::size_t c0 = 2 * c;
      const std::size_t c1 = std::min(c0 + 1, w - 1);
      const double sum = src[(r0 * w + c0) * stride] + src[(r0 * w + c1) * stride] +
                         src[(r1 * w + c0) * stride] + src[(r1 * w + c1) * stride];
      dst[(r * ow + c) * dst_stride] = sum * 0.25;
    }
  }
}

/// Bilinear interpolation weights for a point on an h x w lattice.
struct BilinearTap {
  std::size_t r0, c0, r1, c1;
  double fy, fx;
};

inline std::optional<BilinearTap> bilinear_tap(double x, double y, std::size_t h, std::size_t w) {
  // NaN fails every comparison and lands here too.
  if (!(x >= 0.0 && y >= 0.0 && x <= static_cast<double>(w - 1) &&
        y <= static_cast<double>(h - 1))) {
    return std::nullopt;
  }
  BilinearTap t{};
  if (w == 1) {
    t.c0 = t.c1 = 0;
    t.fx = 0.0;
  } else {
    t.c0 = std::min(static_cast<std::size_t>(std::floor(x)), w - 2);
    t.c1 = t.c0 + 1;
    t.fx = x - static_cast<double>(t.c0);
  }
  if (h == 1) {
    t.r0 = t.r1 = 0;
    t.fy = 0.0;
  } else {
    t.r0 = std::min(static_cast<std::size_t>(std::floor(y)), h - 2);
    t.r1 = t.r0 + 1;
    t.fy = y - static_cast<double>(t.r0);
  }
  return t;
}

inline double bilinear_blend(const BilinearTap& t, double v00, double v01, double v10,
                             double v11) {
  const double top = (1.0 - t.fx) * v00 + t.fx * v01;
  const double bottom = (1.0 - t.fx) * v10 + t.fx * v11;
  return (1.0 - t.fy) * top + t.fy * bottom;
}

/// Samples a single-channel h x w plane (row-major, unit stride); 0 when out of bounds.
inline double sample_plane(const double* plane, std::size_t h, std::size_t w, double x, double y) {
  const auto tap = bilinear_tap(x, y, h, w);
  if (!tap) return 0.0;
  return bilinear_blend(*tap, plane[tap->r0 * w + tap->c0], plane[tap->r0 * w + tap->c1],
                        plane[tap->r1 * w + tap->c0], plane[tap->r1 * w + tap->c1]);
}

}  // namespace detail

inline FeatureMap avg_pool2x2(const FeatureMap& input) {
  const std::size_t ch = input.channels();
  FeatureMap out((input.height() + 1) / 2, (input.width() + 1) / 2, ch);
  for (std::size_t k = 0; k < ch; ++k) {
    detail::pool_plane(input.data().data() + k, input.height(), input.width(), ch,
                       out.data().data() + k, ch);
  }
  return out;
}

/// Samples every channel of `input` at (x, y). Returns false (and writes
/// zeros) unless all four lattice neighbours are inside the map.
inline bool sample_point(const FeatureMap& input, double x, double y, std::span<double> out) {
  const auto tap = detail::bilinear_tap(x, y, input.height(), input.width());
  if (!tap) {
    std::fill(out.begin(), out.end(), 0.0);
    return false;
  }
  const auto p00 = input.pixel(tap->r0, tap->c0);
  const auto p01 = input.pixel(tap->r0, tap->c1);
  const auto p10 = input.pixel(tap->r1, tap->c0);
  const auto p11 = input.pixel(tap->r1, tap->c1);
  for (std::size_t k = 0; k < input.channels(); ++k) {
    out[k] = detail::bilinear_blend(*tap, p00[k], p01[k], p10[k], p11[k]);
  }
  return true;
}

struct SampleResult {
  FeatureMap values;
  Mask valid;
};

inline SampleResult bilinear_sample(const FeatureMap& input, const CoordGrid& grid) {
  SampleResult res{FeatureMap(grid.height(), grid.width(), input.channels()),
                   Mask(grid.height(), grid.width(), 0)};
  for (std::size_t r = 0; r < grid.height(); ++r) {
    for (std::size_t c = 0; c < grid.width(); ++c) {
      const Vec2& p = grid(r, c);
      res.valid.set(r, c, sample_point(input, p.x(), p.y(), res.values.pixel(r, c)));
    }
  }
  return res;
}

// Elementwise helpers.

template <typename F>
FeatureMap map_values(FeatureMap m, F&& f) {
  for (double& v : m.data()) v = f(v);
  return m;
}

inline FeatureMap relu(FeatureMap m) {
  return map_values(std::move(m), [](double v) { return v > 0.0 ? v : 0.0; });
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline FeatureMap sigmoid(FeatureMap m) {
  return map_values(std::move(m), [](double v) { return sigmoid(v); });
}

inline FeatureMap tanh(FeatureMap m) {
  return map_values(std::move(m), [](double v) { return std::tanh(v); });
}

inline FeatureMap add(FeatureMap a, const FeatureMap& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: " + a.shape_string() + " vs " + b.shape_string());
  }
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
  return a;
}

inline FeatureMap multiply(FeatureMap a, const FeatureMap& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("multiply: " + a.shape_string() + " vs " + b.shape_string());
  }
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= b.data()[i];
  return a;
}

/// Channel-wise concatenation of maps with identical spatial size.
inline FeatureMap concat_channels(std::span<const FeatureMap* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t h = parts.front()->height();
  const std::size_t w = parts.front()->width();
  std::size_t total = 0;
  for (const FeatureMap* p : parts) {
    if (!p->same_spatial(h, w)) {
      throw ShapeError("concat_channels: spatial size mismatch " + p->shape_string());
    }
    total += p->channels();
  }
  FeatureMap out(h, w, total);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      auto dst = out.pixel(r, c).begin();
      for (const FeatureMap* p : parts) {
        const auto src = p->pixel(r, c);
        dst = std::copy(src.begin(), src.end(), dst);
      }
    }
  }
  return out;
}

inline FeatureMap concat_channels(std::initializer_list<const FeatureMap*> parts) {
  return concat_channels(std::span<const FeatureMap* const>(parts.begin(), parts.size()));
}

}  // namespace cvloc
