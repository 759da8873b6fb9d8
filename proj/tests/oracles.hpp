#pragma once

// Naive reference implementations. Written from the definitions with plain
// loops and no shared code with the library kernels.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cvloc/correlation.hpp"
#include "cvloc/geometry.hpp"
#include "cvloc/pose_solver.hpp"
#include "cvloc/tensor.hpp"

namespace oracle {

using cvloc::ConvKernel;
using cvloc::CoordGrid;
using cvloc::FeatureMap;
using cvloc::Vec2;

inline FeatureMap random_map(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c,
                             double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  FeatureMap m(h, w, c);
  for (double& v : m.data()) v = u(rng);
  return m;
}

inline ConvKernel random_kernel(std::mt19937_64& rng, std::size_t k, std::size_t cin,
                                std::size_t cout, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  ConvKernel ker(k, cin, cout);
  for (double& v : ker.values) v = u(rng);
  return ker;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline FeatureMap conv2d(const FeatureMap& in, const ConvKernel& k, std::size_t stride,
                         std::size_t pad, const std::vector<double>& bias = {}) {
  const long oh = (static_cast<long>(in.height()) + 2 * static_cast<long>(pad) -
                   static_cast<long>(k.size)) / static_cast<long>(stride) + 1;
  const long ow = (static_cast<long>(in.width()) + 2 * static_cast<long>(pad) -
                   static_cast<long>(k.size)) / static_cast<long>(stride) + 1;
  FeatureMap out(static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k.out_channels);
  for (long r = 0; r < oh; ++r)
    for (long c = 0; c < ow; ++c)
      for (std::size_t co = 0; co < k.out_channels; ++co) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (std::size_t ky = 0; ky < k.size; ++ky)
          for (std::size_t kx = 0; kx < k.size; ++kx)
            for (std::size_t ci = 0; ci < k.in_channels; ++ci) {
              const long y = r * static_cast<long>(stride) + static_cast<long>(ky) - static_cast<long>(pad);
              const long x = c * static_cast<long>(stride) + static_cast<long>(kx) - static_cast<long>(pad);
              if (y < 0 || x < 0 || y >= static_cast<long>(in.height()) ||
                  x >= static_cast<long>(in.width()))
                continue;
              acc += in(static_cast<std::size_t>(y), static_cast<std::size_t>(x), ci) *
                     k.values[((ky * k.size + kx) * k.in_channels + ci) * k.out_channels + co];
            }
        out(static_cast<std::size_t>(r), static_cast<std::size_t>(c), co) = acc;
      }
  return out;
}

inline FeatureMap conv_same(const FeatureMap& in, const cvloc::ConvLayer& l) {
  return conv2d(in, l.kernel, 1, l.kernel.size / 2, l.bias);
}

/// Block mean over even-sized maps.
inline FeatureMap block_mean(const FeatureMap& in) {
  FeatureMap out(in.height() / 2, in.width() / 2, in.channels());
  for (std::size_t r = 0; r < out.height(); ++r)
    for (std::size_t c = 0; c < out.width(); ++c)
      for (std::size_t k = 0; k < in.channels(); ++k)
        out(r, c, k) = (in(2 * r, 2 * c, k) + in(2 * r, 2 * c + 1, k) + in(2 * r + 1, 2 * c, k) +
                        in(2 * r + 1, 2 * c + 1, k)) / 4.0;
  return out;
}

/// Bilinear sample of a single value from a plane given by an accessor.
template <typename At>
double bilinear(At at, std::size_t h, std::size_t w, double x, double y, bool* ok = nullptr) {
  const bool inside = x >= 0.0 && y >= 0.0 && x <= double(w) - 1.0 && y <= double(h) - 1.0;
  if (ok) *ok = inside;
  if (!inside) return 0.0;
  const long x0 = static_cast<long>(std::floor(x));
  const long y0 = static_cast<long>(std::floor(y));
  const double ax = x - double(x0);
  const double ay = y - double(y0);
  double s = 0.0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
      if (wgt == 0.0) continue;  // neighbour past the last lattice line
      s += wgt * at(static_cast<std::size_t>(y0 + dy), static_cast<std::size_t>(x0 + dx));
    }
  return s;
}

inline FeatureMap bilinear_sample(const FeatureMap& in, const CoordGrid& g, cvloc::Mask* valid) {
  FeatureMap out(g.height(), g.width(), in.channels());
  *valid = cvloc::Mask(g.height(), g.width(), 0);
  for (std::size_t r = 0; r < g.height(); ++r)
    for (std::size_t c = 0; c < g.width(); ++c)
      for (std::size_t k = 0; k < in.channels(); ++k) {
        bool ok = false;
        out(r, c, k) = bilinear([&](std::size_t y, std::size_t x) { return in(y, x, k); },
                                in.height(), in.width(), g(r, c).x(), g(r, c).y(), &ok);
        valid->set(r, c, ok);
      }
  return out;
}

inline cvloc::CorrelationVolume correlation(const FeatureMap& a, const FeatureMap& b) {
  cvloc::CorrelationVolume v(a.height(), a.width(), b.height(), b.width());
  const double n = std::sqrt(double(a.channels()));
  for (std::size_t i = 0; i < a.height(); ++i)
    for (std::size_t j = 0; j < a.width(); ++j)
      for (std::size_t k = 0; k < b.height(); ++k)
        for (std::size_t l = 0; l < b.width(); ++l) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < a.channels(); ++ch) s += a(i, j, ch) * b(k, l, ch);
          v(i, j, k, l) = s / n;
        }
  return v;
}

/// 2x2 block mean over the target dimensions; odd sizes repeat the last
/// row/column.
inline cvloc::CorrelationVolume pool_volume(const cvloc::CorrelationVolume& v) {
  const std::size_t h = v.dst_height(), w = v.dst_width();
  cvloc::CorrelationVolume o(v.src_height(), v.src_width(), (h + 1) / 2, (w + 1) / 2);
  for (std::size_t i = 0; i < v.src_height(); ++i)
    for (std::size_t j = 0; j < v.src_width(); ++j)
      for (std::size_t k = 0; k < o.dst_height(); ++k)
        for (std::size_t l = 0; l < o.dst_width(); ++l) {
          const std::size_t k1 = std::min(2 * k + 1, h - 1), l1 = std::min(2 * l + 1, w - 1);
          o(i, j, k, l) = (v(i, j, 2 * k, 2 * l) + v(i, j, 2 * k, l1) + v(i, j, k1, 2 * l) +
                           v(i, j, k1, l1)) / 4.0;
        }
  return o;
}

inline FeatureMap lookup(const cvloc::CorrelationPyramid& p, const CoordGrid& g, long radius) {
  const std::size_t side = static_cast<std::size_t>(2 * radius + 1);
  FeatureMap out(g.height(), g.width(), p.levels.size() * side * side);
  for (std::size_t i = 0; i < g.height(); ++i)
    for (std::size_t j = 0; j < g.width(); ++j)
      for (std::size_t k = 0; k < p.levels.size(); ++k) {
        const auto& lv = p.levels[k];
        const double s = std::pow(2.0, double(k));
        for (long dy = -radius; dy <= radius; ++dy)
          for (long dx = -radius; dx <= radius; ++dx) {
            const std::size_t ch = k * side * side + static_cast<std::size_t>(dy + radius) * side +
                                   static_cast<std::size_t>(dx + radius);
            out(i, j, ch) = bilinear(
                [&](std::size_t y, std::size_t x) { return lv(i, j, y, x); }, lv.dst_height(),
                lv.dst_width(), g(i, j).x() / s + double(dx), g(i, j).y() / s + double(dy));
          }
      }
  return out;
}

/// Direct homogeneous projection of BEV cell (c, r) through K [R | t].
inline bool project_cell(const cvloc::CameraModel& cam, const cvloc::BevGrid& g, std::size_t c,
                         std::size_t r, Vec2* uv) {
  const double X = (double(c) - g.anchor.x()) * g.meters_per_pixel;
  const double Y = g.height_m;
  const double Z = (g.anchor.y() - double(r)) * g.meters_per_pixel;
  double p[3];
  for (int a = 0; a < 3; ++a)
    p[a] = cam.rotation(a, 0) * X + cam.rotation(a, 1) * Y + cam.rotation(a, 2) * Z +
           cam.translation(a);
  if (p[2] <= 1e-12) return false;
  const double u = (cam.fx * p[0] + cam.cx * p[2]) / p[2];
  const double v = (cam.fy * p[1] + cam.cy * p[2]) / p[2];
  *uv = Vec2(u, v);
  return u >= 0.0 && v >= 0.0 && u <= double(cam.image_w) - 1.0 && v <= double(cam.image_h) - 1.0;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Weighted SSE of a pose on a match set, every match included.
inline double weighted_sse(const cvloc::MatchSet& m, double theta, const Vec2& t) {
  double xi = 0.0;
  const double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double ex = c * m.src[i].x() - s * m.src[i].y() + t.x() - m.dst[i].x();
    const double ey = s * m.src[i].x() + c * m.src[i].y() + t.y() - m.dst[i].y();
    xi += m.weights[i] * (ex * ex + ey * ey);
  }
  return xi;
}

/// Exact planar correspondence set under a known pose.
inline cvloc::MatchSet exact_matches(std::mt19937_64& rng, std::size_t n, double theta,
                                     const Vec2& t, double extent = 500.0) {
  std::uniform_real_distribution<double> u(0.0, extent), w(0.5, 1.0);
  cvloc::MatchSet m;
  const double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p(u(rng), u(rng));
    m.add(p, Vec2(c * p.x() - s * p.y() + t.x(), s * p.x() + c * p.y() + t.y()), w(rng));
  }
  return m;
}

/// Closed-form weighted alignment in extended precision, for finite differences.
struct PoseLd {
  long double theta, tx, ty;
};

inline PoseLd solve_pose_ld(const cvloc::MatchSet& m) {
  long double w = 0, sx = 0, sy = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const long double s = m.weights[i];
    w += s;
    sx += s * m.src[i].x();
    sy += s * m.src[i].y();
    dx += s * m.dst[i].x();
    dy += s * m.dst[i].y();
  }
  sx /= w;
  sy /= w;
  dx /= w;
  dy /= w;
  long double cross = 0, dot = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const long double s = m.weights[i];
    const long double ax = m.src[i].x() - sx, ay = m.src[i].y() - sy;
    const long double bx = m.dst[i].x() - dx, by = m.dst[i].y() - dy;
    cross += s * (ax * by - ay * bx);
    dot += s * (ax * bx + ay * by);
  }
  const long double th = std::atan2(cross, dot);
  const long double c = std::cos(th), sn = std::sin(th);
  return {th, dx - (c * sx - sn * sy), dy - (sn * sx + c * sy)};
}

}  // namespace oracle
