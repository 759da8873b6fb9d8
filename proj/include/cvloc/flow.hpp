#pragma once

// Iterative dense flow between the refined BEV map (source) and the
// satellite map (target). Two update operators share one contract:
//
//  * argmax: weight-free baseline. Global level-0 argmax per source cell,
//    sub-pixel refinement by a quadratic fit on the 3x3 neighbourhood, and
//    a softmax peak mass as the score.
//  * gru: convolutional GRU driven by pyramid lookups, with flow and score
//    heads. Shapes are read from the weight file.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cvloc/correlation.hpp"
#include "cvloc/flow_field.hpp"
#include "cvloc/tensor.hpp"
#include "cvloc/weights.hpp"

namespace cvloc {

inline constexpr std::size_t kDefaultFlowIterations = 12;

inline FlowField init_flow(std::size_t height, std::size_t width, const Mask& visibility) {
  return FlowField(height, width, visibility);
}

struct ArgmaxMatch {
  Vec2 target = Vec2::Zero();  // sub-pixel (x, y) in the level-0 target frame
  double score = 0.0;
};

namespace detail {

/// Sub-pixel offset of the peak (kx, ky) on a row-major h x w plane.
inline Vec2 refine_peak(const double* plane, std::size_t h, std::size_t w, std::size_t kx,
                        std::size_t ky) {
  auto at = [&](std::size_t x, std::size_t y) { return plane[y * w + x]; };
  auto parabola = [](double lo, double mid, double hi) {
    const double curv = lo - 2.0 * mid + hi;
    if (!(curv < 0.0)) return 0.0;
    return std::clamp(0.5 * (lo - hi) / curv, -0.5, 0.5);
  };
  const bool x_ok = kx > 0 && kx + 1 < w;
  const bool y_ok = ky > 0 && ky + 1 < h;
  if (x_ok && y_ok) {
    // Least-squares quadratic a + bx + cy + dx^2 + exy + fy^2 over the 3x3 patch.
    double v[3][3];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) v[dy + 1][dx + 1] = at(kx + dx, ky + dy);
    const double b = ((v[0][2] + v[1][2] + v[2][2]) - (v[0][0] + v[1][0] + v[2][0])) / 6.0;
    const double c = ((v[2][0] + v[2][1] + v[2][2]) - (v[0][0] + v[0][1] + v[0][2])) / 6.0;
    const double d = (v[0][0] + v[1][0] + v[2][0] + v[0][2] + v[1][2] + v[2][2]) / 6.0 -
                     (v[0][1] + v[1][1] + v[2][1]) / 3.0;
    const double f = (v[0][0] + v[0][1] + v[0][2] + v[2][0] + v[2][1] + v[2][2]) / 6.0 -
                     (v[1][0] + v[1][1] + v[1][2]) / 3.0;
    const double e = (v[2][2] + v[0][0] - v[0][2] - v[2][0]) / 4.0;
    const double det = 4.0 * d * f - e * e;
    if (d < 0.0 && det > 0.0) {
      const double ox = (-b * 2.0 * f + c * e) / det;
      const double oy = (-c * 2.0 * d + b * e) / det;
      if (std::abs(ox) <= 0.5 && std::abs(oy) <= 0.5) return {ox, oy};
    }
  }
  Vec2 off = Vec2::Zero();
  if (x_ok) off.x() = parabola(at(kx - 1, ky), at(kx, ky), at(kx + 1, ky));
  if (y_ok) off.y() = parabola(at(kx, ky - 1), at(kx, ky), at(kx, ky + 1));
  return off;
}

}  // namespace detail

/// Best level-0 match for source cell (i, j).
inline ArgmaxMatch argmax_match(const CorrelationVolume& vol, std::size_t i, std::size_t j,
                                double temperature) {
  const auto plane = vol.plane(i, j);
  std::size_t best = 0;
  double vmax = plane[0];
  for (std::size_t n = 1; n < plane.size(); ++n) {
    if (plane[n] > vmax) {
      vmax = plane[n];
      best = n;
    }
  }
  const double inv_t = 1.0 / temperature;
  double denom = 0.0;
  for (double v : plane) denom += std::exp((v - vmax) * inv_t);

  const std::size_t kx = best % vol.dst_width();
  const std::size_t ky = best / vol.dst_width();
  const Vec2 off = detail::refine_peak(plane.data(), vol.dst_height(), vol.dst_width(), kx, ky);
  return {Vec2(static_cast<double>(kx), static_cast<double>(ky)) + off,
          std::clamp(1.0 / denom, 0.0, 1.0)};
}

/// The argmax operator does not depend on the current flow, so its
/// per-cell matches are computed once per pyramid and re-applied on every
/// iteration.
class ArgmaxMatcher {
 public:
  ArgmaxMatcher(const CorrelationPyramid& pyr, const Mask& visibility, double temperature)
      : height_(pyr.src_height()),
        width_(pyr.src_width()),
        matches_(height_ * width_,
                 ArgmaxMatch{Vec2::Constant(std::numeric_limits<double>::quiet_NaN()), 0.0}) {
    if (!(temperature > 0.0)) throw ShapeError("argmax: temperature must be positive");
    if (visibility.height() != height_ || visibility.width() != width_) {
      throw ShapeError("argmax: visibility does not match the pyramid source shape");
    }
    for (std::size_t i = 0; i < height_; ++i)
      for (std::size_t j = 0; j < width_; ++j)
        if (visibility(i, j)) matches_[i * width_ + j] = argmax_match(pyr.levels[0], i, j, temperature);
  }

  FlowField apply(FlowField flow) const {
    if (flow.height() != height_ || flow.width() != width_) {
      throw ShapeError("argmax: flow field does not match the pyramid source shape");
    }
    for (std::size_t i = 0; i < height_; ++i) {
      for (std::size_t j = 0; j < width_; ++j) {
        if (!flow.visible(i, j)) continue;
        const ArgmaxMatch& m = matches_[i * width_ + j];
        if (!m.target.allFinite()) continue;  // visible in flow but not when matched
        flow.flow(i, j) = m.target - Vec2(static_cast<double>(j), static_cast<double>(i));
        flow.score(i, j) = m.score;
      }
    }
    return flow;
  }

 private:
  std::size_t height_, width_;
  std::vector<ArgmaxMatch> matches_;
};

inline FlowField argmax_update(const CorrelationPyramid& pyr, const FlowField& flow,
                               double temperature = 1.0) {
  return ArgmaxMatcher(pyr, flow.visibility(), temperature).apply(flow);
}

/// Convolutional GRU parameters:
///   gru.convz / gru.convr / gru.convh : K x K x (Ch + Cx) x Ch
///   head.flow : K x K x Ch x 2,  head.score : K x K x Ch x 1
/// with Cx = levels * (2r+1)^2 + 2 + context channels.
struct GruWeights {
  ConvLayer convz, convr, convh, head_flow, head_score;

  std::size_t hidden_channels() const { return convz.kernel.out_channels; }
  std::size_t input_channels() const { return convz.kernel.in_channels - hidden_channels(); }

  static GruWeights from_store(const WeightStore& store) {
    GruWeights w;
    w.convz = conv_layer(store, "gru.convz", 0, 0, 0);
    const std::size_t ch = w.convz.kernel.out_channels;
    const std::size_t cin = w.convz.kernel.in_channels;
    if (cin <= ch) throw ShapeError("weight tensor 'gru.convz.w' has no room for input channels");
    w.convr = conv_layer(store, "gru.convr", 0, cin, ch);
    w.convh = conv_layer(store, "gru.convh", 0, cin, ch);
    w.head_flow = conv_layer(store, "head.flow", 0, ch, 2);
    w.head_score = conv_layer(store, "head.score", 0, ch, 1);
    for (const auto* l : {&w.convz, &w.convr, &w.convh, &w.head_flow, &w.head_score}) {
      if (l->kernel.size % 2 == 0) throw ShapeError("GRU kernels must have odd size");
    }
    return w;
  }
};

struct GruStep {
  FlowField flow;
  FeatureMap hidden;
};

inline GruStep gru_update(const CorrelationPyramid& pyr, const FlowField& flow,
                          const FeatureMap& hidden, const FeatureMap* context,
                          const GruWeights& w, std::size_t radius = kDefaultLookupRadius) {
  const std::size_t h = pyr.src_height();
  const std::size_t wd = pyr.src_width();
  if (flow.height() != h || flow.width() != wd) {
    throw ShapeError("gru_update: flow field does not match the pyramid source shape");
  }
  if (!hidden.same_spatial(h, wd) || hidden.channels() != w.hidden_channels()) {
    throw ShapeError("gru_update: hidden state " + hidden.shape_string() + " does not match " +
                     std::to_string(h) + "x" + std::to_string(wd) + "x" +
                     std::to_string(w.hidden_channels()));
  }
  const std::size_t ctx_ch = context ? context->channels() : 0;
  if (context && !context->same_spatial(h, wd)) {
    throw ShapeError("gru_update: context map " + context->shape_string() + " has wrong size");
  }
  const std::size_t expected_x = lookup_channels(pyr.num_levels(), radius) + 2 + ctx_ch;
  if (w.input_channels() != expected_x) {
    throw ShapeError("weight tensor 'gru.convz.w' expects " + std::to_string(w.input_channels()) +
                     " input channels besides the hidden state, lookup/flow/context provide " +
                     std::to_string(expected_x));
  }

  const FeatureMap corr = lookup(pyr, flow.target_coords(), radius);
  FeatureMap flow_map(h, wd, 2);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < wd; ++c) {
      const Vec2& f = flow.flow(r, c);
      flow_map(r, c, 0) = std::isfinite(f.x()) ? f.x() : 0.0;
      flow_map(r, c, 1) = std::isfinite(f.y()) ? f.y() : 0.0;
    }
  }
  const FeatureMap x = context ? concat_channels({&corr, &flow_map, context})
                               : concat_channels({&corr, &flow_map});
  const FeatureMap hx = concat_channels({&hidden, &x});
  const FeatureMap z = sigmoid(conv2d_same(hx, w.convz));
  const FeatureMap rgate = sigmoid(conv2d_same(hx, w.convr));
  const FeatureMap rh = multiply(rgate, hidden);
  const FeatureMap h_cand = tanh(conv2d_same(concat_channels({&rh, &x}), w.convh));

  FeatureMap h_next = hidden;
  for (std::size_t n = 0; n < h_next.size(); ++n) {
    const double zn = z.data()[n];
    h_next.data()[n] = (1.0 - zn) * hidden.data()[n] + zn * h_cand.data()[n];
  }
  const FeatureMap delta = conv2d_same(h_next, w.head_flow);
  const FeatureMap score = sigmoid(conv2d_same(h_next, w.head_score));

  GruStep out{flow, std::move(h_next)};
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < wd; ++c) {
      if (!out.flow.visible(r, c)) continue;
      out.flow.flow(r, c) += Vec2(delta(r, c, 0), delta(r, c, 1));
      out.flow.score(r, c) = std::clamp(score(r, c, 0), 0.0, 1.0);
    }
  }
  return out;
}

inline GruStep gru_update(const CorrelationPyramid& pyr, const FlowField& flow,
                          const FeatureMap& hidden, const FeatureMap* context,
                          const WeightStore& store, std::size_t radius = kDefaultLookupRadius) {
  return gru_update(pyr, flow, hidden, context, GruWeights::from_store(store), radius);
}

struct ArgmaxOperator {
  double temperature = 1.0;
};

struct GruOperator {
  const WeightStore* weights = nullptr;
  const FeatureMap* context = nullptr;  // optional
  std::size_t radius = kDefaultLookupRadius;
};

using FlowOperator = std::variant<ArgmaxOperator, GruOperator>;

/// Builds the pyramid once and runs `iters` updates from the zero flow,
/// recording every iterate.
inline FlowTrace estimate_flow(const FeatureMap& f_g2s, const FeatureMap& f_s,
                               const FlowOperator& op, std::size_t iters, const Mask& visibility,
                               std::size_t levels = kDefaultPyramidLevels) {
  if (iters < 1) throw ShapeError("estimate_flow: iters must be >= 1");
  if (visibility.height() != f_g2s.height() || visibility.width() != f_g2s.width()) {
    throw ShapeError("estimate_flow: visibility does not match the source map");
  }
  const CorrelationPyramid pyr = build_pyramid(f_g2s, f_s, levels);
  FlowTrace trace;
  trace.iterations.reserve(iters);
  FlowField flow = init_flow(f_g2s.height(), f_g2s.width(), visibility);

  if (const auto* am = std::get_if<ArgmaxOperator>(&op)) {
    const ArgmaxMatcher matcher(pyr, visibility, am->temperature);
    for (std::size_t k = 0; k < iters; ++k) {
      flow = matcher.apply(std::move(flow));
      trace.iterations.push_back(flow);
    }
    return trace;
  }

  const auto& gop = std::get<GruOperator>(op);
  if (!gop.weights) throw ShapeError("estimate_flow: GRU operator needs a weight store");
  const GruWeights w = GruWeights::from_store(*gop.weights);
  FeatureMap hidden(f_g2s.height(), f_g2s.width(), w.hidden_channels());
  for (std::size_t k = 0; k < iters; ++k) {
    GruStep step = gru_update(pyr, flow, hidden, gop.context, w, gop.radius);
    flow = std::move(step.flow);
    hidden = std::move(step.hidden);
    trace.iterations.push_back(flow);
  }
  return trace;
}

}  // namespace cvloc
