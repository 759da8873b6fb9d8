#pragma once

// Ground-truth flow from a pose and the three-part training objective,
// evaluated as plain values:
//
//   L = beta * L_p + sum_l (L_m^l + alpha * L_c^l)
//
// L_m  sum over jointly visible cells of |f_gt - f_pred|_1
// L_c  sum_i | S_i / (1 + exp(-d~_i / kappa)) + (1 - S_i) / (1 + exp(d~_i / kappa)) |
//      with d~ the standardised per-cell L1 flow error
// L_p  |wrap(theta_gt - theta)| + |du_gt - du| + |dv_gt - dv|
//
// Losses are sums over cells, not means.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <span>
#include <vector>

#include "cvloc/error.hpp"
#include "cvloc/flow_field.hpp"
#include "cvloc/geometry.hpp"

namespace cvloc {

/// Per visible cell p': flow = (R p' + t) - p', score 1. Cells whose target
/// leaves the [0, sat_w-1] x [0, sat_h-1] satellite map become invisible.
inline FlowField gt_flow(const Se2Pose& pose, std::size_t height, std::size_t width,
                         const Mask& visibility, std::size_t sat_h, std::size_t sat_w) {
  FlowField f(height, width, visibility);
  const Mat2 rot = pose.rotation();
  const double xmax = static_cast<double>(sat_w) - 1.0;
  const double ymax = static_cast<double>(sat_h) - 1.0;
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const Vec2 p(static_cast<double>(c), static_cast<double>(r));
      const Vec2 q = rot * p + pose.t;
      f.flow(r, c) = q - p;
      f.score(r, c) = 1.0;
      if (!(q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= xmax && q.y() <= ymax)) {
        f.set_visible(r, c, false);
      }
    }
  }
  return f;
}

inline FlowField gt_flow(const Se2Pose& pose, const BevGrid& grid, const Mask& visibility,
                         std::size_t sat_h, std::size_t sat_w) {
  return gt_flow(pose, grid.size, grid.size, visibility, sat_h, sat_w);
}

inline void require_congruent(const FlowField& a, const FlowField& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": flow fields differ in shape");
  }
}

inline double matching_loss(const FlowField& pred, const FlowField& gt) {
  require_congruent(pred, gt, "matching_loss");
  double loss = 0.0;
  for (std::size_t r = 0; r < gt.height(); ++r) {
    for (std::size_t c = 0; c < gt.width(); ++c) {
      if (!(pred.visible(r, c) && gt.visible(r, c))) continue;
      const Vec2 d = gt.flow(r, c) - pred.flow(r, c);
      loss += std::abs(d.x()) + std::abs(d.y());
    }
  }
  return loss;
}

inline constexpr double kStdFloor = 1e-8;

/// Standardised confidence loss over the cells with `visible[i]` set.
inline double confidence_loss(std::span<const double> scores, std::span<const double> distances,
                              std::span<const std::uint8_t> visible, double kappa) {
  if (scores.size() != distances.size() || visible.size() != scores.size()) {
    throw ShapeError("confidence_loss: scores, distances and visibility differ in length");
  }
  if (!(kappa > 0.0)) throw Error("confidence_loss: kappa must be positive");
  std::size_t n = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!visible[i]) continue;
    ++n;
    sum += distances[i];
  }
  if (n < 2) throw DegenerateError("confidence_loss: needs at least two visible cells");
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!visible[i]) continue;
    const double d = distances[i] - mean;
    var += d * d;
  }
  const double sd = std::max(std::sqrt(var / static_cast<double>(n)), kStdFloor);

  double loss = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!visible[i]) continue;
    const double dt = (distances[i] - mean) / sd;
    const double s = scores[i];
    // s * sig(x) + (1 - s) * sig(-x), rearranged so x = 0 gives exactly 1/2.
    const double pos = 1.0 / (1.0 + std::exp(-dt / kappa));
    const double neg = 1.0 / (1.0 + std::exp(dt / kappa));
    loss += std::abs(neg + s * (pos - neg));
  }
  return loss;
}

inline double confidence_loss(std::span<const double> scores, std::span<const double> distances,
                              double kappa) {
  const std::vector<std::uint8_t> all(scores.size(), 1);
  return confidence_loss(scores, distances, all, kappa);
}

inline double position_loss(const Se2Pose& pred, const Se2Pose& gt) {
  return std::abs(wrap_angle(gt.theta - pred.theta)) + std::abs(gt.t.x() - pred.t.x()) +
         std::abs(gt.t.y() - pred.t.y());
}

/// Loss weights keyed by training epoch (0-based count of completed epochs).
struct TrainSchedule {
  double alpha = 100.0;
  double kappa_initial = 200.0;
  double kappa_final = 20.0;
  double beta_initial = 1.0;
  double beta_final = 10.0;
  std::size_t switch_epoch = 15;

  double kappa(std::size_t epoch) const { return epoch < switch_epoch ? kappa_initial : kappa_final; }
  double beta(std::size_t epoch) const { return epoch < switch_epoch ? beta_initial : beta_final; }
};

struct IterationLoss {
  double matching = 0.0;
  double confidence = 0.0;
};

struct LossReport {
  std::vector<IterationLoss> iterations;
  double position = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double kappa = 0.0;
};

/// Confidence term of one iterate: distances are per-cell L1 flow errors,
/// taken over cells visible in both the iterate and the ground truth.
inline double iteration_confidence_loss(const FlowField& pred, const FlowField& gt, double kappa) {
  require_congruent(pred, gt, "confidence_loss");
  std::vector<double> scores, dist;
  std::vector<std::uint8_t> vis;
  scores.reserve(gt.cells());
  dist.reserve(gt.cells());
  vis.reserve(gt.cells());
  for (std::size_t r = 0; r < gt.height(); ++r) {
    for (std::size_t c = 0; c < gt.width(); ++c) {
      const bool v = pred.visible(r, c) && gt.visible(r, c);
      const Vec2 d = gt.flow(r, c) - pred.flow(r, c);
      scores.push_back(pred.score(r, c));
      dist.push_back(v ? std::abs(d.x()) + std::abs(d.y()) : 0.0);
      vis.push_back(v ? 1 : 0);
    }
  }
  return confidence_loss(scores, dist, vis, kappa);
}

inline LossReport total_loss(const FlowTrace& trace, const FlowField& gt, const Se2Pose& pose_pred,
                             const Se2Pose& pose_gt, const TrainSchedule& sched,
                             std::size_t epoch) {
  if (trace.iterations.empty()) throw Error("total_loss: empty flow trace");
  LossReport rep;
  rep.alpha = sched.alpha;
  rep.beta = sched.beta(epoch);
  rep.kappa = sched.kappa(epoch);
  double flow_terms = 0.0;
  for (const FlowField& it : trace.iterations) {
    IterationLoss l{matching_loss(it, gt), iteration_confidence_loss(it, gt, rep.kappa)};
    flow_terms += l.matching + rep.alpha * l.confidence;
    rep.iterations.push_back(l);
  }
  rep.position = position_loss(pose_pred, pose_gt);
  rep.total = rep.beta * rep.position + flow_terms;
  return rep;
}

}  // namespace cvloc
