#pragma once

// Confidence-weighted planar rigid alignment.
//
// Given matches p'_i -> p^_i with weights S_i >= 0, find (theta, t)
// minimising  sum_i S_i |R(theta) p'_i + t - p^_i|^2.
//
// Centroids are S-weighted, which makes the reduction to the rotation-only
// problem exact:  q'_i = p'_i - g',  q^_i = p^_i - g^,
// H = sum_i S_i q'_i q^_i^T,  t = g^ - R g'.
//
// Two independent routes to R:
//   solve_pose              SVD H = U L V^T, R = V diag(1, det(V U^T)) U^T
//   solve_pose_closed_form  theta = atan2(sum S (q' x q^), sum S (q' . q^))
// Matches with S = 0 are skipped entirely, so they are inert bit for bit.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "cvloc/error.hpp"
#include "cvloc/flow_field.hpp"
#include "cvloc/geometry.hpp"

namespace cvloc {

struct MatchSet {
  std::vector<Vec2> src;  // p'_i, BEV pixels
  std::vector<Vec2> dst;  // p^_i, satellite pixels
  std::vector<double> weights;

  std::size_t size() const { return src.size(); }

  void add(const Vec2& p, const Vec2& q, double s) {
    src.push_back(p);
    dst.push_back(q);
    weights.push_back(s);
  }

  void validate() const {
    if (dst.size() != src.size() || weights.size() != src.size()) {
      throw ShapeError("match set: src/dst/weights lengths differ");
    }
    for (std::size_t i = 0; i < size(); ++i) {
      if (!std::isfinite(weights[i]) || weights[i] < 0.0) {
        throw Error("match set: weight " + std::to_string(i) + " is negative or not finite");
      }
      if (weights[i] > 0.0 && !(src[i].allFinite() && dst[i].allFinite())) {
        throw Error("match set: non-finite coordinates on match " + std::to_string(i));
      }
    }
  }
};

struct SolverDiagnostics {
  Vec2 centroid_src = Vec2::Zero();
  Vec2 centroid_dst = Vec2::Zero();
  Mat2 cross_covariance = Mat2::Zero();
  Vec2 singular_values = Vec2::Zero();  // descending
  double residual = 0.0;                // weighted SSE, px^2
  bool det_correction = false;
};

struct CameraPlacement {
  Vec2 position_px = Vec2::Zero();
  Vec2 position_m = Vec2::Zero();
  double azimuth_deg = 0.0;
};

struct LocalizationResult {
  Se2Pose pose;
  CameraPlacement camera;
  SolverDiagnostics diagnostics;
};

/// Camera location and heading in the satellite frame. The camera sits at
/// the BEV anchor, so its satellite position is R * anchor + t.
inline CameraPlacement camera_pose_from_alignment(const Se2Pose& pose, const Vec2& anchor,
                                                  double mpp) {
  CameraPlacement c;
  c.position_px = pose.apply(anchor);
  c.position_m = c.position_px * mpp;
  c.azimuth_deg = rad_to_deg(wrap_angle(pose.theta));
  if (c.azimuth_deg <= -180.0) c.azimuth_deg = 180.0;
  return c;
}

inline CameraPlacement camera_pose_from_alignment(const Se2Pose& pose, const BevGrid& grid,
                                                  double mpp) {
  return camera_pose_from_alignment(pose, grid.anchor, mpp);
}

/// One match per cell: p' = (col, row), p^ = p' + flow, S = visibility * score.
inline MatchSet flow_to_matches(const FlowField& flow) {
  MatchSet m;
  m.src.reserve(flow.cells());
  m.dst.reserve(flow.cells());
  m.weights.reserve(flow.cells());
  for (std::size_t r = 0; r < flow.height(); ++r) {
    for (std::size_t c = 0; c < flow.width(); ++c) {
      const Vec2 p(static_cast<double>(c), static_cast<double>(r));
      const bool vis = flow.visible(r, c);
      m.add(p, vis ? Vec2(p + flow.flow(r, c)) : p, vis ? flow.score(r, c) : 0.0);
    }
  }
  return m;
}

inline MatchSet flow_to_matches(const FlowField& flow, const BevGrid& grid) {
  if (flow.height() != grid.size || flow.width() != grid.size) {
    throw ShapeError("flow_to_matches: flow " + std::to_string(flow.height()) + "x" +
                     std::to_string(flow.width()) + " does not match grid size " +
                     std::to_string(grid.size));
  }
  return flow_to_matches(flow);
}

namespace detail {

struct Reduced {
  double total_weight = 0.0;
  Vec2 g_src = Vec2::Zero();
  Vec2 g_dst = Vec2::Zero();
  double scale = 0.0;  // sum S |q'| |q^|, bounds |tr(R H)|
};

inline Reduced reduce_matches(const MatchSet& m) {
  m.validate();
  Reduced r;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = m.weights[i];
    if (s == 0.0) continue;
    r.total_weight += s;
    r.g_src += s * m.src[i];
    r.g_dst += s * m.dst[i];
  }
  if (!(r.total_weight > 0.0)) throw NoSupportError("solve_pose: total match weight is zero");
  r.g_src /= r.total_weight;
  r.g_dst /= r.total_weight;

  double spread = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = m.weights[i];
    if (s == 0.0) continue;
    const double a = (m.src[i] - r.g_src).norm();
    spread = std::max(spread, a);
    r.scale += s * a * (m.dst[i] - r.g_dst).norm();
  }
  if (!(spread > 1e-9)) {
    throw RotationIndeterminateError("solve_pose: source points have no spread");
  }
  return r;
}

inline double weighted_residual(const MatchSet& m, const Se2Pose& pose) {
  const Mat2 rot = pose.rotation();
  double xi = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = m.weights[i];
    if (s == 0.0) continue;
    xi += s * (rot * m.src[i] + pose.t - m.dst[i]).squaredNorm();
  }
  return xi;
}

inline constexpr double kIndeterminateRelTol = 1e-12;

}  // namespace detail

inline LocalizationResult solve_pose(const MatchSet& m, const Vec2& anchor = Vec2::Zero(),
                                     double mpp = 1.0) {
  const detail::Reduced red = detail::reduce_matches(m);
  Mat2 h = Mat2::Zero();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = m.weights[i];
    if (s == 0.0) continue;
    h += s * (m.src[i] - red.g_src) * (m.dst[i] - red.g_dst).transpose();
  }
  const Eigen::JacobiSVD<Mat2> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat2& u = svd.matrixU();
  const Mat2& v = svd.matrixV();
  const double d = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Vec2 sv = svd.singularValues();
  if (!(sv(0) + d * sv(1) > detail::kIndeterminateRelTol * red.scale)) {
    throw RotationIndeterminateError("solve_pose: cross-covariance is rotation-degenerate");
  }
  Mat2 dm = Mat2::Identity();
  dm(1, 1) = d;
  const Mat2 rot = v * dm * u.transpose();

  LocalizationResult out;
  out.pose = Se2Pose(std::atan2(rot(1, 0), rot(0, 0)), Vec2::Zero());
  out.pose.t = red.g_dst - out.pose.rotation() * red.g_src;
  out.diagnostics.centroid_src = red.g_src;
  out.diagnostics.centroid_dst = red.g_dst;
  out.diagnostics.cross_covariance = h;
  out.diagnostics.singular_values = sv;
  out.diagnostics.det_correction = d < 0.0;
  out.diagnostics.residual = detail::weighted_residual(m, out.pose);
  out.camera = camera_pose_from_alignment(out.pose, anchor, mpp);
  return out;
}

namespace detail {

struct ClosedFormSums {
  Reduced red;
  double cross = 0.0;  // sum S (q'_x q^_y - q'_y q^_x)
  double dot = 0.0;    // sum S (q' . q^)
  Mat2 h = Mat2::Zero();
};

inline ClosedFormSums closed_form_sums(const MatchSet& m) {
  ClosedFormSums cf{reduce_matches(m)};
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = m.weights[i];
    if (s == 0.0) continue;
    const Vec2 qs = m.src[i] - cf.red.g_src;
    const Vec2 qd = m.dst[i] - cf.red.g_dst;
    cf.cross += s * (qs.x() * qd.y() - qs.y() * qd.x());
    cf.dot += s * (qs.x() * qd.x() + qs.y() * qd.y());
    cf.h(0, 0) += s * qs.x() * qd.x();
    cf.h(0, 1) += s * qs.x() * qd.y();
    cf.h(1, 0) += s * qs.y() * qd.x();
    cf.h(1, 1) += s * qs.y() * qd.y();
  }
  if (!(std::hypot(cf.cross, cf.dot) > kIndeterminateRelTol * cf.red.scale)) {
    throw RotationIndeterminateError("solve_pose_closed_form: both atan2 arguments vanish");
  }
  return cf;
}

}  // namespace detail

inline LocalizationResult solve_pose_closed_form(const MatchSet& m,
                                                 const Vec2& anchor = Vec2::Zero(),
                                                 double mpp = 1.0) {
  const detail::ClosedFormSums cf = detail::closed_form_sums(m);
  LocalizationResult out;
  out.pose = Se2Pose(std::atan2(cf.cross, cf.dot), Vec2::Zero());
  out.pose.t = cf.red.g_dst - out.pose.rotation() * cf.red.g_src;

  const Mat2& h = cf.h;
  const double sum = std::hypot(h(0, 0) + h(1, 1), h(0, 1) - h(1, 0));
  const double diff = std::hypot(h(0, 0) - h(1, 1), h(0, 1) + h(1, 0));
  out.diagnostics.centroid_src = cf.red.g_src;
  out.diagnostics.centroid_dst = cf.red.g_dst;
  out.diagnostics.cross_covariance = h;
  out.diagnostics.singular_values = Vec2(0.5 * (sum + diff), 0.5 * std::abs(sum - diff));
  out.diagnostics.det_correction = h.determinant() < 0.0;
  out.diagnostics.residual = detail::weighted_residual(m, out.pose);
  out.camera = camera_pose_from_alignment(out.pose, anchor, mpp);
  return out;
}

/// d theta and d t with respect to every input of the match set.
/// `dt_dsrc[i](a, b)` is d t_a / d p'_i,b; likewise for `dt_ddst`.
struct PoseGradients {
  std::vector<Vec2> dtheta_dsrc;
  std::vector<Vec2> dtheta_ddst;
  std::vector<double> dtheta_dweight;
  std::vector<Mat2> dt_dsrc;
  std::vector<Mat2> dt_ddst;
  std::vector<Vec2> dt_dweight;
};

/// Analytic derivatives of the closed form, including the dependence of
/// the weighted centroids on every input.
inline PoseGradients pose_gradients(const MatchSet& m) {
  const detail::ClosedFormSums cf = detail::closed_form_sums(m);
  const double a = cf.cross;
  const double b = cf.dot;
  const double denom = a * a + b * b;
  if (!(denom > 1e-9)) throw ConditioningError("pose_gradients: ill-conditioned closed form");

  const double w = cf.red.total_weight;
  const Vec2& gs = cf.red.g_src;
  const Vec2& gd = cf.red.g_dst;
  const double theta = std::atan2(a, b);
  const Mat2 rot = rotation_matrix(theta);
  Mat2 drot;
  drot << -std::sin(theta), -std::cos(theta), std::cos(theta), -std::sin(theta);
  const Vec2 drot_gs = drot * gs;

  const std::size_t n = m.size();
  PoseGradients g;
  g.dtheta_dsrc.resize(n);
  g.dtheta_ddst.resize(n);
  g.dtheta_dweight.resize(n);
  g.dt_dsrc.resize(n);
  g.dt_ddst.resize(n);
  g.dt_dweight.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const double s = m.weights[i];
    const Vec2 qs = m.src[i] - gs;
    const Vec2 qd = m.dst[i] - gd;
    // Centroid terms drop out because sum S q = 0.
    const Vec2 da_dsrc = s * Vec2(qd.y(), -qd.x());
    const Vec2 db_dsrc = s * qd;
    const Vec2 da_ddst = s * Vec2(-qs.y(), qs.x());
    const Vec2 db_ddst = s * qs;
    const double da_ds = qs.x() * qd.y() - qs.y() * qd.x();
    const double db_ds = qs.dot(qd);

    g.dtheta_dsrc[i] = (b * da_dsrc - a * db_dsrc) / denom;
    g.dtheta_ddst[i] = (b * da_ddst - a * db_ddst) / denom;
    g.dtheta_dweight[i] = (b * da_ds - a * db_ds) / denom;

    // t = g^ - R g'
    g.dt_dsrc[i] = -(s / w) * rot - drot_gs * g.dtheta_dsrc[i].transpose();
    g.dt_ddst[i] = (s / w) * Mat2::Identity() - drot_gs * g.dtheta_ddst[i].transpose();
    g.dt_dweight[i] = qd / w - rot * qs / w - drot_gs * g.dtheta_dweight[i];
  }
  return g;
}

}  // namespace cvloc
