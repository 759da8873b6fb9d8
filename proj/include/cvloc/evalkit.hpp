#pragma once

// Localization error decomposition and recall tables. Longitudinal error is
// measured along the ground-truth heading (driving direction), lateral error
// perpendicular to it. Recalls count errors strictly below a threshold.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cvloc/error.hpp"
#include "cvloc/geometry.hpp"
#include "cvloc/pose_solver.hpp"

namespace cvloc {

struct ErrorRecord {
  std::string id;
  double location = 0.0;      // m
  double lateral = 0.0;       // m, absolute
  double longitudinal = 0.0;  // m, absolute
  double azimuth = 0.0;       // deg, absolute
};

/// Heading of the camera in the satellite pixel frame, in degrees: the
/// angle of R(theta) * forward measured from the +x axis.
inline double heading_deg(const Se2Pose& pose) {
  const Vec2 f = pose.rotation() * BevGrid::forward();
  return rad_to_deg(std::atan2(f.y(), f.x()));
}

/// Splits a position error (meters) along/across a heading (degrees from +x).
inline ErrorRecord decompose_error(const Vec2& error_m, double heading_degrees,
                                   double azimuth_error_deg = 0.0, std::string id = {}) {
  const double h = deg_to_rad(heading_degrees);
  const Vec2 along(std::cos(h), std::sin(h));
  const Vec2 across(-along.y(), along.x());
  ErrorRecord rec;
  rec.id = std::move(id);
  rec.longitudinal = std::abs(error_m.dot(along));
  rec.lateral = std::abs(error_m.dot(across));
  rec.location = std::hypot(rec.longitudinal, rec.lateral);
  rec.azimuth = std::abs(azimuth_error_deg);
  return rec;
}

inline ErrorRecord localization_errors(const Se2Pose& pred, const Se2Pose& gt,
                                       double gt_heading_deg, const Vec2& anchor, double mpp,
                                       std::string id = {}) {
  if (!(mpp > 0.0)) throw GeometryError("localization_errors: mpp must be positive");
  const Vec2 e_px = pred.apply(anchor) - gt.apply(anchor);
  const double az = rad_to_deg(std::abs(wrap_angle(pred.theta - gt.theta)));
  return decompose_error(e_px * mpp, gt_heading_deg, az, std::move(id));
}

/// Heading taken from the ground-truth pose under the BEV frame convention.
inline ErrorRecord localization_errors(const LocalizationResult& pred, const Se2Pose& gt,
                                       const BevGrid& grid, double mpp, std::string id = {}) {
  return localization_errors(pred.pose, gt, heading_deg(gt), grid.anchor, mpp, std::move(id));
}

struct RecallThresholds {
  std::array<double, 2> distance{1.0, 5.0};  // m
  std::array<double, 2> angle{1.0, 5.0};     // deg
};

struct MetricsTable {
  std::size_t count = 0;
  RecallThresholds thresholds;
  double mean_location = 0.0;
  double median_location = 0.0;
  std::array<double, 2> recall_location{};
  std::array<double, 2> recall_lateral{};
  std::array<double, 2> recall_longitudinal{};
  double mean_azimuth = 0.0;
  double median_azimuth = 0.0;
  std::array<double, 2> recall_azimuth{};
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_of(const std::vector<double>& v) {
  // Sorted summation keeps the mean independent of input order.
  std::vector<double> s(v);
  std::sort(s.begin(), s.end());
  double acc = 0.0;
  for (double x : s) acc += x;
  return acc / static_cast<double>(s.size());
}

inline double recall_below(const std::vector<double>& v, double threshold) {
  std::size_t k = 0;
  for (double x : v) k += x < threshold;
  return 100.0 * static_cast<double>(k) / static_cast<double>(v.size());
}

}  // namespace detail

inline MetricsTable aggregate(const std::vector<ErrorRecord>& records,
                              const RecallThresholds& thresholds = {}) {
  if (records.empty()) throw Error("aggregate: no error records");
  std::vector<double> loc, lat, lon, az;
  for (const auto& r : records) {
    loc.push_back(r.location);
    lat.push_back(r.lateral);
    lon.push_back(r.longitudinal);
    az.push_back(r.azimuth);
  }
  MetricsTable t;
  t.count = records.size();
  t.thresholds = thresholds;
  t.mean_location = detail::mean_of(loc);
  t.median_location = detail::median_of(loc);
  t.mean_azimuth = detail::mean_of(az);
  t.median_azimuth = detail::median_of(az);
  for (std::size_t k = 0; k < 2; ++k) {
    t.recall_location[k] = detail::recall_below(loc, thresholds.distance[k]);
    t.recall_lateral[k] = detail::recall_below(lat, thresholds.distance[k]);
    t.recall_longitudinal[k] = detail::recall_below(lon, thresholds.distance[k]);
    t.recall_azimuth[k] = detail::recall_below(az, thresholds.angle[k]);
  }
  return t;
}

/// Aligned text table: Location(m) mean/median, Lateral(%), Longitudinal(%),
/// Azimuth(deg) mean/median, Azimuth(%).
inline std::string format_table(const MetricsTable& t, const std::string& unit = "m") {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  auto thr = [&](double v) {
    std::ostringstream s;
    s << std::defaultfloat << v;
    return s.str();
  };
  const int w = 10;
  os << std::setw(2 * w) << ("Location(" + unit + ")") << std::setw(2 * w) << "Lateral(%)"
     << std::setw(2 * w) << "Longitudinal(%)" << std::setw(2 * w) << "Azimuth(deg)"
     << std::setw(2 * w) << "Azimuth(%)" << "\n";
  os << std::setw(w) << "mean" << std::setw(w) << "median";
  for (int g = 0; g < 2; ++g)
    os << std::setw(w) << ("R@" + thr(t.thresholds.distance[0]) + unit) << std::setw(w)
       << ("R@" + thr(t.thresholds.distance[1]) + unit);
  os << std::setw(w) << "mean" << std::setw(w) << "median";
  os << std::setw(w) << ("R@" + thr(t.thresholds.angle[0])) << std::setw(w)
     << ("R@" + thr(t.thresholds.angle[1])) << "\n";
  os << std::setw(w) << t.mean_location << std::setw(w) << t.median_location << std::setw(w)
     << t.recall_lateral[0] << std::setw(w) << t.recall_lateral[1] << std::setw(w)
     << t.recall_longitudinal[0] << std::setw(w) << t.recall_longitudinal[1] << std::setw(w)
     << t.mean_azimuth << std::setw(w) << t.median_azimuth << std::setw(w) << t.recall_azimuth[0]
     << std::setw(w) << t.recall_azimuth[1] << "\n";
  return os.str();
}

}  // namespace cvloc
