#pragma once

// Camera model, BEV grid, planar rigid poses and the ground-plane
// projection that turns a ground-view feature map into a bird's-eye view.
//
// Frames. The world frame is camera-centred and axis-aligned with a level,
// forward-looking camera: X right, Y down (gravity), Z forward. The ground
// plane is Y = height_m. A BEV cell (col, row) sits at
//   X = (col - anchor.x) * mpp,  Z = (anchor.y - row) * mpp,
// so the camera's forward axis points toward decreasing row index.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "cvloc/error.hpp"
#include "cvloc/tensor.hpp"

namespace cvloc {

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

inline double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }

inline Mat2 rotation_matrix(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Mat2 r;
  r << c, -s, s, c;
  return r;
}

/// Planar rigid transform p -> R(theta) p + t in satellite pixels.
struct Se2Pose {
  double theta = 0.0;
  Vec2 t = Vec2::Zero();

  Se2Pose() = default;
  Se2Pose(double theta_rad, Vec2 translation) : theta(wrap_angle(theta_rad)), t(translation) {}
  Se2Pose(double theta_rad, double tu, double tv) : Se2Pose(theta_rad, Vec2(tu, tv)) {}

  Mat2 rotation() const { return rotation_matrix(theta); }

  Vec2 apply(const Vec2& p) const { return rotation() * p + t; }

  Se2Pose inverse() const {
    const Mat2 rt = rotation().transpose();
    return {-theta, -(rt * t)};
  }
};

/// (a * b)(p) = a(b(p)).
inline Se2Pose compose(const Se2Pose& a, const Se2Pose& b) {
  return {a.theta + b.theta, a.rotation() * b.t + a.t};
}

inline std::vector<Vec2> se2_apply(const Se2Pose& pose, std::span<const Vec2> points) {
  const Mat2 r = pose.rotation();
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const Vec2& p : points) out.emplace_back(r * p + pose.t);
  return out;
}

struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::size_t image_h = 1, image_w = 1;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw GeometryError("camera: fx and fy must be positive");
    if (image_h == 0 || image_w == 0) throw GeometryError("camera: image size must be >= 1");
    const double ortho = (rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho <= 1e-9)) throw GeometryError("camera: rotation is not orthonormal");
    if (!(std::abs(rotation.determinant() - 1.0) <= 1e-9)) {
      throw GeometryError("camera: rotation determinant is not +1");
    }
    if (!translation.allFinite()) throw GeometryError("camera: translation is not finite");
  }

  /// Homogeneous projection of a world point; nullopt when the depth is
  /// not positive (point on or behind the camera plane).
  std::optional<Vec2> project(const Eigen::Vector3d& world) const {
    const Eigen::Vector3d pc = rotation * world + translation;
    const double w = pc.z();
    if (!(w >= 1e-12)) return std::nullopt;
    return Vec2(fx * pc.x() / w + cx, fy * pc.y() / w + cy);
  }
};

struct BevGrid {
  std::size_t size = 64;
  double meters_per_pixel = 0.2;
  double height_m = 1.65;
  Vec2 anchor = Vec2(32.0, 32.0);

  void validate() const {
    if (size == 0) throw GeometryError("grid: size must be >= 1");
    if (!(meters_per_pixel > 0.0)) throw GeometryError("grid: meters_per_pixel must be positive");
    if (!std::isfinite(height_m)) throw GeometryError("grid: height_m must be finite");
    const double hi = static_cast<double>(size - 1);
    if (!(anchor.x() >= 0.0 && anchor.y() >= 0.0 && anchor.x() <= hi && anchor.y() <= hi)) {
      throw GeometryError("grid: anchor lies outside the grid");
    }
  }

  Eigen::Vector3d world_point(std::size_t col, std::size_t row) const {
    return {(static_cast<double>(col) - anchor.x()) * meters_per_pixel, height_m,
            (anchor.y() - static_cast<double>(row)) * meters_per_pixel};
  }

  /// Camera forward direction in BEV/satellite pixel coordinates (theta = 0).
  static Vec2 forward() { return {0.0, -1.0}; }
};

/// Ground sampling distance presets of the public benchmarks. Camera
/// height is only known for KITTI; other presets require it explicitly.
struct DatasetPreset {
  std::string_view name;
  double meters_per_pixel;
  std::optional<double> camera_height_m;
};

inline constexpr DatasetPreset kDatasetPresets[] = {
    {"kitti", 0.2, 1.65},
    {"ford", 0.2, std::nullopt},
    {"vigor-newyork", 0.113, std::nullopt},
    {"vigor-sanfrancisco", 0.118, std::nullopt},
    {"vigor-chicago", 0.111, std::nullopt},
    {"vigor-seattle", 0.101, std::nullopt},
    {"oxford", 0.0924, std::nullopt},
};

inline std::optional<DatasetPreset> find_preset(std::string_view name) {
  for (const auto& p : kDatasetPresets)
    if (p.name == name) return p;
  return std::nullopt;
}

struct BevLookup {
  CoordGrid coords;  // ground-image pixel (u, v); NaN where invisible
  Mask visible;
};

/// Maps every BEV cell to a ground-image pixel through K [R|t] applied to
/// its point on the plane at height h.
inline BevLookup ground_to_bev_lookup(const CameraModel& camera, const BevGrid& grid) {
  camera.validate();
  grid.validate();
  BevLookup out{CoordGrid(grid.size, grid.size), Mask(grid.size, grid.size, 0)};
  const double umax = static_cast<double>(camera.image_w - 1);
  const double vmax = static_cast<double>(camera.image_h - 1);
  for (std::size_t r = 0; r < grid.size; ++r) {
    for (std::size_t c = 0; c < grid.size; ++c) {
      const auto uv = camera.project(grid.world_point(c, r));
      if (!uv) continue;
      if (!(uv->x() >= 0.0 && uv->x() <= umax && uv->y() >= 0.0 && uv->y() <= vmax)) continue;
      out.coords(r, c) = *uv;
      out.visible.set(r, c, true);
    }
  }
  return out;
}

/// Image pixel -> feature-map coordinate for a map downsampled by `stride`
/// under the pixel-centre convention.
inline double image_to_feature(double u, std::size_t stride) {
  return (u + 0.5) / static_cast<double>(stride) - 0.5;
}

struct BevProjection {
  FeatureMap features;
  Mask visible;
};

inline BevProjection project_ground_features(const FeatureMap& f_g, const CameraModel& camera,
                                             const BevGrid& grid, std::size_t stride = 8) {
  if (stride == 0) throw ShapeError("project: stride must be >= 1");
  if (f_g.height() != camera.image_h / stride || f_g.width() != camera.image_w / stride) {
    throw ShapeError("project: ground features " + f_g.shape_string() +
                     " do not match image " + std::to_string(camera.image_h) + "x" +
                     std::to_string(camera.image_w) + " at stride " + std::to_string(stride));
  }
  const BevLookup lookup = ground_to_bev_lookup(camera, grid);
  BevProjection out{FeatureMap(grid.size, grid.size, f_g.channels()),
                    Mask(grid.size, grid.size, 0)};
  for (std::size_t r = 0; r < grid.size; ++r) {
    for (std::size_t c = 0; c < grid.size; ++c) {
      if (!lookup.visible(r, c)) continue;
      const Vec2& uv = lookup.coords(r, c);
      const bool ok = sample_point(f_g, image_to_feature(uv.x(), stride),
                                   image_to_feature(uv.y(), stride), out.features.pixel(r, c));
      out.visible.set(r, c, ok);
    }
  }
  return out;
}

}  // namespace cvloc
