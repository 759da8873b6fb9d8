#pragma once

// Dense flow fields and the CVFL file:
//   "CVFL" | u16 version=1 | u32 H | u32 W | per cell 4 x f32: fx, fy, score, visibility

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "cvloc/detail/binary.hpp"
#include "cvloc/tensor.hpp"

namespace cvloc {

/// Per-cell displacement, confidence in [0, 1] and visibility. A cell p'
/// corresponds to the target point p' + flow(p').
class FlowField {
 public:
  FlowField() = default;
  FlowField(std::size_t height, std::size_t width, Mask visibility)
      : height_(height), width_(width), flow_(height * width, Vec2::Zero()),
        score_(height * width, 0.5), visibility_(std::move(visibility)) {
    if (visibility_.height() != height || visibility_.width() != width) {
      throw ShapeError("flow field: visibility mask shape mismatch");
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t cells() const noexcept { return flow_.size(); }

  Vec2& flow(std::size_t r, std::size_t c) { return flow_[r * width_ + c]; }
  const Vec2& flow(std::size_t r, std::size_t c) const { return flow_[r * width_ + c]; }

  double& score(std::size_t r, std::size_t c) { return score_[r * width_ + c]; }
  double score(std::size_t r, std::size_t c) const { return score_[r * width_ + c]; }

  bool visible(std::size_t r, std::size_t c) const { return visibility_(r, c); }
  void set_visible(std::size_t r, std::size_t c, bool v) { visibility_.set(r, c, v); }
  const Mask& visibility() const noexcept { return visibility_; }

  bool same_shape(const FlowField& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_;
  }

  /// Target-frame coordinates p' + flow for every cell.
  CoordGrid target_coords() const {
    CoordGrid g(height_, width_);
    for (std::size_t r = 0; r < height_; ++r)
      for (std::size_t c = 0; c < width_; ++c)
        g(r, c) = Vec2(static_cast<double>(c), static_cast<double>(r)) + flow(r, c);
    return g;
  }

  friend bool operator==(const FlowField& a, const FlowField& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.flow_ == b.flow_ &&
           a.score_ == b.score_ && a.visibility_ == b.visibility_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Vec2> flow_;
  std::vector<double> score_;
  Mask visibility_;
};

struct FlowTrace {
  std::vector<FlowField> iterations;

  const FlowField& final() const { return iterations.back(); }
  std::size_t size() const { return iterations.size(); }
};

inline std::string encode_flow(const FlowField& f) {
  detail::ByteWriter w;
  w.bytes("CVFL");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(f.height()));
  w.u32(static_cast<std::uint32_t>(f.width()));
  for (std::size_t r = 0; r < f.height(); ++r) {
    for (std::size_t c = 0; c < f.width(); ++c) {
      w.f32(static_cast<float>(f.flow(r, c).x()));
      w.f32(static_cast<float>(f.flow(r, c).y()));
      w.f32(static_cast<float>(f.score(r, c)));
      w.f32(f.visible(r, c) ? 1.0f : 0.0f);
    }
  }
  return w.buffer();
}

inline FlowField decode_flow(std::string_view bytes, const std::string& context = "CVFL") {
  detail::ByteReader r(bytes, context);
  r.expect_magic("CVFL");
  r.expect_version(1);
  const std::size_t dims_at = r.offset();
  const std::size_t h = r.u32();
  const std::size_t w = r.u32();
  if (h == 0 || w == 0) r.fail("zero dimension", dims_at);
  if (h * w > r.remaining() / 16) r.fail("truncated flow data", r.offset());
  FlowField f(h, w, Mask(h, w, 0));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t at = r.offset();
      const double fx = r.f32();
      const double fy = r.f32();
      const double s = r.f32();
      const float vis = r.f32();
      if (vis != 0.0f && vis != 1.0f) r.fail("visibility must be 0 or 1", at + 12);
      if (!(s >= 0.0 && s <= 1.0)) r.fail("score outside [0, 1]", at + 8);
      if (vis == 1.0f && !(std::isfinite(fx) && std::isfinite(fy))) {
        r.fail("non-finite flow on a visible cell", at);
      }
      f.flow(y, x) = Vec2(fx, fy);
      f.score(y, x) = s;
      f.set_visible(y, x, vis == 1.0f);
    }
  }
  r.expect_end();
  return f;
}

inline FlowField load_flow(const std::string& path) {
  return decode_flow(detail::read_file(path), path);
}

inline void save_flow(const FlowField& f, const std::string& path) {
  detail::write_file(path, encode_flow(f));
}

}  // namespace cvloc
