#pragma once

// CVFM feature-map file:
//   "CVFM" | u16 version=1 | u32 H | u32 W | u32 C | H*W*C x f32 (row, col, channel)
// Values are narrowed to float32 on save.

#include <cmath>
#include <string>
#include <string_view>

#include "cvloc/detail/binary.hpp"
#include "cvloc/tensor.hpp"

namespace cvloc {

inline std::string encode_feature_map(const FeatureMap& m) {
  detail::ByteWriter w;
  w.bytes("CVFM");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(m.height()));
  w.u32(static_cast<std::uint32_t>(m.width()));
  w.u32(static_cast<std::uint32_t>(m.channels()));
  for (double v : m.data()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline FeatureMap decode_feature_map(std::string_view bytes, const std::string& context = "CVFM") {
  detail::ByteReader r(bytes, context);
  r.expect_magic("CVFM");
  r.expect_version(1);
  const std::size_t dims_at = r.offset();
  const std::size_t h = r.u32();
  const std::size_t w = r.u32();
  const std::size_t c = r.u32();
  if (h == 0 || w == 0 || c == 0) r.fail("zero dimension", dims_at);
  const std::size_t n = h * w * c;
  if (n / c / w != h || n > r.remaining() / 4) r.fail("truncated feature data", r.offset());
  std::vector<double> data;
  data.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const double v = r.f32();
    if (!std::isfinite(v)) r.fail("non-finite value", at);
    data.push_back(v);
  }
  r.expect_end();
  return FeatureMap(h, w, c, std::move(data));
}

inline FeatureMap load_feature_map(const std::string& path) {
  return decode_feature_map(detail::read_file(path), path);
}

inline void save_feature_map(const FeatureMap& m, const std::string& path) {
  detail::write_file(path, encode_feature_map(m));
}

// Masks travel as single-channel CVFM files holding 0.0 / 1.0.

inline FeatureMap mask_to_map(const Mask& m) {
  FeatureMap out(m.height(), m.width(), 1);
  for (std::size_t r = 0; r < m.height(); ++r)
    for (std::size_t c = 0; c < m.width(); ++c) out(r, c, 0) = m(r, c) ? 1.0 : 0.0;
  return out;
}

inline Mask map_to_mask(const FeatureMap& m) {
  if (m.channels() != 1) throw ShapeError("mask map must have one channel, got " + m.shape_string());
  Mask out(m.height(), m.width(), 0);
  for (std::size_t r = 0; r < m.height(); ++r)
    for (std::size_t c = 0; c < m.width(); ++c) out.set(r, c, m(r, c, 0) > 0.5);
  return out;
}

}  // namespace cvloc
