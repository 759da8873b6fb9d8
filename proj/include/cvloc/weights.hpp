#pragma once

// Named-tensor store and the CVWT weight file:
//   "CVWT" | u16 version=1 | u32 count | per tensor:
//   u16 name_len | name | u8 rank | rank x u32 dims | prod(dims) x f32
// All integers and floats little-endian; tensors are written in name order.

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "cvloc/detail/binary.hpp"
#include "cvloc/error.hpp"
#include "cvloc/tensor.hpp"

namespace cvloc {

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

class WeightStore {
 public:
  void insert(std::string name, Tensor t) {
    if (t.values.size() != t.element_count()) {
      throw ShapeError("tensor '" + name + "' holds " + std::to_string(t.values.size()) +
                       " values for dims " + dims_string(t.dims));
    }
    tensors_[std::move(name)] = std::move(t);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing weight tensor '" + name + "'");
    return it->second;
  }

  /// Lookup that fails unless the stored dims equal `expected` exactly.
  const Tensor& get(const std::string& name, const std::vector<std::uint32_t>& expected) const {
    const Tensor& t = get(name);
    if (t.dims != expected) {
      throw ShapeError("weight tensor '" + name + "' has shape " + dims_string(t.dims) +
                       ", expected " + dims_string(expected));
    }
    return t;
  }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

inline std::string encode_weights(const WeightStore& store) {
  detail::ByteWriter w;
  w.bytes("CVWT");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.tensors()) {
    if (name.size() > 0xFFFF) throw ShapeError("tensor name too long: " + name.substr(0, 32));
    if (t.dims.size() > 0xFF) throw ShapeError("tensor rank too large: '" + name + "'");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.values) w.f32(v);
  }
  return w.buffer();
}

inline WeightStore decode_weights(std::string_view bytes, const std::string& context = "CVWT") {
  detail::ByteReader r(bytes, context);
  r.expect_magic("CVWT");
  r.expect_version(1);
  const std::uint32_t count = r.u32();
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const std::uint16_t name_len = r.u16();
    std::string name(r.bytes(name_len));
    if (store.contains(name)) r.fail("duplicate tensor '" + name + "'", entry_at);
    Tensor t;
    const std::uint8_t rank = r.u8();
    t.dims.reserve(rank);
    for (std::uint8_t d = 0; d < rank; ++d) t.dims.push_back(r.u32());
    const std::size_t n = t.element_count();
    if (n > r.remaining() / 4) r.fail("truncated values for tensor '" + name + "'", r.offset());
    t.values.reserve(n);
    for (std::size_t k = 0; k < n; ++k) t.values.push_back(r.f32());
    store.insert(std::move(name), std::move(t));
  }
  r.expect_end();
  return store;
}

inline WeightStore load_weights(const std::string& path) {
  return decode_weights(detail::read_file(path), path);
}

inline void save_weights(const WeightStore& store, const std::string& path) {
  detail::write_file(path, encode_weights(store));
}

/// Reads `<prefix>.w` as a K x K x Cin x Cout kernel and `<prefix>.b`
/// (optional) as its bias. Pass 0 for a dimension to accept any size.
inline ConvLayer conv_layer(const WeightStore& store, const std::string& prefix,
                            std::size_t kernel_size, std::size_t cin, std::size_t cout) {
  const std::string wname = prefix + ".w";
  const Tensor& w = store.get(wname);
  auto fail = [&] {
    throw ShapeError("weight tensor '" + wname + "' has shape " + dims_string(w.dims) +
                     ", expected [" + (kernel_size ? std::to_string(kernel_size) : "K") + "," +
                     (kernel_size ? std::to_string(kernel_size) : "K") + "," +
                     (cin ? std::to_string(cin) : "Cin") + "," +
                     (cout ? std::to_string(cout) : "Cout") + "]");
  };
  if (w.dims.size() != 4 || w.dims[0] != w.dims[1]) fail();
  if ((kernel_size && w.dims[0] != kernel_size) || (cin && w.dims[2] != cin) ||
      (cout && w.dims[3] != cout)) {
    fail();
  }
  ConvLayer layer;
  layer.kernel = ConvKernel(w.dims[0], w.dims[2], w.dims[3]);
  std::copy(w.values.begin(), w.values.end(), layer.kernel.values.begin());
  const std::string bname = prefix + ".b";
  if (store.contains(bname)) {
    const Tensor& b = store.get(bname, {w.dims[3]});
    layer.bias.assign(b.values.begin(), b.values.end());
  }
  return layer;
}

}  // namespace cvloc
