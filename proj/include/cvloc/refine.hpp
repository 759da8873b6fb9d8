#pragma once

// BEV refinement block: 7x7 conv -> 3x3 residual block -> 1x1 conv, all
// same-padded so the grid size is preserved.
//
//   y1  = relu(conv7(x))
//   y2  = y1 + conv_b(relu(conv_a(y1)))
//   out = conv1(relu(y2))

#include <string>

#include "cvloc/tensor.hpp"
#include "cvloc/weights.hpp"

namespace cvloc {

struct RefineWeights {
  ConvLayer conv7;
  ConvLayer res3a;
  ConvLayer res3b;
  ConvLayer conv1;

  std::size_t channels() const { return conv7.kernel.in_channels; }

  /// All-zero weights (with zero biases) for channel count `c`.
  static RefineWeights zeros(std::size_t c) {
    auto layer = [c](std::size_t k) { return ConvLayer{ConvKernel(k, c, c), std::vector<double>(c, 0.0)}; };
    return {layer(7), layer(3), layer(3), layer(1)};
  }

  /// Reads refine.{conv7,res3a,res3b,conv1}.{w,b}; C is taken from conv7.
  static RefineWeights from_store(const WeightStore& store) {
    RefineWeights w;
    w.conv7 = conv_layer(store, "refine.conv7", 7, 0, 0);
    const std::size_t c = w.conv7.kernel.in_channels;
    if (w.conv7.kernel.out_channels != c) {
      throw ShapeError("weight tensor 'refine.conv7.w' must map C -> C channels");
    }
    w.res3a = conv_layer(store, "refine.res3a", 3, c, c);
    w.res3b = conv_layer(store, "refine.res3b", 3, c, c);
    w.conv1 = conv_layer(store, "refine.conv1", 1, c, c);
    return w;
  }

  void store_into(WeightStore& store) const {
    auto put = [&store](const std::string& prefix, const ConvLayer& l) {
      const auto& k = l.kernel;
      Tensor w{{static_cast<std::uint32_t>(k.size), static_cast<std::uint32_t>(k.size),
                static_cast<std::uint32_t>(k.in_channels), static_cast<std::uint32_t>(k.out_channels)},
               std::vector<float>(k.values.begin(), k.values.end())};
      store.insert(prefix + ".w", std::move(w));
      if (!l.bias.empty()) {
        store.insert(prefix + ".b", Tensor{{static_cast<std::uint32_t>(l.bias.size())},
                                           std::vector<float>(l.bias.begin(), l.bias.end())});
      }
    };
    put("refine.conv7", conv7);
    put("refine.res3a", res3a);
    put("refine.res3b", res3b);
    put("refine.conv1", conv1);
  }
};

inline FeatureMap refine_block(const FeatureMap& f_bev, const RefineWeights& w) {
  if (f_bev.channels() != w.channels()) {
    throw ShapeError("refine_block: input has " + std::to_string(f_bev.channels()) +
                     " channels, weights expect " + std::to_string(w.channels()));
  }
  const FeatureMap y1 = relu(conv2d_same(f_bev, w.conv7));
  const FeatureMap branch = conv2d_same(relu(conv2d_same(y1, w.res3a)), w.res3b);
  const FeatureMap y2 = add(y1, branch);
  return conv2d_same(relu(y2), w.conv1);
}

}  // namespace cvloc
