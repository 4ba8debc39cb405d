// Receptive-field recurrence over layer lists and composite blocks.
#pragma once

#include <span>
#include <vector>

#include "fcdrn/blocks.hpp"

namespace fcdrn {

/// One spatial step. `stride` below 1 models an upsample (0.5 for a 2x repeat).
struct RfLayer {
  int kernel = 1;
  double stride = 1.0;
  int dilation = 1;
};

struct ReceptiveField {
  double rf = 1.0;
  double jump = 1.0;  // input pixels per output pixel, i.e. the downsample factor
};

inline ReceptiveField extend(ReceptiveField s, const RfLayer& l) {
  s.rf += (l.kernel - 1) * l.dilation * s.jump;
  s.jump *= l.stride;
  return s;
}

inline ReceptiveField compute_receptive_field(std::span<const RfLayer> layers, ReceptiveField start = {}) {
  for (const auto& l : layers) start = extend(start, l);
  return start;
}

template <typename T>
RfLayer rf_layer(const Conv2d<T>& c) {
  return {c.kernel(), static_cast<double>(c.geom.stride), c.geom.dilation};
}

template <typename T>
std::vector<RfLayer> rf_layers(const TransformBlock<T>& tf) {
  std::vector<RfLayer> out;
  if (tf.kind == TransformKind::MaxPool) out.push_back({2, 2.0, 1});
  if (tf.kind == TransformKind::UpsampleConv) out.push_back({1, 0.5, 1});
  for (const auto& c : tf.convs) out.push_back(rf_layer(c));
  return out;
}

/// The residual branch is the longest path; the projection is 1x1.
template <typename T>
std::vector<RfLayer> rf_layers(const ResidualBasicBlock<T>& b) {
  return {rf_layer(b.conv1), rf_layer(b.conv2)};
}

template <typename T>
std::vector<RfLayer> rf_layers(const ResNetStage<T>& s, std::size_t active = SIZE_MAX) {
  std::vector<RfLayer> out;
  for (std::size_t i = 0; i < s.blocks.size() && i < active; ++i) {
    for (const auto& l : rf_layers(s.blocks[i])) out.push_back(l);
  }
  return out;
}

template <typename T>
std::vector<RfLayer> rf_layers(const InitialDownsamplingBlock<T>& idb) {
  return {rf_layer(idb.conv0), {2, 2.0, 1}, rf_layer(idb.conv1), rf_layer(idb.conv2)};
}

}  // namespace fcdrn
