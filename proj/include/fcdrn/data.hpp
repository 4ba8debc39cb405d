// Segmentation samples, the synthetic shape generator, augmentation, soft targets and batching.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fcdrn/random.hpp"
#include "fcdrn/tensor.hpp"

namespace fcdrn {

inline constexpr int kCamVidClasses = 11;
inline constexpr int kCamVidVoid = 11;

inline const std::array<std::string, kCamVidClasses>& camvid_class_names() {
  static const std::array<std::string, kCamVidClasses> names{
      "sky", "building", "column_pole", "road", "sidewalk", "tree", "sign_symbol", "fence", "car", "pedestrian",
      "bicyclist"};
  return names;
}

struct SegmentationSample {
  Tensor<float> image;  // [1, 3, H, W] in [0, 1]
  LabelMap labels;      // [1, 1, H, W]
  std::string name;
};

struct Dataset {
  std::vector<SegmentationSample> samples;
  int classes = kCamVidClasses;
  int void_index = kCamVidVoid;
  std::string name;

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] bool empty() const { return samples.empty(); }
};

enum class ShapeKind { Rectangle, Disc, Bar };

struct SyntheticSpec {
  int height = 64;
  int width = 64;
  int classes = 5;  // class 0 is the background
  std::vector<ShapeKind> shapes{ShapeKind::Rectangle, ShapeKind::Disc, ShapeKind::Bar};
  int min_shapes = 2;
  int max_shapes = 5;
  double noise = 0.05;
  std::uint64_t seed = 0;
  int count = 200;
  int start_index = 0;  // sample i uses stream start_index + i, so disjoint ranges give disjoint splits

  static constexpr int kMinCanvas = 8;

  void validate() const {
    if (height < kMinCanvas || width < kMinCanvas) {
      throw DataError("synthetic: canvas " + std::to_string(height) + "x" + std::to_string(width) +
                      " is smaller than " + std::to_string(kMinCanvas) + "x" + std::to_string(kMinCanvas));
    }
    if (classes < 2 || classes > kCamVidClasses) throw DataError("synthetic: class count must lie in [2, 11]");
    if (shapes.empty()) throw DataError("synthetic: no shape family selected");
    if (min_shapes < 1 || max_shapes < min_shapes) throw DataError("synthetic: bad shape count range");
    if (noise < 0.0) throw DataError("synthetic: negative noise");
    if (count < 0 || start_index < 0) throw DataError("synthetic: negative sample count or start index");
  }
};

namespace detail {

// Base colour and stripe period per class; distinct hues plus distinct texture.
inline std::array<float, 3> class_colour(int c) {
  static const std::array<std::array<float, 3>, kCamVidClasses> palette{{{0.50f, 0.50f, 0.50f},
                                                                        {0.90f, 0.20f, 0.20f},
                                                                        {0.20f, 0.80f, 0.25f},
                                                                        {0.20f, 0.30f, 0.90f},
                                                                        {0.90f, 0.85f, 0.20f},
                                                                        {0.80f, 0.25f, 0.85f},
                                                                        {0.20f, 0.85f, 0.85f},
                                                                        {0.95f, 0.55f, 0.15f},
                                                                        {0.10f, 0.10f, 0.10f},
                                                                        {0.95f, 0.95f, 0.95f},
                                                                        {0.55f, 0.35f, 0.20f}}};
  return palette[c];
}

inline float class_texture(int c, int y, int x) {
  const int period = 3 + c;
  return ((x + (c % 2 ? y : 0)) / period) % 2 == 0 ? 0.08f : -0.08f;
}

inline void paint(LabelMap& labels, ShapeKind kind, int cls, Rng& rng) {
  const int h = labels.h(), w = labels.w();
  auto set = [&](int y, int x) {
    if (y >= 0 && y < h && x >= 0 && x < w) labels.at(0, 0, y, x) = cls;
  };
  switch (kind) {
    case ShapeKind::Rectangle: {
      const int rh = uniform_int(rng, h / 8, h / 2), rw = uniform_int(rng, w / 8, w / 2);
      const int y0 = uniform_int(rng, 0, h - rh), x0 = uniform_int(rng, 0, w - rw);
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) set(y, x);
      break;
    }
    case ShapeKind::Disc: {
      const int r = uniform_int(rng, std::max(2, std::min(h, w) / 10), std::max(2, std::min(h, w) / 4));
      const int cy = uniform_int(rng, 0, h - 1), cx = uniform_int(rng, 0, w - 1);
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set(y, x);
      break;
    }
    case ShapeKind::Bar: {
      const bool vertical = rng() % 2 == 0;
      const int thick = uniform_int(rng, 2, std::max(2, (vertical ? w : h) / 8));
      const int pos = uniform_int(rng, 0, (vertical ? w : h) - thick);
      for (int a = 0; a < (vertical ? h : w); ++a)
        for (int t = pos; t < pos + thick; ++t) vertical ? set(a, t) : set(t, a);
      break;
    }
  }
}

inline int distinct_classes(const LabelMap& labels) {
  std::vector<bool> seen(kCamVidClasses + 1, false);
  int n = 0;
  for (auto v : labels.values()) {
    if (!seen[v]) {
      seen[v] = true;
      ++n;
    }
  }
  return n;
}

}  // namespace detail

/// One sample: background class 0, then shapes painted in order so later ones occlude earlier ones.
inline SegmentationSample synthetic_sample(const SyntheticSpec& spec, int index) {
  Rng rng = derive_rng(spec.seed, static_cast<std::uint64_t>(index));
  const int h = spec.height, w = spec.width;
  LabelMap labels({1, 1, h, w});
  const int n = uniform_int(rng, spec.min_shapes, spec.max_shapes);
  for (int s = 0; s < n; ++s) {
    const auto kind = spec.shapes[uniform_int(rng, 0, static_cast<int>(spec.shapes.size()) - 1)];
    detail::paint(labels, kind, uniform_int(rng, 1, spec.classes - 1), rng);
  }
  if (detail::distinct_classes(labels) < 2) {
    // Everything was covered by one class; carve a background window back in.
    for (int y = h / 4; y < h / 2; ++y)
      for (int x = w / 4; x < w / 2; ++x) labels.at(0, 0, y, x) = labels.at(0, 0, 0, 0) == 0 ? 1 : 0;
  }

  Tensor<float> image({1, 3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int c = labels.at(0, 0, y, x);
      const auto col = detail::class_colour(c);
      const float tex = detail::class_texture(c, y, x);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = col[ch] + tex + spec.noise * normal(rng);
        image.at(0, ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return {std::move(image), std::move(labels), "synth_" + std::to_string(index)};
}

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.classes = spec.classes;
  d.void_index = spec.classes;
  d.name = "synthetic";
  d.samples.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) d.samples.push_back(synthetic_sample(spec, spec.start_index + i));
  return d;
}

inline void hflip_inplace(SegmentationSample& s) {
  auto flip = [](auto& t) {
    for (int n = 0; n < t.n(); ++n)
      for (int c = 0; c < t.c(); ++c)
        for (int y = 0; y < t.h(); ++y) {
          auto* row = &t.at(n, c, y, 0);
          std::reverse(row, row + t.w());
        }
  };
  flip(s.image);
  flip(s.labels);
}

template <typename T>
Tensor<T> crop_tensor(const Tensor<T>& t, int y0, int x0, int ch, int cw) {
  Tensor<T> out({t.n(), t.c(), ch, cw});
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < ch; ++y) std::copy_n(&t.at(n, c, y0 + y, x0), cw, &out.at(n, c, y, 0));
  return out;
}

struct CropOffsets {
  int y = 0;
  int x = 0;
  bool flipped = false;
};

/// Uniform random crop, then a horizontal flip with probability `hflip_prob`, applied identically to
/// image and labels.
inline SegmentationSample augment(const SegmentationSample& s, int crop_h, int crop_w, double hflip_prob, Rng& rng,
                                  CropOffsets* applied = nullptr) {
  const int h = s.image.h(), w = s.image.w();
  if (crop_h > h || crop_w > w || crop_h < 1 || crop_w < 1) {
    throw DataError("augment: crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) + " does not fit " +
                    std::to_string(h) + "x" + std::to_string(w) + " image " + s.name);
  }
  CropOffsets off{uniform_int(rng, 0, h - crop_h), uniform_int(rng, 0, w - crop_w), false};
  off.flipped = uniform01(rng) < hflip_prob;
  SegmentationSample out{crop_tensor(s.image, off.y, off.x, crop_h, crop_w),
                         crop_tensor(s.labels, off.y, off.x, crop_h, crop_w), s.name};
  if (off.flipped) hflip_inplace(out);
  if (applied != nullptr) *applied = off;
  return out;
}

/// One-hot target over `classes` channels with (on, off) values; void pixels get an all-zero column.
inline Tensor<float> soften(const LabelMap& labels, int classes, int void_index, float on = 0.9f, float off = 0.01f) {
  const Shape s = labels.shape();
  Tensor<float> t({s.n, classes, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const int l = labels.at(n, 0, y, x);
        if (l == void_index) continue;
        if (l < 0 || l >= classes) throw DataError("soften: label " + std::to_string(l) + " out of range");
        for (int c = 0; c < classes; ++c) t.at(n, c, y, x) = c == l ? on : off;
      }
    }
  }
  return t;
}

/// Stacks equally sized samples along the batch axis.
inline SegmentationSample stack(std::span<const SegmentationSample> parts) {
  if (parts.empty()) throw DataError("stack: empty batch");
  const Shape is = parts[0].image.shape(), ls = parts[0].labels.shape();
  Tensor<float> image({static_cast<int>(parts.size()), is.c, is.h, is.w});
  LabelMap labels({static_cast<int>(parts.size()), 1, ls.h, ls.w});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].image.shape() != is || parts[i].labels.shape() != ls) throw ShapeError("stack: sample sizes differ");
    std::copy(parts[i].image.values().begin(), parts[i].image.values().end(), image.data() + i * is.numel());
    std::copy(parts[i].labels.values().begin(), parts[i].labels.values().end(), labels.data() + i * ls.numel());
  }
  return {std::move(image), std::move(labels), "batch"};
}

}  // namespace fcdrn
