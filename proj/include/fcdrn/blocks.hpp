// Composite blocks: residual basic block, ResNet stage, transformations, IDB and FUB.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fcdrn/layers.hpp"

namespace fcdrn {

/// x + F(x), with F = twice (BN -> ReLU -> dropout -> 3x3 conv). A 1x1 projection
/// replaces the identity path when the channel count changes.
template <typename T>
struct ResidualBasicBlock {
  BatchNorm2d<T> bn1;
  Conv2d<T> conv1;
  BatchNorm2d<T> bn2;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> projection;

  static ResidualBasicBlock make(int in, int out, Rng& rng) {
    ResidualBasicBlock b{BatchNorm2d<T>::make(in), Conv2d<T>::make(in, out, 3, {1, 1, 1}, rng),
                         BatchNorm2d<T>::make(out), Conv2d<T>::make(out, out, 3, {1, 1, 1}, rng), std::nullopt};
    if (in != out) b.projection = Conv2d<T>::make(in, out, 1, {}, rng);
    return b;
  }

  [[nodiscard]] int in_channels() const { return conv1.in_channels(); }
  [[nodiscard]] int out_channels() const { return conv2.out_channels(); }
  [[nodiscard]] const Conv2d<T>& final_conv() const { return conv2; }

  [[nodiscard]] std::size_t parameter_count() const {
    return bn1.parameter_count() + conv1.parameter_count() + bn2.parameter_count() + conv2.parameter_count() +
           (projection ? projection->parameter_count() : 0);
  }

  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& x) {
    if (x.shape().c != in_channels()) {
      throw ShapeError("basic block: input has " + std::to_string(x.shape().c) + " channels, expected " +
                       std::to_string(in_channels()));
    }
    auto h = conv1(ctx.tape, pre_activation(ctx, bn1, x, true));
    h = conv2(ctx.tape, pre_activation(ctx, bn2, h, true));
    return add(ctx.tape, h, projection ? (*projection)(ctx.tape, x) : x);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    bn1.visit_params(p + ".bn1", f);
    conv1.visit_params(p + ".conv1", f);
    bn2.visit_params(p + ".bn2", f);
    conv2.visit_params(p + ".conv2", f);
    if (projection) projection->visit_params(p + ".projection", f);
  }
  template <typename F>
  void visit_buffers(const std::string& p, F&& f) {
    bn1.visit_buffers(p + ".bn1", f);
    bn2.visit_buffers(p + ".bn2", f);
  }
};

/// Resolution-preserving sequence of basic blocks; only the first may change width.
template <typename T>
struct ResNetStage {
  std::vector<ResidualBasicBlock<T>> blocks;

  static ResNetStage make(int in, int out, int block_count, Rng& rng) {
    ResNetStage s;
    for (int i = 0; i < block_count; ++i) s.blocks.push_back(ResidualBasicBlock<T>::make(i == 0 ? in : out, out, rng));
    return s;
  }

  [[nodiscard]] int in_channels() const { return blocks.front().in_channels(); }
  [[nodiscard]] int out_channels() const { return blocks.front().out_channels(); }
  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.parameter_count();
    return n;
  }

  /// Runs the first `active` blocks (all by default).
  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& x, std::size_t active = SIZE_MAX) {
    Var<T> h = x;
    for (std::size_t i = 0; i < blocks.size() && i < active; ++i) h = blocks[i].forward(ctx, h);
    return h;
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit_params(p + ".block" + std::to_string(i + 1), f);
  }
  template <typename F>
  void visit_buffers(const std::string& p, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit_buffers(p + ".block" + std::to_string(i + 1), f);
  }
};

enum class TransformKind {
  MaxPool,       // 2x2, stride 2
  StridedConv,   // 3x3, stride 2, padding 1
  Multigrid,     // stacked dilated 3x3 convs
  UpsampleConv,  // nearest upsample to a recorded size, then 3x3 conv
  Conv1x1,       // resolution-preserving 1x1 conv
  DilatedConv,   // single dilated 3x3 conv
  Conv3x3,       // resolution-preserving 3x3 conv
};

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::MaxPool: return "maxpool";
    case TransformKind::StridedConv: return "strided_conv";
    case TransformKind::Multigrid: return "multigrid";
    case TransformKind::UpsampleConv: return "upsample_conv";
    case TransformKind::Conv1x1: return "conv1x1";
    case TransformKind::DilatedConv: return "dilated_conv";
    case TransformKind::Conv3x3: return "conv3x3";
  }
  return "?";
}

inline TransformKind transform_kind_from_string(const std::string& s) {
  for (auto k : {TransformKind::MaxPool, TransformKind::StridedConv, TransformKind::Multigrid,
                 TransformKind::UpsampleConv, TransformKind::Conv1x1, TransformKind::DilatedConv,
                 TransformKind::Conv3x3}) {
    if (to_string(k) == s) return k;
  }
  throw DataError("unknown transform kind '" + s + "'");
}

inline bool downsamples(TransformKind k) { return k == TransformKind::MaxPool || k == TransformKind::StridedConv; }
inline bool upsamples(TransformKind k) { return k == TransformKind::UpsampleConv; }

enum class MultigridPattern { Uniform, Doubling };

/// Dilation rates of the stacked convs: (r, r, r) or (r, 2r, 4r).
inline std::array<int, 3> multigrid_rates(int base_rate, MultigridPattern pattern) {
  if (base_rate < 1) throw Error("multigrid: dilation rate must be positive, got " + std::to_string(base_rate));
  if (pattern == MultigridPattern::Uniform) return {base_rate, base_rate, base_rate};
  return {base_rate, 2 * base_rate, 4 * base_rate};
}

template <typename T>
struct TransformBlock {
  TransformKind kind = TransformKind::MaxPool;
  std::vector<Conv2d<T>> convs;

  static TransformBlock maxpool() { return {TransformKind::MaxPool, {}}; }
  static TransformBlock strided(int channels, Rng& rng) {
    return {TransformKind::StridedConv, {Conv2d<T>::make(channels, channels, 3, {2, 1, 1}, rng)}};
  }
  static TransformBlock multigrid(int in, int out, int base_rate, MultigridPattern pattern, Rng& rng) {
    TransformBlock b{TransformKind::Multigrid, {}};
    int c = in;
    for (int rate : multigrid_rates(base_rate, pattern)) {
      b.convs.push_back(Conv2d<T>::make(c, out, 3, {1, rate, rate}, rng));
      c = out;
    }
    return b;
  }
  static TransformBlock upsample_conv(int channels, Rng& rng) {
    return {TransformKind::UpsampleConv, {Conv2d<T>::make(channels, channels, 3, {1, 1, 1}, rng)}};
  }
  static TransformBlock conv1x1(int channels, Rng& rng) {
    return {TransformKind::Conv1x1, {Conv2d<T>::make(channels, channels, 1, {}, rng)}};
  }
  static TransformBlock conv3x3(int channels, Rng& rng) {
    return {TransformKind::Conv3x3, {Conv2d<T>::make(channels, channels, 3, {1, 1, 1}, rng)}};
  }
  static TransformBlock dilated(int channels, int rate, Rng& rng) {
    return {TransformKind::DilatedConv, {Conv2d<T>::make(channels, channels, 3, {1, rate, rate}, rng)}};
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs) n += c.parameter_count();
    return n;
  }

  /// `target` is the (H, W) an upsampling kind must restore.
  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& x,
                 std::optional<std::pair<int, int>> target = std::nullopt) const {
    if (downsamples(kind) && (x.shape().h < 2 || x.shape().w < 2)) {
      throw ShapeError("transform " + to_string(kind) + ": cannot downsample " + x.shape().str());
    }
    switch (kind) {
      case TransformKind::MaxPool: return maxpool2d(ctx.tape, x).output;
      case TransformKind::UpsampleConv: {
        if (!target) throw ShapeError("transform upsample_conv: missing target size");
        return convs.front()(ctx.tape, upsample_nearest(ctx.tape, x, target->first, target->second));
      }
      default: {
        Var<T> h = x;
        for (const auto& c : convs) h = c(ctx.tape, h);
        return h;
      }
    }
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].visit_params(p + ".conv" + std::to_string(i), f);
  }
};

/// Initial downsampling block: 3x3 conv, 2x2 max pool, two pre-activated 3x3 convs.
template <typename T>
struct InitialDownsamplingBlock {
  Conv2d<T> conv0;
  BatchNorm2d<T> bn1;
  Conv2d<T> conv1;
  BatchNorm2d<T> bn2;
  Conv2d<T> conv2;

  static InitialDownsamplingBlock make(int in, int width, Rng& rng) {
    return {Conv2d<T>::make(in, width, 3, {1, 1, 1}, rng), BatchNorm2d<T>::make(width),
            Conv2d<T>::make(width, width, 3, {1, 1, 1}, rng), BatchNorm2d<T>::make(width),
            Conv2d<T>::make(width, width, 3, {1, 1, 1}, rng)};
  }

  [[nodiscard]] int out_channels() const { return conv2.out_channels(); }
  [[nodiscard]] std::size_t parameter_count() const {
    return conv0.parameter_count() + bn1.parameter_count() + conv1.parameter_count() + bn2.parameter_count() +
           conv2.parameter_count();
  }

  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& image) {
    auto h = maxpool2d(ctx.tape, conv0(ctx.tape, image)).output;
    h = conv1(ctx.tape, pre_activation(ctx, bn1, h, false));
    return conv2(ctx.tape, pre_activation(ctx, bn2, h, false));
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    conv0.visit_params(p + ".conv0", f);
    bn1.visit_params(p + ".bn1", f);
    conv1.visit_params(p + ".conv1", f);
    bn2.visit_params(p + ".bn2", f);
    conv2.visit_params(p + ".conv2", f);
  }
  template <typename F>
  void visit_buffers(const std::string& p, F&& f) {
    bn1.visit_buffers(p + ".bn1", f);
    bn2.visit_buffers(p + ".bn2", f);
  }
};

/// Final upsampling block: BN + ReLU, repeat-upsample to the input size, 3x3 conv, BN + ReLU.
template <typename T>
struct FinalUpsamplingBlock {
  BatchNorm2d<T> bn_in;
  Conv2d<T> conv;
  BatchNorm2d<T> bn_out;

  static FinalUpsamplingBlock make(int in, int width, Rng& rng) {
    return {BatchNorm2d<T>::make(in), Conv2d<T>::make(in, width, 3, {1, 1, 1}, rng), BatchNorm2d<T>::make(width)};
  }

  [[nodiscard]] int out_channels() const { return conv.out_channels(); }
  [[nodiscard]] std::size_t parameter_count() const {
    return bn_in.parameter_count() + conv.parameter_count() + bn_out.parameter_count();
  }

  // BN -> ReLU commutes with a 2x repeat, so it runs before the upsample at a quarter of the cost.
  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& x, int target_h, int target_w) {
    auto h = upsample_nearest(ctx.tape, pre_activation(ctx, bn_in, x, false), target_h, target_w);
    h = conv(ctx.tape, h);
    return pre_activation(ctx, bn_out, h, false);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    bn_in.visit_params(p + ".bn_in", f);
    conv.visit_params(p + ".conv", f);
    bn_out.visit_params(p + ".bn_out", f);
  }
  template <typename F>
  void visit_buffers(const std::string& p, F&& f) {
    bn_in.visit_buffers(p + ".bn_in", f);
    bn_out.visit_buffers(p + ".bn_out", f);
  }
};

}  // namespace fcdrn
