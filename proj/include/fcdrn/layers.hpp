// Parameterised layers: convolution and batch normalisation.
#pragma once

#include <string>

#include "fcdrn/conv.hpp"
#include "fcdrn/ops.hpp"
#include "fcdrn/random.hpp"

namespace fcdrn {

/// Everything a forward pass needs besides the input.
template <typename T>
struct ForwardContext {
  Tape<T>* tape = nullptr;
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;  // required when mode == Train and dropout > 0
  double dropout = 0.2;
  DropoutKind dropout_kind = DropoutKind::Element;

  static ForwardContext eval() { return {}; }
};

template <typename T>
struct Conv2d {
  Var<T> weight;  // [out, in, K, K]
  Var<T> bias;    // [1, out, 1, 1]
  ConvGeometry geom;

  /// He-uniform weights, zero bias.
  static Conv2d make(int in, int out, int kernel, ConvGeometry geom, Rng& rng) {
    Tensor<T> w({out, in, kernel, kernel});
    he_uniform(w, in * kernel * kernel, rng);
    return {Var<T>(std::move(w), true), Var<T>(Tensor<T>({1, out, 1, 1}), true), geom};
  }

  /// Centre tap is the identity matrix; every other tap and the bias are zero.
  static Conv2d identity(int channels, int kernel, ConvGeometry geom) {
    Tensor<T> w({channels, channels, kernel, kernel});
    for (int c = 0; c < channels; ++c) w.at(c, c, kernel / 2, kernel / 2) = T{1};
    return {Var<T>(std::move(w), true), Var<T>(Tensor<T>({1, channels, 1, 1}), true), geom};
  }

  [[nodiscard]] int in_channels() const { return weight.shape().c; }
  [[nodiscard]] int out_channels() const { return weight.shape().n; }
  [[nodiscard]] int kernel() const { return weight.shape().h; }
  [[nodiscard]] std::size_t parameter_count() const { return weight.value().size() + bias.value().size(); }

  Var<T> operator()(Tape<T>* tape, const Var<T>& x) const { return conv2d(tape, x, weight, bias, geom); }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  BatchNormState<T> state;

  static BatchNorm2d make(int channels) {
    return {Var<T>(Tensor<T>({1, channels, 1, 1}, T{1}), true), Var<T>(Tensor<T>({1, channels, 1, 1}), true),
            BatchNormState<T>::fresh(channels)};
  }

  [[nodiscard]] int channels() const { return gamma.shape().c; }
  [[nodiscard]] std::size_t parameter_count() const { return gamma.value().size() + beta.value().size(); }

  Var<T> operator()(const ForwardContext<T>& ctx, const Var<T>& x) {
    return batchnorm(ctx.tape, x, gamma, beta, state, ctx.mode);
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <typename F>
  void visit_buffers(const std::string& prefix, F&& f) {
    f(prefix + ".running_mean", state.running_mean);
    f(prefix + ".running_var", state.running_var);
  }
};

/// BN -> ReLU -> dropout, the shared pre-activation prefix.
template <typename T>
Var<T> pre_activation(const ForwardContext<T>& ctx, BatchNorm2d<T>& bn, const Var<T>& x, bool with_dropout) {
  auto h = relu(ctx.tape, bn(ctx, x));
  if (with_dropout && ctx.mode == Mode::Train && ctx.dropout > 0.0) {
    if (ctx.rng == nullptr) throw Error("forward: train-mode dropout needs an RNG");
    h = dropout(ctx.tape, h, ctx.dropout, ctx.mode, *ctx.rng, ctx.dropout_kind);
  }
  return h;
}

}  // namespace fcdrn
