// Differentiable pooling, resampling, normalisation and elementwise operators.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fcdrn/autodiff.hpp"
#include "fcdrn/random.hpp"
#include "fcdrn/tensor.hpp"

namespace fcdrn {

template <typename T>
struct PoolResult {
  Var<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
template <typename T>
PoolResult<T> maxpool2d(Tape<T>* tape, const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.h < 2 || s.w < 2) throw ShapeError("maxpool2d: spatial size below kernel in " + s.str());
  const int oh = s.h / 2;
  const int ow = s.w / 2;
  Tensor<T> out({s.n, s.c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const Tensor<T>& in = x.value();
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          std::size_t best = in.index(n, c, 2 * y, 2 * xx);
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t i = in.index(n, c, 2 * y + dy, 2 * xx + dx);
              if (in[i] > in[best]) best = i;
            }
          }
          out[o] = in[best];
          argmax[o] = best;
        }
      }
    }
  }
  PoolResult<T> result{Var<T>(std::move(out)), std::move(argmax)};
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result.output, [xn, idx = result.argmax](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
    });
  }
  return result;
}

/// Nearest-neighbour resize: out(y, x) = in(floor(y * H / th), floor(x * W / tw)).
template <typename T>
Var<T> upsample_nearest(Tape<T>* tape, const Var<T>& x, int target_h, int target_w) {
  const Shape& s = x.shape();
  if (target_h < s.h || target_w < s.w) {
    throw ShapeError("upsample_nearest: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                     " smaller than input " + s.str());
  }
  std::vector<int> row_src(target_h);
  std::vector<int> col_src(target_w);
  for (int y = 0; y < target_h; ++y) row_src[y] = static_cast<int>(static_cast<long long>(y) * s.h / target_h);
  for (int xx = 0; xx < target_w; ++xx) col_src[xx] = static_cast<int>(static_cast<long long>(xx) * s.w / target_w);

  Tensor<T> out({s.n, s.c, target_h, target_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < target_h; ++y) {
        const T* line = src + static_cast<std::size_t>(row_src[y]) * s.w;
        for (int xx = 0; xx < target_w; ++xx) *dst++ = line[col_src[xx]];
      }
    }
  }
  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result, [xn, row_src, col_src](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      const int w = gx.w();
      for (int n = 0; n < g.n(); ++n) {
        for (int c = 0; c < g.c(); ++c) {
          const T* src = g.plane(n, c);
          T* dst = gx.plane(n, c);
          for (std::size_t y = 0; y < row_src.size(); ++y) {
            T* line = dst + static_cast<std::size_t>(row_src[y]) * w;
            for (std::size_t xx = 0; xx < col_src.size(); ++xx) line[col_src[xx]] += *src++;
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;  // [1, C, 1, 1]
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState fresh(int channels, double eps = 1e-5, double momentum = 0.1) {
    return {Tensor<T>({1, channels, 1, 1}, T{0}), Tensor<T>({1, channels, 1, 1}, T{1}), eps, momentum};
  }
};

/// Per-channel normalisation over N x H x W. Train mode uses batch statistics and updates
/// the running averages; eval mode uses the running averages.
template <typename T>
Var<T> batchnorm(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 BatchNormState<T>& state, Mode mode) {
  const Shape& s = x.shape();
  if (gamma.value().size() != static_cast<std::size_t>(s.c) || beta.value().size() != static_cast<std::size_t>(s.c)) {
    throw ShapeError("batchnorm: gamma/beta length does not match " + std::to_string(s.c) + " channels");
  }
  const std::size_t plane = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * plane;
  std::vector<T> mean(s.c), inv_std(s.c);
  if (mode == Mode::Train) {
    for (int c = 0; c < s.c; ++c) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    }
  } else {
    for (int c = 0; c < s.c; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps));
    }
  }

  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* q = out.plane(n, c);
      const T g = gamma.value()[c] * inv_std[c];
      const T b = beta.value()[c] - g * mean[c];
      for (std::size_t i = 0; i < plane; ++i) q[i] = g * p[i] + b;
    }
  }
  if (!out.all_finite()) throw NumericalError("batchnorm: non-finite output");

  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&x, &gamma, &beta})) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    const bool batch_stats = mode == Mode::Train;
    tape->record(result, [xn, gn, bn, mean, inv_std, batch_stats, plane, count](const Tensor<T>& g) {
      const int channels = g.c();
      for (int c = 0; c < channels; ++c) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (int n = 0; n < g.n(); ++n) {
          const T* gp = g.plane(n, c);
          const T* xp = xn->value.plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * (xp[i] - mean[c]) * inv_std[c];
          }
        }
        if (gn->requires_grad) gn->grad_buffer()[c] += static_cast<T>(sum_gx);
        if (bn->requires_grad) bn->grad_buffer()[c] += static_cast<T>(sum_g);
        if (!xn->requires_grad) continue;
        const T scale = gn->value[c] * inv_std[c];
        auto& gx = xn->grad_buffer();
        for (int n = 0; n < g.n(); ++n) {
          const T* gp = g.plane(n, c);
          const T* xp = xn->value.plane(n, c);
          T* dst = gx.plane(n, c);
          if (batch_stats) {
            const T mean_g = static_cast<T>(sum_g / static_cast<double>(count));
            const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(count));
            for (std::size_t i = 0; i < plane; ++i) {
              const T xhat = (xp[i] - mean[c]) * inv_std[c];
              dst[i] += scale * (gp[i] - mean_g - xhat * mean_gx);
            }
          } else {
            for (std::size_t i = 0; i < plane; ++i) dst[i] += scale * gp[i];
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Var<T> relu(Tape<T>* tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result, [xn](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xn->value[i] > T{0}) gx[i] += g[i];
      }
    });
  }
  return result;
}

enum class DropoutKind { Element, Channel };

/// Inverted dropout: survivors are scaled by 1 / (1 - p). Identity in eval mode.
template <typename T>
Var<T> dropout(Tape<T>* tape, const Var<T>& x, double p, Mode mode, Rng& rng,
               DropoutKind kind = DropoutKind::Element) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const Shape& s = x.shape();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.value().size());
  if (kind == DropoutKind::Element) {
    for (auto& m : mask) m = uniform01(rng) < p ? T{0} : keep_scale;
  } else {
    const std::size_t plane = s.plane();
    for (std::size_t ch = 0; ch < static_cast<std::size_t>(s.n) * s.c; ++ch) {
      const T m = uniform01(rng) < p ? T{0} : keep_scale;
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(ch * plane), plane, m);
    }
  }
  Tensor<T> out(s);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = x.value()[i] * mask[i];
  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result, [xn, mask = std::move(mask)](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return result;
}

template <typename T>
Var<T> dropout(Tape<T>* tape, const Var<T>& x, double p, Mode mode, std::uint64_t seed,
               DropoutKind kind = DropoutKind::Element) {
  Rng rng(seed);
  return dropout(tape, x, p, mode, rng, kind);
}

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out = a.value();
  out += b.value();
  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    tape->record(result, [an, bn](const Tensor<T>& g) {
      if (an->requires_grad) an->accumulate(g);
      if (bn->requires_grad) bn->accumulate(g);
    });
  }
  return result;
}

/// Channel concatenation in the given order.
template <typename T>
Var<T> concat_channels(Tape<T>* tape, std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = inputs.front().shape();
  int channels = 0;
  for (const auto& v : inputs) {
    const Shape& s = v.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + s.str() + " does not align with " + first.str());
    }
    channels += s.c;
  }
  Tensor<T> out({first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (int n = 0; n < first.n; ++n) {
    int offset = 0;
    for (const auto& v : inputs) {
      std::copy_n(v.value().plane(n, 0), plane * v.shape().c, out.plane(n, offset));
      offset += v.shape().c;
    }
  }
  Var<T> result(std::move(out));
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (tape != nullptr && any) {
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& v : inputs) nodes.push_back(v.node());
    tape->record(result, [nodes, plane](const Tensor<T>& g) {
      for (int n = 0; n < g.n(); ++n) {
        int offset = 0;
        for (const auto& node : nodes) {
          const int c = node->value.c();
          if (node->requires_grad) {
            const T* src = g.plane(n, offset);
            T* dst = node->grad_buffer().plane(n, 0);
            for (std::size_t i = 0; i < plane * c; ++i) dst[i] += src[i];
          }
          offset += c;
        }
      }
    });
  }
  return result;
}

template <typename T>
Var<T> concat_channels(Tape<T>* tape, const std::vector<Var<T>>& inputs) {
  return concat_channels(tape, std::span<const Var<T>>(inputs));
}

/// Sum of all elements as a [1,1,1,1] scalar.
template <typename T>
Var<T> sum(Tape<T>* tape, const Var<T>& x) {
  double total = 0.0;
  for (T v : x.value().values()) total += v;
  Var<T> result(Tensor<T>({1, 1, 1, 1}, static_cast<T>(total)));
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result, [xn](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      for (auto& v : gx.values()) v += g[0];
    });
  }
  return result;
}

/// Elementwise product with a constant tensor; used to build weighted scalar probes.
template <typename T>
Var<T> weighted_sum(Tape<T>* tape, const Var<T>& x, const Tensor<T>& weights) {
  if (weights.shape() != x.shape()) throw ShapeError("weighted_sum: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += x.value()[i] * weights[i];
  Var<T> result(Tensor<T>({1, 1, 1, 1}, static_cast<T>(total)));
  if (Tape<T>::needs_grad(tape, {&x})) {
    auto xn = x.node();
    tape->record(result, [xn, weights](const Tensor<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += g[0] * weights[i];
    });
  }
  return result;
}

}  // namespace fcdrn
