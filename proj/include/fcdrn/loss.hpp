// Pixel-wise softmax cross-entropy with void masking and soft targets.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fcdrn/autodiff.hpp"
#include "fcdrn/tensor.hpp"

namespace fcdrn {

namespace detail {

// Numerically stable log-softmax over the class axis at one pixel.
template <typename T>
void log_softmax_pixel(const Tensor<T>& logits, int n, int y, int x, std::vector<double>& out) {
  const int k = logits.c();
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < k; ++c) mx = std::max<double>(mx, logits.at(n, c, y, x));
  double z = 0.0;
  for (int c = 0; c < k; ++c) z += std::exp(static_cast<double>(logits.at(n, c, y, x)) - mx);
  const double lz = mx + std::log(z);
  for (int c = 0; c < k; ++c) out[c] = static_cast<double>(logits.at(n, c, y, x)) - lz;
}

// target(n, y, x, t) fills the class distribution t and returns false for void pixels.
template <typename T, typename TargetFn>
Var<T> cross_entropy_impl(Tape<T>* tape, const Var<T>& logits, TargetFn&& target) {
  const Shape& s = logits.shape();
  const int k = s.c;
  std::vector<double> logp(k);
  std::vector<double> t(k);
  Tensor<T> dlogits(s);
  double total = 0.0;
  std::size_t counted = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        if (!target(n, y, x, t)) continue;
        log_softmax_pixel(logits.value(), n, y, x, logp);
        double mass = 0.0;
        for (int c = 0; c < k; ++c) {
          total -= t[c] * logp[c];
          mass += t[c];
        }
        for (int c = 0; c < k; ++c) {
          dlogits.at(n, c, y, x) = static_cast<T>(std::exp(logp[c]) * mass - t[c]);
        }
        ++counted;
      }
    }
  }
  const double denom = counted > 0 ? static_cast<double>(counted) : 1.0;
  const double loss = total / denom;
  if (!std::isfinite(loss)) throw NumericalError("softmax_cross_entropy: non-finite loss");
  dlogits *= static_cast<T>(1.0 / denom);

  Var<T> result(Tensor<T>({1, 1, 1, 1}, static_cast<T>(loss)));
  if (Tape<T>::needs_grad(tape, {&logits})) {
    auto ln = logits.node();
    tape->record(result, [ln, dlogits = std::move(dlogits)](const Tensor<T>& g) {
      auto& gx = ln->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * dlogits[i];
    });
  }
  return result;
}

}  // namespace detail

/// Mean over non-void pixels of -log softmax(logits)[label]. Labels are [N,1,H,W].
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>* tape, const Var<T>& logits, const LabelMap& labels,
                             std::optional<int> void_index = std::nullopt) {
  const Shape& s = logits.shape();
  if (labels.n() != s.n || labels.h() != s.h || labels.w() != s.w || labels.c() != 1) {
    throw ShapeError("softmax_cross_entropy: labels " + labels.shape().str() + " vs logits " + s.str());
  }
  for (std::int32_t v : labels.values()) {
    if (void_index && v == *void_index) continue;
    if (v < 0 || v >= s.c) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(v) + " outside [0, " +
                      std::to_string(s.c) + ")");
    }
  }
  return detail::cross_entropy_impl(tape, logits, [&](int n, int y, int x, std::vector<double>& t) {
    const int v = labels.at(n, 0, y, x);
    if (void_index && v == *void_index) return false;
    std::fill(t.begin(), t.end(), 0.0);
    t[v] = 1.0;
    return true;
  });
}

/// Soft-target form: -sum_k t_k log softmax_k. Pixels whose target column sums to zero are void.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>* tape, const Var<T>& logits, const Tensor<T>& target) {
  if (target.shape() != logits.shape()) {
    throw ShapeError("softmax_cross_entropy: target " + target.shape().str() + " vs logits " + logits.shape().str());
  }
  return detail::cross_entropy_impl(tape, logits, [&](int n, int y, int x, std::vector<double>& t) {
    double mass = 0.0;
    for (int c = 0; c < target.c(); ++c) {
      t[c] = target.at(n, c, y, x);
      mass += t[c];
    }
    return mass > 0.0;
  });
}

/// Per-pixel argmax over classes as a [N,1,H,W] label map.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  LabelMap out({s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        int best = 0;
        for (int c = 1; c < s.c; ++c) {
          if (logits.at(n, c, y, x) > logits.at(n, best, y, x)) best = c;
        }
        out.at(n, 0, y, x) = best;
      }
    }
  }
  return out;
}

}  // namespace fcdrn
