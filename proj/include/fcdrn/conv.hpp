// 2-D cross-correlation with stride, dilation and zero padding, via patch gather + GEMM.
#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "fcdrn/autodiff.hpp"
#include "fcdrn/tensor.hpp"

namespace fcdrn {

struct ConvGeometry {
  int stride = 1;
  int dilation = 1;
  int padding = 0;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Padding that keeps H, W at stride 1 for odd kernels.
inline int same_padding(int kernel, int dilation) { return dilation * (kernel - 1) / 2; }

inline int conv_output_size(int in, int kernel, const ConvGeometry& g) {
  return (in + 2 * g.padding - g.dilation * (kernel - 1) - 1) / g.stride + 1;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct PatchLayout {
  int channels, height, width, kernel, out_h, out_w;
  ConvGeometry geom;
};

// cols is (channels * kernel * kernel) x (out_h * out_w).
template <typename T>
void im2col(const T* image, const PatchLayout& l, T* cols) {
  const int plane_out = l.out_h * l.out_w;
  for (int c = 0; c < l.channels; ++c) {
    const T* src = image + static_cast<std::size_t>(c) * l.height * l.width;
    for (int ky = 0; ky < l.kernel; ++ky) {
      for (int kx = 0; kx < l.kernel; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * l.kernel + ky) * l.kernel + kx) * plane_out;
        for (int oy = 0; oy < l.out_h; ++oy) {
          const int iy = oy * l.geom.stride - l.geom.padding + ky * l.geom.dilation;
          T* dst = row + static_cast<std::size_t>(oy) * l.out_w;
          if (iy < 0 || iy >= l.height) {
            std::fill_n(dst, l.out_w, T{});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * l.width;
          const int x0 = kx * l.geom.dilation - l.geom.padding;
          for (int ox = 0; ox < l.out_w; ++ox) {
            const int ix = ox * l.geom.stride + x0;
            dst[ox] = (ix >= 0 && ix < l.width) ? line[ix] : T{};
          }
        }
      }
    }
  }
}

// Scatter-add of patch gradients back onto the image gradient.
template <typename T>
void col2im_add(const T* cols, const PatchLayout& l, T* image_grad) {
  const int plane_out = l.out_h * l.out_w;
  for (int c = 0; c < l.channels; ++c) {
    T* dst = image_grad + static_cast<std::size_t>(c) * l.height * l.width;
    for (int ky = 0; ky < l.kernel; ++ky) {
      for (int kx = 0; kx < l.kernel; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * l.kernel + ky) * l.kernel + kx) * plane_out;
        for (int oy = 0; oy < l.out_h; ++oy) {
          const int iy = oy * l.geom.stride - l.geom.padding + ky * l.geom.dilation;
          if (iy < 0 || iy >= l.height) continue;
          T* line = dst + static_cast<std::size_t>(iy) * l.width;
          const T* src = row + static_cast<std::size_t>(oy) * l.out_w;
          const int x0 = kx * l.geom.dilation - l.geom.padding;
          for (int ox = 0; ox < l.out_w; ++ox) {
            const int ix = ox * l.geom.stride + x0;
            if (ix >= 0 && ix < l.width) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// weight is [out, in, K, K]; bias is [1, out, 1, 1] or undefined.
template <typename T>
Var<T> conv2d(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const ConvGeometry& geom) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w || ws.h % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd, got " + ws.str());
  if (geom.stride < 1 || geom.dilation < 1 || geom.padding < 0) throw ShapeError("conv2d: invalid geometry");
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                     std::to_string(ws.c));
  }
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias length does not match output channels");
  }
  const int k = ws.h;
  const int out_h = conv_output_size(xs.h, k, geom);
  const int out_w = conv_output_size(xs.w, k, geom);
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError("conv2d: non-positive output size for input " + xs.str());
  }
  const detail::PatchLayout layout{xs.c, xs.h, xs.w, k, out_h, out_w, geom};
  const bool direct = k == 1 && geom.stride == 1 && geom.padding == 0;
  const int patch = xs.c * k * k;
  const int plane_out = out_h * out_w;

  Tensor<T> out({xs.n, ws.n, out_h, out_w});
  AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(patch) * plane_out);
  detail::ConstMatrixMap<T> wmat(weight.value().data(), ws.n, patch);
  for (int n = 0; n < xs.n; ++n) {
    const T* in = x.value().plane(n, 0);
    if (!direct) detail::im2col(in, layout, cols.data());
    detail::ConstMatrixMap<T> cmat(direct ? in : cols.data(), patch, plane_out);
    detail::MatrixMap<T> omat(out.plane(n, 0), ws.n, plane_out);
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (int o = 0; o < ws.n; ++o) omat.row(o).array() += bias.value()[o];
    }
  }
  if (!out.all_finite()) throw NumericalError("conv2d: non-finite output");

  Var<T> result(std::move(out));
  if (Tape<T>::needs_grad(tape, {&x, &weight, &bias})) {
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    tape->record(result, [xn, wn, bn, layout, direct, patch, plane_out](const Tensor<T>& gout) {
      const int batch = gout.n();
      const int out_c = gout.c();
      AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(patch) * plane_out);
      detail::ConstMatrixMap<T> wmat(wn->value.data(), out_c, patch);
      for (int n = 0; n < batch; ++n) {
        detail::ConstMatrixMap<T> g(gout.plane(n, 0), out_c, plane_out);
        if (bn && bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (int o = 0; o < out_c; ++o) gb[o] += g.row(o).sum();
        }
        if (wn->requires_grad) {
          const T* in = xn->value.plane(n, 0);
          if (!direct) detail::im2col(in, layout, cols.data());
          detail::ConstMatrixMap<T> cmat(direct ? in : cols.data(), patch, plane_out);
          detail::MatrixMap<T> gw(wn->grad_buffer().data(), out_c, patch);
          gw.noalias() += g * cmat.transpose();
        }
        if (xn->requires_grad) {
          T* gx = xn->grad_buffer().plane(n, 0);
          if (direct) {
            detail::MatrixMap<T> gxm(gx, patch, plane_out);
            gxm.noalias() += wmat.transpose() * g;
          } else {
            detail::MatrixMap<T> gc(cols.data(), patch, plane_out);
            gc.noalias() = wmat.transpose() * g;
            detail::col2im_add(cols.data(), layout, gx);
          }
        }
      }
    });
  }
  return result;
}

}  // namespace fcdrn
