#pragma once

#include <vector>

#include "segviz/gemm.hpp"
#include "segviz/tensor.hpp"

namespace segviz {

namespace detail {

// Geometry of one regular convolution, spatial rank 2 or 3. Transposed
// convolution reuses it with input/output roles swapped.
struct ConvGeom {
  size_t channels = 0;            // channels on the conv-input side
  std::vector<size_t> in;         // conv input spatial extents
  std::vector<size_t> out;        // conv output spatial extents
  std::vector<size_t> kernel;
  std::vector<int> stride;
  std::vector<int> padding;

  size_t rank() const { return in.size(); }
  size_t kernel_elems() const { return numel(kernel); }
  size_t in_elems() const { return numel(in); }
  size_t out_elems() const { return numel(out); }
};

// cols[(c*K + kidx) * P + oidx] = x[c][o*stride - pad + koff], zero outside.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const size_t P = g.out_elems();
  const size_t K = g.kernel_elems();
  if (g.rank() == 2) {
    const size_t ih = g.in[0], iw = g.in[1], oh = g.out[0], ow = g.out[1];
    const size_t kh = g.kernel[0], kw = g.kernel[1];
    const int sh = g.stride[0], sw = g.stride[1], ph = g.padding[0], pw = g.padding[1];
    for (size_t c = 0; c < g.channels; ++c) {
      const T* xc = x + c * ih * iw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          T* row = cols + ((c * K) + ky * kw + kx) * P;
          for (size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy) * sh - ph + static_cast<long>(ky);
            T* dst = row + oy * ow;
            if (iy < 0 || iy >= static_cast<long>(ih)) {
              for (size_t ox = 0; ox < ow; ++ox) dst[ox] = T(0);
              continue;
            }
            const T* src = xc + static_cast<size_t>(iy) * iw;
            for (size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox) * sw - pw + static_cast<long>(kx);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(iw)) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  } else {
    const size_t id = g.in[0], ih = g.in[1], iw = g.in[2];
    const size_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const size_t kd = g.kernel[0], kh = g.kernel[1], kw = g.kernel[2];
    const int sd = g.stride[0], sh = g.stride[1], sw = g.stride[2];
    const int pd = g.padding[0], ph = g.padding[1], pw = g.padding[2];
    for (size_t c = 0; c < g.channels; ++c) {
      const T* xc = x + c * id * ih * iw;
      for (size_t kz = 0; kz < kd; ++kz)
        for (size_t ky = 0; ky < kh; ++ky)
          for (size_t kx = 0; kx < kw; ++kx) {
            T* row = cols + ((c * K) + (kz * kh + ky) * kw + kx) * P;
            for (size_t oz = 0; oz < od; ++oz) {
              const long iz = static_cast<long>(oz) * sd - pd + static_cast<long>(kz);
              for (size_t oy = 0; oy < oh; ++oy) {
                const long iy = static_cast<long>(oy) * sh - ph + static_cast<long>(ky);
                T* dst = row + (oz * oh + oy) * ow;
                if (iz < 0 || iz >= static_cast<long>(id) || iy < 0 ||
                    iy >= static_cast<long>(ih)) {
                  for (size_t ox = 0; ox < ow; ++ox) dst[ox] = T(0);
                  continue;
                }
                const T* src = xc + (static_cast<size_t>(iz) * ih + static_cast<size_t>(iy)) * iw;
                for (size_t ox = 0; ox < ow; ++ox) {
                  const long ix = static_cast<long>(ox) * sw - pw + static_cast<long>(kx);
                  dst[ox] = (ix < 0 || ix >= static_cast<long>(iw)) ? T(0) : src[ix];
                }
              }
            }
          }
    }
  }
}

// Adjoint of im2col: scatter-accumulate columns back into the image.
template <typename T>
void col2im_acc(const ConvGeom& g, const T* cols, T* x) {
  const size_t P = g.out_elems();
  const size_t K = g.kernel_elems();
  if (g.rank() == 2) {
    const size_t ih = g.in[0], iw = g.in[1], oh = g.out[0], ow = g.out[1];
    const size_t kh = g.kernel[0], kw = g.kernel[1];
    const int sh = g.stride[0], sw = g.stride[1], ph = g.padding[0], pw = g.padding[1];
    for (size_t c = 0; c < g.channels; ++c) {
      T* xc = x + c * ih * iw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          const T* row = cols + ((c * K) + ky * kw + kx) * P;
          for (size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy) * sh - ph + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
            T* dst = xc + static_cast<size_t>(iy) * iw;
            const T* src = row + oy * ow;
            for (size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox) * sw - pw + static_cast<long>(kx);
              if (ix >= 0 && ix < static_cast<long>(iw)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  } else {
    const size_t id = g.in[0], ih = g.in[1], iw = g.in[2];
    const size_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const size_t kd = g.kernel[0], kh = g.kernel[1], kw = g.kernel[2];
    const int sd = g.stride[0], sh = g.stride[1], sw = g.stride[2];
    const int pd = g.padding[0], ph = g.padding[1], pw = g.padding[2];
    for (size_t c = 0; c < g.channels; ++c) {
      T* xc = x + c * id * ih * iw;
      for (size_t kz = 0; kz < kd; ++kz)
        for (size_t ky = 0; ky < kh; ++ky)
          for (size_t kx = 0; kx < kw; ++kx) {
            const T* row = cols + ((c * K) + (kz * kh + ky) * kw + kx) * P;
            for (size_t oz = 0; oz < od; ++oz) {
              const long iz = static_cast<long>(oz) * sd - pd + static_cast<long>(kz);
              if (iz < 0 || iz >= static_cast<long>(id)) continue;
              for (size_t oy = 0; oy < oh; ++oy) {
                const long iy = static_cast<long>(oy) * sh - ph + static_cast<long>(ky);
                if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                T* dst = xc + (static_cast<size_t>(iz) * ih + static_cast<size_t>(iy)) * iw;
                const T* src = row + (oz * oh + oy) * ow;
                for (size_t ox = 0; ox < ow; ++ox) {
                  const long ix = static_cast<long>(ox) * sw - pw + static_cast<long>(kx);
                  if (ix >= 0 && ix < static_cast<long>(iw)) dst[ix] += src[ox];
                }
              }
            }
          }
    }
  }
}

inline void validate_conv_args(size_t rank, const std::vector<int>& stride,
                               const std::vector<int>& padding) {
  if (rank != 2 && rank != 3)
    fail(ErrorKind::invalid_shape, "conv supports spatial rank 2 or 3, got " + std::to_string(rank));
  if (stride.size() != rank || padding.size() != rank)
    fail(ErrorKind::invalid_argument, "stride/padding must have one entry per spatial axis");
  for (int s : stride)
    if (s < 1) fail(ErrorKind::invalid_argument, "stride must be >= 1");
  for (int p : padding)
    if (p < 0) fail(ErrorKind::invalid_argument, "padding must be >= 0");
}

}  // namespace detail

// Cross-correlation (no kernel flip): input [N, Cin, s...], kernel
// [Cout, Cin, k...], optional bias [Cout]. Output spatial extent per axis is
// floor((s + 2*pad - k)/stride) + 1.
template <typename T>
TensorT<T> conv_nd(Tape<T>* tape, const TensorT<T>& input, const TensorT<T>& kernel,
                   const TensorT<T>* bias, const std::vector<int>& stride,
                   const std::vector<int>& padding) {
  if (input.rank() < 4 || kernel.rank() != input.rank())
    fail(ErrorKind::invalid_shape, "conv_nd: input " + shape_str(input.shape()) + ", kernel " +
                                       shape_str(kernel.shape()));
  const size_t rank = input.rank() - 2;
  detail::validate_conv_args(rank, stride, padding);
  const size_t batch = input.dim(0), cin = input.dim(1), cout = kernel.dim(0);
  if (kernel.dim(1) != cin)
    fail(ErrorKind::shape_mismatch, "conv_nd channel mismatch: input has " + std::to_string(cin) +
                                        ", kernel expects " + std::to_string(kernel.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
    fail(ErrorKind::shape_mismatch, "conv_nd: bias must be [Cout]");

  detail::ConvGeom g;
  g.channels = cin;
  g.stride = stride;
  g.padding = padding;
  for (size_t i = 0; i < rank; ++i) {
    g.in.push_back(input.dim(2 + i));
    g.kernel.push_back(kernel.dim(2 + i));
    const long span = static_cast<long>(g.in[i]) + 2L * padding[i] - static_cast<long>(g.kernel[i]);
    if (span < 0)
      fail(ErrorKind::invalid_shape, "conv_nd: kernel exceeds padded extent on axis " +
                                         std::to_string(i));
    const size_t out = static_cast<size_t>(span / stride[i]) + 1;
    if (out < 1) fail(ErrorKind::invalid_shape, "conv_nd: output dimension < 1");
    g.out.push_back(out);
  }

  Shape out_shape = {batch, cout};
  out_shape.insert(out_shape.end(), g.out.begin(), g.out.end());
  TensorT<T> out = TensorT<T>::zeros(out_shape);

  const size_t K = g.kernel_elems();
  const size_t CK = cin * K;
  const size_t P = g.out_elems();
  const size_t in_stride = cin * g.in_elems();
  const size_t out_stride = cout * P;

  std::vector<T> cols(CK * P);
  for (size_t n = 0; n < batch; ++n) {
    detail::im2col(g, input.data() + n * in_stride, cols.data());
    detail::gemm(false, false, cout, P, CK, T(1), kernel.data(), cols.data(), T(0),
                 out.data() + n * out_stride);
    if (bias) {
      T* y = out.data() + n * out_stride;
      for (size_t c = 0; c < cout; ++c) {
        const T b = bias->data()[c];
        for (size_t p = 0; p < P; ++p) y[c * P + p] += b;
      }
    }
  }

  if (tape) {
    const bool nx = detail::wants_grad(tape, input);
    const bool nw = detail::wants_grad(tape, kernel);
    const bool nb = bias && detail::wants_grad(tape, *bias);
    if (nx || nw || nb) {
      out.impl()->tape_id = tape->id();
      auto bias_impl = bias ? bias->impl() : nullptr;
      tape->record([g, xi = input.impl(), wi = kernel.impl(), bi = bias_impl, oi = out.impl(),
                    batch, cout, CK, P, in_stride, out_stride, nx, nw, nb] {
        if (oi->grad.empty()) return;
        if (nx) xi->ensure_grad();
        if (nw) wi->ensure_grad();
        if (nb) bi->ensure_grad();
        std::vector<T> cols(CK * P);
        for (size_t n = 0; n < batch; ++n) {
          const T* dy = oi->grad.data() + n * out_stride;
          if (nw) {
            detail::im2col(g, xi->data.data() + n * in_stride, cols.data());
            detail::gemm(false, true, cout, CK, P, T(1), dy, cols.data(), T(1), wi->grad.data());
          }
          if (nx) {
            detail::gemm(true, false, CK, P, cout, T(1), wi->data.data(), dy, T(0), cols.data());
            detail::col2im_acc(g, cols.data(), xi->grad.data() + n * in_stride);
          }
          if (nb) {
            for (size_t c = 0; c < cout; ++c) {
              T acc = T(0);
              for (size_t p = 0; p < P; ++p) acc += dy[c * P + p];
              bi->grad[c] += acc;
            }
          }
        }
      });
    }
  }
  detail::maybe_check_finite(out, "conv_nd");
  return out;
}

// Adjoint of conv_nd. Input [N, Cin, s...], kernel [Cin, Cout, k...]; output
// spatial extent per axis is (s - 1)*stride - 2*pad + k.
template <typename T>
TensorT<T> conv_transpose_nd(Tape<T>* tape, const TensorT<T>& input, const TensorT<T>& kernel,
                             const std::vector<int>& stride, const std::vector<int>& padding) {
  if (input.rank() < 4 || kernel.rank() != input.rank())
    fail(ErrorKind::invalid_shape, "conv_transpose_nd: input " + shape_str(input.shape()) +
                                       ", kernel " + shape_str(kernel.shape()));
  const size_t rank = input.rank() - 2;
  detail::validate_conv_args(rank, stride, padding);
  const size_t batch = input.dim(0), cin = input.dim(1), cout = kernel.dim(1);
  if (kernel.dim(0) != cin)
    fail(ErrorKind::shape_mismatch,
         "conv_transpose_nd channel mismatch: input has " + std::to_string(cin) +
             ", kernel expects " + std::to_string(kernel.dim(0)));

  // The geometry of the regular conv this op is adjoint to: conv maps our
  // output spatial extents onto our input extents.
  detail::ConvGeom g;
  g.channels = cout;
  g.stride = stride;
  g.padding = padding;
  for (size_t i = 0; i < rank; ++i) {
    const size_t s = input.dim(2 + i);
    const size_t k = kernel.dim(2 + i);
    const long outl = (static_cast<long>(s) - 1) * stride[i] - 2L * padding[i] + static_cast<long>(k);
    if (outl < 1) fail(ErrorKind::invalid_shape, "conv_transpose_nd: output dimension < 1");
    g.in.push_back(static_cast<size_t>(outl));  // conv input = our output
    g.out.push_back(s);                         // conv output = our input
    g.kernel.push_back(k);
  }

  Shape out_shape = {batch, cout};
  out_shape.insert(out_shape.end(), g.in.begin(), g.in.end());
  TensorT<T> out = TensorT<T>::zeros(out_shape);

  const size_t K = g.kernel_elems();
  const size_t CK = cout * K;
  const size_t P = g.out_elems();   // equals our input spatial elems
  const size_t in_stride = cin * P;
  const size_t out_stride = cout * g.in_elems();

  std::vector<T> cols(CK * P);
  for (size_t n = 0; n < batch; ++n) {
    // cols = W^T x; scatter columns into the upsampled output.
    detail::gemm(true, false, CK, P, cin, T(1), kernel.data(), input.data() + n * in_stride, T(0),
                 cols.data());
    detail::col2im_acc(g, cols.data(), out.data() + n * out_stride);
  }

  if (tape) {
    const bool nx = detail::wants_grad(tape, input);
    const bool nw = detail::wants_grad(tape, kernel);
    if (nx || nw) {
      out.impl()->tape_id = tape->id();
      tape->record([g, xi = input.impl(), wi = kernel.impl(), oi = out.impl(), batch, cin, CK, P,
                    in_stride, out_stride, nx, nw] {
        if (oi->grad.empty()) return;
        if (nx) xi->ensure_grad();
        if (nw) wi->ensure_grad();
        std::vector<T> cols(CK * P);
        for (size_t n = 0; n < batch; ++n) {
          detail::im2col(g, oi->grad.data() + n * out_stride, cols.data());
          if (nx)
            detail::gemm(false, false, cin, P, CK, T(1), wi->data.data(), cols.data(), T(1),
                         xi->grad.data() + n * in_stride);
          if (nw)
            detail::gemm(false, true, cin, CK, P, T(1), xi->data.data() + n * in_stride,
                         cols.data(), T(1), wi->grad.data());
        }
      });
    }
  }
  detail::maybe_check_finite(out, "conv_transpose_nd");
  return out;
}

// Batch normalization over batch + spatial per channel. Train mode uses the
// (biased) batch statistics, updates the running buffers in place with
// running <- (1 - momentum)*running + momentum*batch_stat (running_var gets
// the unbiased batch variance), and differentiates through the statistics.
// Eval mode normalizes with the running buffers.
template <typename T>
TensorT<T> batch_norm_nd(Tape<T>* tape, const TensorT<T>& input, const TensorT<T>& gamma,
                         const TensorT<T>& beta, TensorT<T>& running_mean, TensorT<T>& running_var,
                         bool training, double eps, double momentum) {
  if (input.rank() < 3)
    fail(ErrorKind::invalid_shape, "batch_norm_nd: input must be [N, C, spatial...]");
  const size_t batch = input.dim(0), channels = input.dim(1);
  size_t spatial = 1;
  for (size_t i = 2; i < input.rank(); ++i) spatial *= input.dim(i);
  auto check_c = [&](const TensorT<T>& t, const char* name) {
    if (t.rank() != 1 || t.dim(0) != channels)
      fail(ErrorKind::shape_mismatch, std::string("batch_norm_nd: ") + name + " must be [C]");
  };
  check_c(gamma, "gamma");
  check_c(beta, "beta");
  check_c(running_mean, "running_mean");
  check_c(running_var, "running_var");

  const size_t m = batch * spatial;  // elements per channel
  TensorT<T> out = TensorT<T>::zeros(input.shape());
  const T* px = input.data();
  T* po = out.data();
  const size_t cstride = channels * spatial;

  if (training) {
    if (m < 2)
      fail(ErrorKind::degenerate_batch, "batch_norm_nd: need >= 2 elements per channel in train mode");
    std::vector<T> mean(channels, T(0)), var(channels, T(0)), inv(channels, T(0));
    for (size_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (size_t n = 0; n < batch; ++n) {
        const T* src = px + n * cstride + c * spatial;
        for (size_t s = 0; s < spatial; ++s) acc += src[s];
      }
      mean[c] = acc / T(m);
      T vacc = T(0);
      for (size_t n = 0; n < batch; ++n) {
        const T* src = px + n * cstride + c * spatial;
        for (size_t s = 0; s < spatial; ++s) {
          const T d = src[s] - mean[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / T(m);
      inv[c] = T(1) / std::sqrt(var[c] + static_cast<T>(eps));
    }

    auto xhat = std::make_shared<std::vector<T>>(input.size());
    for (size_t c = 0; c < channels; ++c) {
      const T g = gamma.data()[c], b = beta.data()[c];
      for (size_t n = 0; n < batch; ++n) {
        const size_t off = n * cstride + c * spatial;
        for (size_t s = 0; s < spatial; ++s) {
          const T xh = (px[off + s] - mean[c]) * inv[c];
          (*xhat)[off + s] = xh;
          po[off + s] = g * xh + b;
        }
      }
    }

    const T mom = static_cast<T>(momentum);
    const T unbias = T(m) / T(m - 1);
    for (size_t c = 0; c < channels; ++c) {
      running_mean.data()[c] = (T(1) - mom) * running_mean.data()[c] + mom * mean[c];
      running_var.data()[c] = (T(1) - mom) * running_var.data()[c] + mom * var[c] * unbias;
    }

    if (tape) {
      const bool nx = detail::wants_grad(tape, input);
      const bool ng = detail::wants_grad(tape, gamma);
      const bool nb = detail::wants_grad(tape, beta);
      if (nx || ng || nb) {
        out.impl()->tape_id = tape->id();
        tape->record([xi = input.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(),
                      xhat, inv, batch, channels, spatial, cstride, m, nx, ng, nb] {
          if (oi->grad.empty()) return;
          if (nx) xi->ensure_grad();
          if (ng) gi->ensure_grad();
          if (nb) bi->ensure_grad();
          for (size_t c = 0; c < channels; ++c) {
            T sum_dy = T(0), sum_dy_xh = T(0);
            for (size_t n = 0; n < batch; ++n) {
              const size_t off = n * cstride + c * spatial;
              for (size_t s = 0; s < spatial; ++s) {
                sum_dy += oi->grad[off + s];
                sum_dy_xh += oi->grad[off + s] * (*xhat)[off + s];
              }
            }
            if (ng) gi->grad[c] += sum_dy_xh;
            if (nb) bi->grad[c] += sum_dy;
            if (nx) {
              const T gv = gi->data[c];
              const T k1 = sum_dy / T(m), k2 = sum_dy_xh / T(m);
              for (size_t n = 0; n < batch; ++n) {
                const size_t off = n * cstride + c * spatial;
                for (size_t s = 0; s < spatial; ++s)
                  xi->grad[off + s] +=
                      gv * inv[c] * (oi->grad[off + s] - k1 - (*xhat)[off + s] * k2);
              }
            }
          }
        });
      }
    }
  } else {
    std::vector<T> inv(channels);
    std::vector<T> rm(running_mean.data(), running_mean.data() + channels);
    for (size_t c = 0; c < channels; ++c)
      inv[c] = T(1) / std::sqrt(running_var.data()[c] + static_cast<T>(eps));
    for (size_t c = 0; c < channels; ++c) {
      const T g = gamma.data()[c], b = beta.data()[c];
      for (size_t n = 0; n < batch; ++n) {
        const size_t off = n * cstride + c * spatial;
        for (size_t s = 0; s < spatial; ++s) po[off + s] = g * (px[off + s] - rm[c]) * inv[c] + b;
      }
    }
    if (tape) {
      const bool nx = detail::wants_grad(tape, input);
      const bool ng = detail::wants_grad(tape, gamma);
      const bool nb = detail::wants_grad(tape, beta);
      if (nx || ng || nb) {
        out.impl()->tape_id = tape->id();
        tape->record([xi = input.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(),
                      inv = std::move(inv), rm = std::move(rm), batch, channels, spatial, cstride,
                      nx, ng, nb] {
          if (oi->grad.empty()) return;
          if (nx) xi->ensure_grad();
          if (ng) gi->ensure_grad();
          if (nb) bi->ensure_grad();
          for (size_t c = 0; c < channels; ++c) {
            const T gv = gi->data[c];
            T sum_dy = T(0), sum_dy_xh = T(0);
            for (size_t n = 0; n < batch; ++n) {
              const size_t off = n * cstride + c * spatial;
              for (size_t s = 0; s < spatial; ++s) {
                const T dy = oi->grad[off + s];
                sum_dy += dy;
                sum_dy_xh += dy * (xi->data[off + s] - rm[c]) * inv[c];
                if (nx) xi->grad[off + s] += dy * gv * inv[c];
              }
            }
            if (ng) gi->grad[c] += sum_dy_xh;
            if (nb) bi->grad[c] += sum_dy;
          }
        });
      }
    }
  }
  detail::maybe_check_finite(out, "batch_norm_nd");
  return out;
}

}  // namespace segviz
