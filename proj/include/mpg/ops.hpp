#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "mpg/tensor.hpp"

namespace mpg {

enum class Mode { kTrain, kEval };
enum class ConvBackend { kIm2col, kDirect };

namespace detail {

// C[m, 0..n) += sum_k A[m, k] * B[k, 0..n). Each output row is produced by a
// single thread with a fixed inner order, so results do not depend on the
// thread count.
template <typename T>
void gemm_nn(int M, int K, int N, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    T* crow = c + static_cast<long>(m) * N;
    const T* arow = a + static_cast<long>(m) * K;
    for (int k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + static_cast<long>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[m, q] += dot(A[m, 0..k), B[q, 0..k))
template <typename T>
void gemm_nt(int M, int Q, int K, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const T* arow = a + static_cast<long>(m) * K;
    T* crow = c + static_cast<long>(m) * Q;
    for (int q = 0; q < Q; ++q) {
      const T* brow = b + static_cast<long>(q) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[q] += acc;
    }
  }
}

// C[q, 0..n) += sum_m A[m, q] * B[m, 0..n)
template <typename T>
void gemm_tn(int M, int Q, int N, const T* a, const T* b, T* c) {
#pragma omp parallel for schedule(static)
  for (int q = 0; q < Q; ++q) {
    T* crow = c + static_cast<long>(q) * N;
    for (int m = 0; m < M; ++m) {
      const T av = a[static_cast<long>(m) * Q + q];
      const T* brow = b + static_cast<long>(m) * N;
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// Patch expansion for one batch item: cols[(ic*k + ky)*k + kx, oh*W + ow].
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int pad, T* cols) {
  const int P = H * W;
  for (int ic = 0; ic < C; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols + (static_cast<long>(ic) * k * k + ky * k + kx) * P;
        for (int oh = 0; oh < H; ++oh) {
          const int iy = oh + ky - pad;
          if (iy < 0 || iy >= H) {
            std::fill(dst + static_cast<long>(oh) * W, dst + static_cast<long>(oh + 1) * W, T(0));
            continue;
          }
          const T* src = x + (static_cast<long>(ic) * H + iy) * W;
          for (int ow = 0; ow < W; ++ow) {
            const int ix = ow + kx - pad;
            dst[static_cast<long>(oh) * W + ow] = (ix < 0 || ix >= W) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back into the input layout.
template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, int pad, T* dx) {
  const int P = H * W;
  for (int ic = 0; ic < C; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols + (static_cast<long>(ic) * k * k + ky * k + kx) * P;
        for (int oh = 0; oh < H; ++oh) {
          const int iy = oh + ky - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + (static_cast<long>(ic) * H + iy) * W;
          for (int ow = 0; ow < W; ++ow) {
            const int ix = ow + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[static_cast<long>(oh) * W + ow];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward_im2col(const T* x, const T* w, const T* b, T* y, int N, int Cin, int H,
                           int W, int Cout, int k, int pad) {
  const int P = H * W;
  const int K2 = Cin * k * k;
  std::vector<T> cols(static_cast<size_t>(K2) * P);
  for (int n = 0; n < N; ++n) {
    im2col(x + static_cast<long>(n) * Cin * P, Cin, H, W, k, pad, cols.data());
    T* yn = y + static_cast<long>(n) * Cout * P;
    for (int oc = 0; oc < Cout; ++oc)
      std::fill(yn + static_cast<long>(oc) * P, yn + static_cast<long>(oc + 1) * P, b[oc]);
    gemm_nn(Cout, K2, P, w, cols.data(), yn);
  }
}

template <typename T>
void conv2d_forward_direct(const T* x, const T* w, const T* b, T* y, int N, int Cin, int H,
                           int W, int Cout, int k, int pad) {
#pragma omp parallel for schedule(static) collapse(2)
  for (int n = 0; n < N; ++n) {
    for (int oc = 0; oc < Cout; ++oc) {
      for (int oh = 0; oh < H; ++oh) {
        for (int ow = 0; ow < W; ++ow) {
          T acc = b[oc];
          for (int ic = 0; ic < Cin; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oh + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ow + kx - pad;
                if (ix < 0 || ix >= W) continue;
                acc += x[((static_cast<long>(n) * Cin + ic) * H + iy) * W + ix] *
                       w[((static_cast<long>(oc) * Cin + ic) * k + ky) * k + kx];
              }
            }
          }
          y[((static_cast<long>(n) * Cout + oc) * H + oh) * W + ow] = acc;
        }
      }
    }
  }
}

}  // namespace detail

// 2D convolution, stride 1, "same" padding. weight is (C_out, C_in, k, k),
// bias is (1, C_out, 1, 1). Differentiable w.r.t. input, weight and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = -1,
                 ConvBackend backend = ConvBackend::kIm2col) {
  const Shape4 xs = input.shape();
  const Shape4 ws = weight.shape();
  const int k = ws.h;
  if (padding < 0) padding = (k - 1) / 2;
  if (ws.h != ws.w || (k != 1 && k != 3))
    throw ConfigError("conv2d supports square 1x1 or 3x3 kernels, got weight " + ws.str());
  if (stride != 1) throw ConfigError("conv2d supports stride 1, got " + std::to_string(stride));
  if (padding != (k - 1) / 2)
    throw ConfigError("conv2d requires same-padding (k-1)/2, got " + std::to_string(padding));
  if (xs.c != ws.c)
    throw ConfigError("conv2d channel mismatch: input " + xs.str() + " vs weight " + ws.str());
  if (bias.shape().c != ws.n || bias.size() != ws.n)
    throw ConfigError("conv2d bias shape " + bias.shape().str() + " does not match C_out " +
                      std::to_string(ws.n));

  Tensor<T> out = Tensor<T>::zeros({xs.n, ws.n, xs.h, xs.w});
  if (backend == ConvBackend::kIm2col)
    detail::conv2d_forward_im2col(input.data(), weight.data(), bias.data(), out.data(), xs.n,
                                  xs.c, xs.h, xs.w, ws.n, k, padding);
  else
    detail::conv2d_forward_direct(input.data(), weight.data(), bias.data(), out.data(), xs.n,
                                  xs.c, xs.h, xs.w, ws.n, k, padding);

  if (detail::tracing<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto wi = weight.impl();
    auto bi = bias.impl();
    auto oi = out.impl();
    const int pad = padding;
    Tape<T>::active()->record([xi, wi, bi, oi, k, pad] {
      if (oi->grad.empty()) return;
      const Shape4 xs = xi->shape;
      const int N = xs.n, Cin = xs.c, H = xs.h, W = xs.w;
      const int Cout = wi->shape.n;
      const int P = H * W;
      const int K2 = Cin * k * k;
      const T* dy = oi->grad.data();

      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->value.size(), T(0));
        for (int oc = 0; oc < Cout; ++oc) {
          T acc = T(0);
          for (int n = 0; n < N; ++n) {
            const T* row = dy + (static_cast<long>(n) * Cout + oc) * P;
            for (int p = 0; p < P; ++p) acc += row[p];
          }
          bi->grad[oc] += acc;
        }
      }

      std::vector<T> cols;
      if (wi->requires_grad || xi->requires_grad) cols.resize(static_cast<size_t>(K2) * P);

      if (wi->requires_grad) {
        if (wi->grad.empty()) wi->grad.assign(wi->value.size(), T(0));
        for (int n = 0; n < N; ++n) {
          detail::im2col(xi->value.data() + static_cast<long>(n) * Cin * P, Cin, H, W, k, pad,
                         cols.data());
          detail::gemm_nt(Cout, K2, P, dy + static_cast<long>(n) * Cout * P, cols.data(),
                          wi->grad.data());
        }
      }

      if (xi->requires_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
        for (int n = 0; n < N; ++n) {
          std::fill(cols.begin(), cols.end(), T(0));
          detail::gemm_tn(Cout, K2, P, wi->value.data(), dy + static_cast<long>(n) * Cout * P,
                          cols.data());
          detail::col2im_add(cols.data(), Cin, H, W, k, pad,
                             xi->grad.data() + static_cast<long>(n) * Cin * P);
        }
      }
    });
  }
  return out;
}

template <typename T>
struct BnStats {
  std::vector<T> mean;
  std::vector<T> var;
  bool initialized = false;
};

// Batch normalization over (N, H, W) per channel. Train mode normalizes with
// batch statistics and updates the running stats by EMA; eval mode uses the
// running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BnStats<T>& stats, Mode mode, T eps = T(1e-5), T momentum = T(0.9)) {
  const Shape4 xs = input.shape();
  const int C = xs.c;
  if (gamma.size() != C || beta.size() != C)
    throw ConfigError("batch_norm gamma/beta length must equal channels " + std::to_string(C));
  if (mode == Mode::kEval && !stats.initialized)
    throw UsageError("batch_norm: uninitialized statistics (eval before any training step)");

  const long R = static_cast<long>(xs.n) * xs.h * xs.w;  // reduction count per channel
  const long plane = static_cast<long>(xs.h) * xs.w;

  std::vector<T> mean(C), var(C);
  if (mode == Mode::kTrain) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = input.data() + (static_cast<long>(n) * C + c) * plane;
        for (long i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(R);
      double sq = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = input.data() + (static_cast<long>(n) * C + c) * plane;
        for (long i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      mean[c] = static_cast<T>(m);
      var[c] = static_cast<T>(sq / static_cast<double>(R));
    }
    if (!stats.initialized) {
      stats.mean = mean;
      stats.var = var;
      stats.initialized = true;
    } else {
      for (int c = 0; c < C; ++c) {
        stats.mean[c] = momentum * stats.mean[c] + (T(1) - momentum) * mean[c];
        stats.var[c] = momentum * stats.var[c] + (T(1) - momentum) * var[c];
      }
    }
  } else {
    mean = stats.mean;
    var = stats.var;
  }

  Tensor<T> out = Tensor<T>::zeros(xs);
  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = input.data() + (static_cast<long>(n) * C + c) * plane;
      T* q = out.data() + (static_cast<long>(n) * C + c) * plane;
      const T g = gamma.data()[c], b = beta.data()[c], m = mean[c], is = inv_std[c];
      for (long i = 0; i < plane; ++i) q[i] = g * (p[i] - m) * is + b;
    }
  }

  if (detail::tracing<T>({&input, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    auto oi = out.impl();
    const bool train_mode = (mode == Mode::kTrain);
    Tape<T>::active()->record([xi, gi, bi, oi, mean, inv_std, train_mode, R, plane, C] {
      if (oi->grad.empty()) return;
      const Shape4 xs = xi->shape;
      const T* dy = oi->grad.data();

      // dgamma_c = sum dy*xhat, dbeta_c = sum dy
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < C; ++c) {
          const T* xp = xi->value.data() + (static_cast<long>(n) * C + c) * plane;
          const T* gp = dy + (static_cast<long>(n) * C + c) * plane;
          double sd = 0.0, sx = 0.0;
          for (long i = 0; i < plane; ++i) {
            const double xhat = (xp[i] - mean[c]) * inv_std[c];
            sd += gp[i];
            sx += gp[i] * xhat;
          }
          sum_dy[c] += sd;
          sum_dy_xhat[c] += sx;
        }
      }
      if (gi->requires_grad) {
        if (gi->grad.empty()) gi->grad.assign(gi->value.size(), T(0));
        for (int c = 0; c < C; ++c) gi->grad[c] += static_cast<T>(sum_dy_xhat[c]);
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->value.size(), T(0));
        for (int c = 0; c < C; ++c) bi->grad[c] += static_cast<T>(sum_dy[c]);
      }
      if (xi->requires_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
        for (int n = 0; n < xs.n; ++n) {
          for (int c = 0; c < C; ++c) {
            const T* xp = xi->value.data() + (static_cast<long>(n) * C + c) * plane;
            const T* gp = dy + (static_cast<long>(n) * C + c) * plane;
            T* dx = xi->grad.data() + (static_cast<long>(n) * C + c) * plane;
            const T g = gi->value[c], is = inv_std[c];
            if (train_mode) {
              const T mdy = static_cast<T>(sum_dy[c] / static_cast<double>(R));
              const T mdyx = static_cast<T>(sum_dy_xhat[c] / static_cast<double>(R));
              for (long i = 0; i < plane; ++i) {
                const T xhat = (xp[i] - mean[c]) * is;
                dx[i] += g * is * (gp[i] - mdy - xhat * mdyx);
              }
            } else {
              for (long i = 0; i < plane; ++i) dx[i] += g * is * gp[i];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const long n = input.size();
  for (long i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const long n = static_cast<long>(xi->value.size());
      for (long i = 0; i < n; ++i)
        if (xi->value[i] > T(0)) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const long n = input.size();
  // clamp saturated values to the nearest representable neighbors so outputs
  // stay strictly inside (0,1)
  const T hi = std::nextafter(T(1), T(0));
  const T lo = std::numeric_limits<T>::min();
  for (long i = 0; i < n; ++i) {
    const T v = T(1) / (T(1) + std::exp(-x[i]));
    y[i] = v >= T(1) ? hi : (v <= T(0) ? lo : v);
  }
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const long n = static_cast<long>(xi->value.size());
      for (long i = 0; i < n; ++i) {
        const T s = oi->value[i];
        xi->grad[i] += oi->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

// Per-pixel softmax over the channel axis, computed with max-subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  const Shape4 s = input.shape();
  if (s.c < 2) throw ConfigError("softmax_channels requires at least 2 channels, got " + s.str());
  Tensor<T> out = Tensor<T>::zeros(s);
  const long plane = static_cast<long>(s.h) * s.w;
  const T* x = input.data();
  T* y = out.data();
  for (int n = 0; n < s.n; ++n) {
    const long base = static_cast<long>(n) * s.c * plane;
    for (long p = 0; p < plane; ++p) {
      T mx = x[base + p];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, x[base + c * plane + p]);
      T sum = T(0);
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(x[base + c * plane + p] - mx);
        y[base + c * plane + p] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < s.c; ++c) y[base + c * plane + p] *= inv;
    }
  }
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi, plane] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const Shape4 s = xi->shape;
      const T* y = oi->value.data();
      const T* dy = oi->grad.data();
      for (int n = 0; n < s.n; ++n) {
        const long base = static_cast<long>(n) * s.c * plane;
        for (long p = 0; p < plane; ++p) {
          T dot = T(0);
          for (int c = 0; c < s.c; ++c) dot += dy[base + c * plane + p] * y[base + c * plane + p];
          for (int c = 0; c < s.c; ++c) {
            const long i = base + c * plane + p;
            xi->grad[i] += y[i] * (dy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// 2x2 max pooling, stride 2. Gradient routes to the argmax; ties resolve to
// the first element in row-major order.
template <typename T>
Tensor<T> max_pool2(const Tensor<T>& input) {
  const Shape4 s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ConfigError("max_pool2 requires even H and W, got " + s.str());
  const int OH = s.h / 2, OW = s.w / 2;
  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, OH, OW});
  std::vector<int32_t> argmax(static_cast<size_t>(out.size()));
  const T* x = input.data();
  T* y = out.data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x + (static_cast<long>(n) * s.c + c) * s.h * s.w;
      T* yp = y + (static_cast<long>(n) * s.c + c) * OH * OW;
      int32_t* ap = argmax.data() + (static_cast<long>(n) * s.c + c) * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          T best = xp[(2 * oh) * s.w + 2 * ow];
          int32_t bi = (2 * oh) * s.w + 2 * ow;
          const int offs[3][2] = {{0, 1}, {1, 0}, {1, 1}};
          for (auto& o : offs) {
            const int32_t i = (2 * oh + o[0]) * s.w + 2 * ow + o[1];
            if (xp[i] > best) {
              best = xp[i];
              bi = i;
            }
          }
          yp[oh * OW + ow] = best;
          ap[oh * OW + ow] = bi;
        }
      }
    }
  }
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi, argmax = std::move(argmax), OH, OW] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const Shape4 s = xi->shape;
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const long ob = (static_cast<long>(n) * s.c + c) * OH * OW;
          const long ib = (static_cast<long>(n) * s.c + c) * s.h * s.w;
          for (long p = 0; p < static_cast<long>(OH) * OW; ++p)
            xi->grad[ib + argmax[ob + p]] += oi->grad[ob + p];
        }
      }
    });
  }
  return out;
}

namespace detail {

// Sample positions for 2x bilinear upsampling, align-corners=false:
// source = (out + 0.5) / 2 - 0.5, clamped to the input range.
struct BilinearTap {
  int lo, hi;
  double t;  // weight of hi
};

inline BilinearTap bilinear_tap(int out_idx, int in_len) {
  const double src = (out_idx + 0.5) / 2.0 - 0.5;
  double f = std::floor(src);
  double t = src - f;
  int lo = static_cast<int>(f);
  int hi = lo + 1;
  lo = std::clamp(lo, 0, in_len - 1);
  hi = std::clamp(hi, 0, in_len - 1);
  return {lo, hi, t};
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear2(const Tensor<T>& input) {
  const Shape4 s = input.shape();
  const int OH = s.h * 2, OW = s.w * 2;
  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, OH, OW});
  std::vector<detail::BilinearTap> ty(OH), tx(OW);
  for (int i = 0; i < OH; ++i) ty[i] = detail::bilinear_tap(i, s.h);
  for (int i = 0; i < OW; ++i) tx[i] = detail::bilinear_tap(i, s.w);
  const T* x = input.data();
  T* y = out.data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x + (static_cast<long>(n) * s.c + c) * s.h * s.w;
      T* yp = y + (static_cast<long>(n) * s.c + c) * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        const auto& a = ty[oh];
        for (int ow = 0; ow < OW; ++ow) {
          const auto& b = tx[ow];
          const double v00 = xp[a.lo * s.w + b.lo], v01 = xp[a.lo * s.w + b.hi];
          const double v10 = xp[a.hi * s.w + b.lo], v11 = xp[a.hi * s.w + b.hi];
          yp[oh * OW + ow] = static_cast<T>((1 - a.t) * ((1 - b.t) * v00 + b.t * v01) +
                                            a.t * ((1 - b.t) * v10 + b.t * v11));
        }
      }
    }
  }
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi, ty = std::move(ty), tx = std::move(tx), OH, OW] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const Shape4 s = xi->shape;
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          T* dx = xi->grad.data() + (static_cast<long>(n) * s.c + c) * s.h * s.w;
          const T* dy = oi->grad.data() + (static_cast<long>(n) * s.c + c) * OH * OW;
          for (int oh = 0; oh < OH; ++oh) {
            const auto& a = ty[oh];
            for (int ow = 0; ow < OW; ++ow) {
              const auto& b = tx[ow];
              const T g = dy[oh * OW + ow];
              dx[a.lo * s.w + b.lo] += static_cast<T>((1 - a.t) * (1 - b.t)) * g;
              dx[a.lo * s.w + b.hi] += static_cast<T>((1 - a.t) * b.t) * g;
              dx[a.hi * s.w + b.lo] += static_cast<T>(a.t * (1 - b.t)) * g;
              dx[a.hi * s.w + b.hi] += static_cast<T>(a.t * b.t) * g;
            }
          }
        }
      }
    });
  }
  return out;
}

// Per-channel spatial mean, output (N, C, 1, 1).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape4 s = input.shape();
  Tensor<T> out = Tensor<T>::zeros({s.n, s.c, 1, 1});
  const long plane = static_cast<long>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.data() + (static_cast<long>(n) * s.c + c) * plane;
      T acc = T(0);
      for (long i = 0; i < plane; ++i) acc += p[i];
      out.data()[static_cast<long>(n) * s.c + c] = acc / static_cast<T>(plane);
    }
  }
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi, plane] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const Shape4 s = xi->shape;
      const T inv = T(1) / static_cast<T>(plane);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const T g = oi->grad[static_cast<long>(n) * s.c + c] * inv;
          T* dx = xi->grad.data() + (static_cast<long>(n) * s.c + c) * plane;
          for (long i = 0; i < plane; ++i) dx[i] += g;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> elementwise_add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ConfigError("elementwise_add shape mismatch: " + a.shape().str() + " vs " +
                      b.shape().str());
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      const long n = static_cast<long>(oi->grad.size());
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->value.size(), T(0));
        for (long i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->value.size(), T(0));
        for (long i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

namespace detail {

inline bool is_gate_of(const Shape4& gate, const Shape4& full) {
  return gate.n == full.n && gate.c == full.c && gate.h == 1 && gate.w == 1 &&
         !(full.h == 1 && full.w == 1);
}

}  // namespace detail

// Elementwise product. Also accepts one (N, C, 1, 1) operand broadcast over
// (N, C, H, W) — the channel-gate case.
template <typename T>
Tensor<T> elementwise_mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4 as = a.shape(), bs = b.shape();
  const bool b_gate = detail::is_gate_of(bs, as);
  const bool a_gate = !b_gate && detail::is_gate_of(as, bs);
  if (!(as == bs) && !a_gate && !b_gate)
    throw ConfigError("elementwise_mul shape mismatch: " + as.str() + " vs " + bs.str());
  const Tensor<T>& full = a_gate ? b : a;
  const Tensor<T>& gate = a_gate ? a : b;
  const bool broadcast = a_gate || b_gate;
  const Shape4 fs = full.shape();
  Tensor<T> out = Tensor<T>::zeros(fs);
  const long plane = static_cast<long>(fs.h) * fs.w;
  if (!broadcast) {
    const long n = a.size();
    for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  } else {
    for (int n = 0; n < fs.n; ++n) {
      for (int c = 0; c < fs.c; ++c) {
        const T g = gate.data()[static_cast<long>(n) * fs.c + c];
        const T* p = full.data() + (static_cast<long>(n) * fs.c + c) * plane;
        T* q = out.data() + (static_cast<long>(n) * fs.c + c) * plane;
        for (long i = 0; i < plane; ++i) q[i] = p[i] * g;
      }
    }
  }
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto fi = full.impl();
    auto gi = gate.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([fi, gi, oi, broadcast, plane] {
      if (oi->grad.empty()) return;
      const Shape4 fs = fi->shape;
      if (!broadcast) {
        const long n = static_cast<long>(oi->grad.size());
        if (fi->requires_grad) {
          if (fi->grad.empty()) fi->grad.assign(fi->value.size(), T(0));
          for (long i = 0; i < n; ++i) fi->grad[i] += oi->grad[i] * gi->value[i];
        }
        if (gi->requires_grad) {
          if (gi->grad.empty()) gi->grad.assign(gi->value.size(), T(0));
          for (long i = 0; i < n; ++i) gi->grad[i] += oi->grad[i] * fi->value[i];
        }
        return;
      }
      if (fi->requires_grad) {
        if (fi->grad.empty()) fi->grad.assign(fi->value.size(), T(0));
        for (int n = 0; n < fs.n; ++n) {
          for (int c = 0; c < fs.c; ++c) {
            const T g = gi->value[static_cast<long>(n) * fs.c + c];
            const long base = (static_cast<long>(n) * fs.c + c) * plane;
            for (long i = 0; i < plane; ++i) fi->grad[base + i] += oi->grad[base + i] * g;
          }
        }
      }
      if (gi->requires_grad) {
        if (gi->grad.empty()) gi->grad.assign(gi->value.size(), T(0));
        for (int n = 0; n < fs.n; ++n) {
          for (int c = 0; c < fs.c; ++c) {
            const long base = (static_cast<long>(n) * fs.c + c) * plane;
            T acc = T(0);
            for (long i = 0; i < plane; ++i) acc += oi->grad[base + i] * fi->value[base + i];
            gi->grad[static_cast<long>(n) * fs.c + c] += acc;
          }
        }
      }
    });
  }
  return out;
}

// Channel concatenation, a's channels first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4 as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw ConfigError("concat_channels requires matching N/H/W: " + as.str() + " vs " + bs.str());
  Tensor<T> out = Tensor<T>::zeros({as.n, as.c + bs.c, as.h, as.w});
  const long plane = static_cast<long>(as.h) * as.w;
  for (int n = 0; n < as.n; ++n) {
    std::memcpy(out.data() + static_cast<long>(n) * (as.c + bs.c) * plane,
                a.data() + static_cast<long>(n) * as.c * plane,
                sizeof(T) * as.c * plane);
    std::memcpy(out.data() + (static_cast<long>(n) * (as.c + bs.c) + as.c) * plane,
                b.data() + static_cast<long>(n) * bs.c * plane,
                sizeof(T) * bs.c * plane);
  }
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([ai, bi, oi, plane] {
      if (oi->grad.empty()) return;
      const int Ca = ai->shape.c, Cb = bi->shape.c, N = ai->shape.n;
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->value.size(), T(0));
        for (int n = 0; n < N; ++n) {
          const T* src = oi->grad.data() + static_cast<long>(n) * (Ca + Cb) * plane;
          T* dst = ai->grad.data() + static_cast<long>(n) * Ca * plane;
          for (long i = 0; i < static_cast<long>(Ca) * plane; ++i) dst[i] += src[i];
        }
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->value.size(), T(0));
        for (int n = 0; n < N; ++n) {
          const T* src = oi->grad.data() + (static_cast<long>(n) * (Ca + Cb) + Ca) * plane;
          T* dst = bi->grad.data() + static_cast<long>(n) * Cb * plane;
          for (long i = 0; i < static_cast<long>(Cb) * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T s) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const long n = input.size();
  for (long i = 0; i < n; ++i) out.data()[i] = input.data()[i] * s;
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi, s] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const long n = static_cast<long>(xi->value.size());
      for (long i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

// Sum of all elements, output (1, 1, 1, 1).
template <typename T>
Tensor<T> sum_all(const Tensor<T>& input) {
  T acc = T(0);
  const long n = input.size();
  for (long i = 0; i < n; ++i) acc += input.data()[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::tracing<T>({&input})) {
    out.set_requires_grad(true);
    auto xi = input.impl();
    auto oi = out.impl();
    Tape<T>::active()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->value.size(), T(0));
      const T g = oi->grad[0];
      const long n = static_cast<long>(xi->value.size());
      for (long i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

}  // namespace mpg
