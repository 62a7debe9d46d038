#include "freqcoda/layers.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <limits>
#include <string>
#include <type_traits>

#include "freqcoda/kernels.hpp"
#include "freqcoda/parallel.hpp"

namespace freqcoda::nn {
namespace {

// C += A * B (row-major, m x k by k x n)
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().gemm_nn(m, n, k, a, k, b, n, c, n);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
      }
  }
}

// C += A^T * B, A stored k x m.
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().gemm_tn(m, n, k, a, m, b, n, c, n);
  } else {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[p * m + i];
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
      }
  }
}

// C += A * B^T, B stored n x k.
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().gemm_nt(m, n, k, a, k, b, k, c, n);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

struct ConvShape {
  std::size_t n, c, h, w, o, k, oh, ow;
  std::size_t col_rows() const { return c * k * k; }
  std::size_t col_cols() const { return oh * ow; }
};

template <class T>
ConvShape conv_shape(const BasicTensor<T>& input, const BasicTensor<T>& weight, ConvGeom geom) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != input.dim(1))
    throw InvalidShape("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                       " input channels, input has " + std::to_string(input.dim(1)));
  if (weight.dim(2) != weight.dim(3)) throw InvalidShape("conv2d: kernel must be square");
  if (geom.stride == 0) throw InvalidArgument("conv2d: stride must be >= 1");
  ConvShape s{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2), 0, 0};
  if (s.h + 2 * geom.pad < s.k || s.w + 2 * geom.pad < s.k)
    throw InvalidShape("conv2d: kernel larger than padded input");
  s.oh = (s.h + 2 * geom.pad - s.k) / geom.stride + 1;
  s.ow = (s.w + 2 * geom.pad - s.k) / geom.stride + 1;
  return s;
}

// Output columns [lo, hi) read inside the input row for kernel offset kx.
struct ColumnRange {
  std::size_t lo;
  std::size_t hi;
};

inline ColumnRange valid_columns(std::size_t ow, std::size_t w, std::size_t stride, long offset) {
  // ix = ox * stride + offset must lie in [0, w)
  std::size_t lo = 0;
  if (offset < 0) lo = static_cast<std::size_t>((-offset + static_cast<long>(stride) - 1) / static_cast<long>(stride));
  const long last = static_cast<long>(w) - 1 - offset;
  std::size_t hi = last < 0 ? 0 : static_cast<std::size_t>(last) / stride + 1;
  hi = std::min(hi, ow);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <class T>
void im2col(const T* in, const ConvShape& s, ConvGeom g, T* col) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t ky = 0; ky < s.k; ++ky)
      for (std::size_t kx = 0; kx < s.k; ++kx) {
        T* row = col + ((c * s.k + ky) * s.k + kx) * s.oh * s.ow;
        const long offset = static_cast<long>(kx) - pad;
        const ColumnRange r = valid_columns(s.ow, s.w, g.stride, offset);
        for (std::size_t oy = 0; oy < s.oh; ++oy) {
          T* dst = row + oy * s.ow;
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(s.h)) {
            std::fill(dst, dst + s.ow, T{0});
            continue;
          }
          const T* src = in + (c * s.h + static_cast<std::size_t>(iy)) * s.w;
          std::fill(dst, dst + r.lo, T{0});
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(r.lo) + offset), src + (static_cast<long>(r.hi) + offset), dst + r.lo);
          } else {
            for (std::size_t ox = r.lo; ox < r.hi; ++ox)
              dst[ox] = src[static_cast<long>(ox * g.stride) + offset];
          }
          std::fill(dst + r.hi, dst + s.ow, T{0});
        }
      }
}

template <class T>
void col2im(const T* col, const ConvShape& s, ConvGeom g, T* in) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t ky = 0; ky < s.k; ++ky)
      for (std::size_t kx = 0; kx < s.k; ++kx) {
        const T* row = col + ((c * s.k + ky) * s.k + kx) * s.oh * s.ow;
        const long offset = static_cast<long>(kx) - pad;
        const ColumnRange r = valid_columns(s.ow, s.w, g.stride, offset);
        for (std::size_t oy = 0; oy < s.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
          const T* src = row + oy * s.ow;
          T* dst = in + (c * s.h + static_cast<std::size_t>(iy)) * s.w;
          for (std::size_t ox = r.lo; ox < r.hi; ++ox) dst[static_cast<long>(ox * g.stride) + offset] += src[ox];
        }
      }
}

bool direct_columns(const ConvShape& s, ConvGeom g) { return s.k == 1 && g.stride == 1 && g.pad == 0; }

template <class T>
std::size_t channel_count(const BasicTensor<T>& t) {
  require_rank(t, 4, "batchnorm input");
  return t.dim(1);
}

}  // namespace

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight, ConvGeom geom) {
  const ConvShape s = conv_shape(input, weight, geom);
  BasicTensor<T> out({s.n, s.o, s.oh, s.ow});
  const std::size_t in_stride = s.c * s.h * s.w;
  const std::size_t out_stride = s.o * s.oh * s.ow;
  parallel_for(s.n, [&](std::size_t n) {
    const T* in = input.data() + n * in_stride;
    const T* cols = in;
    std::unique_ptr<T[]> col;
    if (!direct_columns(s, geom)) {
      col = std::make_unique_for_overwrite<T[]>(s.col_rows() * s.col_cols());
      im2col(in, s, geom, col.get());
      cols = col.get();
    }
    gemm_nn(s.o, s.col_cols(), s.col_rows(), weight.data(), cols, out.data() + n * out_stride);
  });
  return out;
}

template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& grad_out, ConvGeom geom, bool need_input_grad,
                             bool need_weight_grad) {
  const ConvShape s = conv_shape(input, weight, geom);
  if (grad_out.dims() != Dims{s.n, s.o, s.oh, s.ow})
    throw InvalidShape("conv2d_backward: grad_out dims " + dims_string(grad_out.dims()));
  ConvGrads<T> g;
  const std::size_t in_stride = s.c * s.h * s.w;
  const std::size_t out_stride = s.o * s.oh * s.ow;
  const bool direct = direct_columns(s, geom);
  if (need_weight_grad) {
    g.grad_weight = BasicTensor<T>(weight.dims());
    std::unique_ptr<T[]> col;
    if (!direct) col = std::make_unique_for_overwrite<T[]>(s.col_rows() * s.col_cols());
    // Serial over samples: a fixed summation order keeps weight gradients
    // independent of the worker count.
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* cols = input.data() + n * in_stride;
      if (!direct) {
        im2col(cols, s, geom, col.get());
        cols = col.get();
      }
      gemm_nt(s.o, s.col_rows(), s.col_cols(), grad_out.data() + n * out_stride, cols,
              g.grad_weight.data());
    }
  }
  if (need_input_grad) {
    g.grad_input = BasicTensor<T>(input.dims());
    parallel_for(s.n, [&](std::size_t n) {
      T* gin = g.grad_input.data() + n * in_stride;
      if (direct) {
        gemm_tn(s.col_rows(), s.col_cols(), s.o, weight.data(), grad_out.data() + n * out_stride, gin);
        return;
      }
      std::vector<T> gcol(s.col_rows() * s.col_cols(), T{0});
      gemm_tn(s.col_rows(), s.col_cols(), s.o, weight.data(), grad_out.data() + n * out_stride,
              gcol.data());
      col2im(gcol.data(), s, geom, gin);
    });
  }
  return g;
}

template <class T>
BasicTensor<T> linear_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  if (weight.dim(1) != input.dim(1))
    throw InvalidShape("linear: weight expects " + std::to_string(weight.dim(1)) + " features, input has " +
                       std::to_string(input.dim(1)));
  if (bias.size() != weight.dim(0)) throw InvalidShape("linear: bias length mismatch");
  const std::size_t n = input.dim(0), o = weight.dim(0), f = input.dim(1);
  BasicTensor<T> out({n, o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out[i * o + j] = bias[j];
  gemm_nt(n, o, f, input.data(), weight.data(), out.data());
  return out;
}

template <class T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_out) {
  const std::size_t n = input.dim(0), o = weight.dim(0), f = input.dim(1);
  if (grad_out.dims() != Dims{n, o}) throw InvalidShape("linear_backward: grad_out dims mismatch");
  LinearGrads<T> g{BasicTensor<T>(input.dims()), BasicTensor<T>(weight.dims()), BasicTensor<T>({o})};
  gemm_nn(n, f, o, grad_out.data(), weight.data(), g.grad_input.data());
  gemm_tn(o, f, n, grad_out.data(), input.data(), g.grad_weight.data());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) g.grad_bias[j] += grad_out[i * o + j];
  return g;
}

template <class T>
ChannelStats<T> channel_stats(const BasicTensor<T>& input) {
  const std::size_t c = channel_count(input);
  const std::size_t n = input.dim(0), hw = input.dim(2) * input.dim(3);
  ChannelStats<T> st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  if (n * hw == 0) throw InvalidArgument("channel_stats: empty batch");
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = input.data() + (i * c + ch) * hw;
      if constexpr (std::is_same_v<T, float>) {
        const kernels::Moments m = kernels::active().moments(p, hw);
        sum[ch] += m.sum;
        sq[ch] += m.sum_sq;
      } else {
        for (std::size_t j = 0; j < hw; ++j) {
          sum[ch] += p[j];
          sq[ch] += static_cast<double>(p[j]) * p[j];
        }
      }
    }
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    st.mean[ch] = sum[ch] / count;
    st.var[ch] = std::max(0.0, sq[ch] / count - st.mean[ch] * st.mean[ch]);
  }
  // Second pass for the variance when the mean dominates (cancellation).
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (st.var[ch] > 1e-6 * (st.mean[ch] * st.mean[ch])) continue;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = input.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = p[j] - st.mean[ch];
        acc += d * d;
      }
    }
    st.var[ch] = acc / count;
  }
  return st;
}

template <class T>
BasicTensor<T> normalize_affine(const BasicTensor<T>& input, std::span<const double> mean,
                                std::span<const double> var, std::span<const T> gamma,
                                std::span<const T> beta, double eps, NormCache<T>* cache) {
  const std::size_t c = channel_count(input);
  if (mean.size() != c || var.size() != c || gamma.size() != c || beta.size() != c)
    throw InvalidShape("normalize: per-channel parameter length mismatch");
  const std::size_t n = input.dim(0), hw = input.dim(2) * input.dim(3);
  BasicTensor<T> out(input.dims());
  if (cache) {
    cache->mean.assign(mean.begin(), mean.end());
    cache->inv_std.resize(c);
    cache->xhat = BasicTensor<T>(input.dims());
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv_std = 1.0 / std::sqrt(var[ch] + eps);
    if (cache) cache->inv_std[ch] = inv_std;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      const T* x = input.data() + off;
      T* y = out.data() + off;
      if (cache) {
        T* xh = cache->xhat.data() + off;
        for (std::size_t j = 0; j < hw; ++j) xh[j] = static_cast<T>((x[j] - mean[ch]) * inv_std);
        if constexpr (std::is_same_v<T, float>)
          kernels::active().scale_shift(xh, y, hw, gamma[ch], beta[ch]);
        else
          for (std::size_t j = 0; j < hw; ++j) y[j] = gamma[ch] * xh[j] + beta[ch];
      } else {
        for (std::size_t j = 0; j < hw; ++j)
          y[j] = gamma[ch] * static_cast<T>((x[j] - mean[ch]) * inv_std) + beta[ch];
      }
    }
  }
  return out;
}

template <class T>
NormGrads<T> normalize_backward_batch_stats(const BasicTensor<T>& grad_out, const NormCache<T>& cache,
                                            std::span<const T> gamma) {
  require_same_dims(grad_out, cache.xhat, "batchnorm backward");
  const std::size_t c = grad_out.dim(1), n = grad_out.dim(0), hw = grad_out.dim(2) * grad_out.dim(3);
  NormGrads<T> g{BasicTensor<T>(grad_out.dims()), std::vector<T>(c), std::vector<T>(c)};
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_g += grad_out[off + j];
        sum_gx += static_cast<double>(grad_out[off + j]) * cache.xhat[off + j];
      }
    }
    g.grad_beta[ch] = static_cast<T>(sum_g);
    g.grad_gamma[ch] = static_cast<T>(sum_gx);
    const double k = gamma[ch] * cache.inv_std[ch] / count;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j)
        g.grad_input[off + j] = static_cast<T>(
            k * (count * grad_out[off + j] - sum_g - cache.xhat[off + j] * sum_gx));
    }
  }
  return g;
}

template <class T>
NormGrads<T> normalize_backward_const_stats(const BasicTensor<T>& grad_out, const NormCache<T>& cache,
                                            std::span<const T> gamma) {
  require_same_dims(grad_out, cache.xhat, "batchnorm backward");
  const std::size_t c = grad_out.dim(1), n = grad_out.dim(0), hw = grad_out.dim(2) * grad_out.dim(3);
  NormGrads<T> g{BasicTensor<T>(grad_out.dims()), std::vector<T>(c), std::vector<T>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    const T scale = static_cast<T>(gamma[ch] * cache.inv_std[ch]);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_g += grad_out[off + j];
        sum_gx += static_cast<double>(grad_out[off + j]) * cache.xhat[off + j];
        g.grad_input[off + j] = grad_out[off + j] * scale;
      }
    }
    g.grad_beta[ch] = static_cast<T>(sum_g);
    g.grad_gamma[ch] = static_cast<T>(sum_gx);
  }
  return g;
}

template <class T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return out;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output) {
  require_same_dims(grad_out, output, "relu_backward");
  BasicTensor<T> g(grad_out.dims());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = output[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <class T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  BasicTensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += input[i * hw + j];
    out[i] = static_cast<T>(s / static_cast<double>(hw));
  }
  return out;
}

template <class T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Dims& input_dims) {
  const std::size_t n = input_dims.at(0), c = input_dims.at(1), hw = input_dims.at(2) * input_dims.at(3);
  if (grad_out.dims() != Dims{n, c}) throw InvalidShape("global_avg_pool_backward: grad dims mismatch");
  BasicTensor<T> g(input_dims);
  const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] = grad_out[i] * inv;
  return g;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_dims(a, b, "residual add");
  BasicTensor<T> out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  require_rank(logits, 2, "softmax");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  BasicTensor<T> p(logits.dims());
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] = static_cast<T>(std::exp(z[j] - mx) / denom);
  }
  return p;
}

template <class T>
LossAndGrad<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy_loss");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw InvalidShape("cross_entropy_loss: label count mismatch");
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.dims())};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw InvalidArgument("cross_entropy_loss: label " + std::to_string(labels[i]) + " out of range");
    const T* z = logits.data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
    const double log_denom = std::log(denom);
    out.loss += -(z[labels[i]] - mx - log_denom);
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(z[j] - mx - log_denom);
      out.grad[i * c + j] = static_cast<T>((p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) /
                                           static_cast<double>(n));
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

namespace {

template <class T>
double entropy_impl(std::span<const T> p) {
  double total = 0.0;
  for (T v : p) {
    if (!(v >= 0) || !std::isfinite(v)) throw InvalidArgument("entropy: probabilities must be >= 0");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidArgument("entropy: probabilities must sum to 1");
  double h = 0.0;
  for (T v : p)
    if (v > 0) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return h;
}

}  // namespace

double entropy(std::span<const double> probabilities) { return entropy_impl(probabilities); }
double entropy(std::span<const float> probabilities) { return entropy_impl(probabilities); }

template <class T>
std::vector<double> prediction_entropies(const BasicTensor<T>& logits) {
  require_rank(logits, 2, "prediction_entropies");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> h(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < c; ++j) {
      const double lp = z[j] - mx - log_denom;
      h[i] -= std::exp(lp) * lp;
    }
  }
  return h;
}

template <class T>
LossAndGrad<T> entropy_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> keep) {
  require_rank(logits, 2, "entropy_loss");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (!keep.empty() && keep.size() != n) throw InvalidShape("entropy_loss: keep mask length mismatch");
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.dims())};
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) kept += keep.empty() || keep[i] ? 1 : 0;
  if (kept == 0) return out;
  std::vector<double> lp(c);
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep.empty() && !keep[i]) continue;
    const T* z = logits.data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
    const double log_denom = std::log(denom);
    double h = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      lp[j] = z[j] - mx - log_denom;
      h -= std::exp(lp[j]) * lp[j];
    }
    out.loss += h;
    for (std::size_t j = 0; j < c; ++j)
      out.grad[i * c + j] = static_cast<T>(-std::exp(lp[j]) * (lp[j] + h) / static_cast<double>(kept));
  }
  out.loss /= static_cast<double>(kept);
  return out;
}

template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  require_rank(logits, 2, "argmax_rows");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    out[i] = static_cast<int>(std::max_element(z, z + c) - z);
  }
  return out;
}

#define FREQCODA_INSTANTIATE(T)                                                                       \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, ConvGeom);     \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                        const BasicTensor<T>&, ConvGeom, bool, bool);                 \
  template BasicTensor<T> linear_forward(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                         const BasicTensor<T>&);                                      \
  template LinearGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                          const BasicTensor<T>&);                                     \
  template ChannelStats<T> channel_stats(const BasicTensor<T>&);                                      \
  template BasicTensor<T> normalize_affine(const BasicTensor<T>&, std::span<const double>,            \
                                           std::span<const double>, std::span<const T>,               \
                                           std::span<const T>, double, NormCache<T>*);                \
  template NormGrads<T> normalize_backward_batch_stats(const BasicTensor<T>&, const NormCache<T>&,    \
                                                       std::span<const T>);                           \
  template NormGrads<T> normalize_backward_const_stats(const BasicTensor<T>&, const NormCache<T>&,    \
                                                       std::span<const T>);                           \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                        \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>&);                             \
  template BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>&, const Dims&);               \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                             \
  template LossAndGrad<T> cross_entropy_loss(const BasicTensor<T>&, std::span<const int>);            \
  template std::vector<double> prediction_entropies(const BasicTensor<T>&);                           \
  template LossAndGrad<T> entropy_loss(const BasicTensor<T>&, std::span<const std::uint8_t>);         \
  template std::vector<int> argmax_rows(const BasicTensor<T>&);

FREQCODA_INSTANTIATE(float)
FREQCODA_INSTANTIATE(double)

#undef FREQCODA_INSTANTIATE

}  // namespace freqcoda::nn
