#include <algorithm>
#include <cmath>

#include "freqcoda/kernels.hpp"

namespace freqcoda::kernels {
namespace {

float dot(const float* a, const float* b, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_shift(const float* x, float* y, std::size_t n, float scale, float shift) {
  for (std::size_t i = 0; i < n; ++i) y[i] = scale * x[i] + shift;
}

Moments moments(const float* x, std::size_t n) {
  Moments m;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    m.sum += v;
    m.sum_sq += v * v;
  }
  return m;
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      axpy(a[i * lda + p], b + p * ldb, c + i * ldc, n);
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      axpy(a[p * lda + i], b + p * ldb, c + i * ldc, n);
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += dot(a + i * lda, b + j * ldb, k);
}

void fake_quantize(const float* x, float* y, std::size_t n, float step, float qn, float qp) {
  for (std::size_t i = 0; i < n; ++i) {
    const float q = std::clamp(std::nearbyint(x[i] / step), qn, qp);
    y[i] = q * step;
  }
}

double fake_quantize_backward(const float* x, const float* grad_out, float* grad_x, std::size_t n,
                              float step, float qn, float qp) {
  double gs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float v = x[i] / step;
    float local;
    if (v < qn) {
      grad_x[i] = 0.0f;
      local = qn;
    } else if (v > qp) {
      grad_x[i] = 0.0f;
      local = qp;
    } else {
      grad_x[i] = grad_out[i];
      local = std::nearbyint(v) - v;
    }
    gs += static_cast<double>(local) * grad_out[i];
  }
  return gs;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{"scalar",   dot,     axpy,    scale_shift,   moments,
                                 gemm_nn,    gemm_tn, gemm_nt, fake_quantize, fake_quantize_backward};
  return table;
}

}  // namespace freqcoda::kernels
