#pragma once

#include <cstddef>
#include <string_view>

namespace freqcoda::kernels {

struct Moments {
  double sum = 0.0;
  double sum_sq = 0.0;
};

// One set of f32 inner loops. The scalar table is the reference; vector
// tables must agree with it bitwise for the elementwise kernels and to
// rounding for the reductions (summation order differs).
struct KernelTable {
  std::string_view name;

  float (*dot)(const float* a, const float* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  // y = scale * x + shift
  void (*scale_shift)(const float* x, float* y, std::size_t n, float scale, float shift);
  Moments (*moments)(const float* x, std::size_t n);

  // Row-major, C += A * B with A: m x k (lda), B: k x n (ldb), C: m x n (ldc).
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc);
  // C += A^T * B with A stored k x m (lda).
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc);
  // C += A * B^T with B stored n x k (ldb).
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc);

  // y = clamp(nearbyint(x / step), qn, qp) * step
  void (*fake_quantize)(const float* x, float* y, std::size_t n, float step, float qn, float qp);
  // grad_x = grad_out inside [qn*step, qp*step] else 0; returns the unscaled
  // step-gradient sum (LSQ rule, before the grad_scale factor).
  double (*fake_quantize_backward)(const float* x, const float* grad_out, float* grad_x,
                                   std::size_t n, float step, float qn, float qp);
};

const KernelTable& scalar_kernels();

// nullptr when the build or the running CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

// Table used by the library. Picked once: AVX2 when available unless
// FREQCODA_SIMD=scalar is set in the environment.
const KernelTable& active();

}  // namespace freqcoda::kernels
