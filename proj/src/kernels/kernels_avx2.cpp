// Compiled with -mavx2 -mfma; only reached through avx2_kernels() after a
// runtime CPU check.
#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "freqcoda/kernels.hpp"

namespace freqcoda::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

float dot(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_shift(const float* x, float* y, std::size_t n, float scale, float shift) {
  const __m256 vs = _mm256_set1_ps(scale);
  const __m256 vb = _mm256_set1_ps(shift);
  std::size_t i = 0;
  // mul then add (no fma) so results match the scalar table bitwise
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_mul_ps(vs, _mm256_loadu_ps(x + i)), vb));
  for (; i < n; ++i) y[i] = scale * x[i] + shift;
}

Moments moments(const float* x, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  __m256d q0 = _mm256_setzero_pd(), q1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    s0 = _mm256_add_pd(s0, lo);
    s1 = _mm256_add_pd(s1, hi);
    q0 = _mm256_fmadd_pd(lo, lo, q0);
    q1 = _mm256_fmadd_pd(hi, hi, q1);
  }
  Moments m{hsum(_mm256_add_pd(s0, s1)), hsum(_mm256_add_pd(q0, q1))};
  for (; i < n; ++i) {
    const double v = x[i];
    m.sum += v;
    m.sum_sq += v * v;
  }
  return m;
}

// C(i, j) += sum_p A(i, p) * B(p, j) with A(i, p) = a[i * rs + p * cs].
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t rs,
                  std::size_t cs, const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + (i + 0) * rs;
    const float* a1 = a + (i + 1) * rs;
    const float* a2 = a + (i + 2) * rs;
    const float* a3 = a + (i + 3) * rs;
    float* c0 = c + (i + 0) * ldc;
    float* c1 = c + (i + 1) * ldc;
    float* c2 = c + (i + 2) * ldc;
    float* c3 = c + (i + 3) * ldc;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 r00 = _mm256_loadu_ps(c0 + j), r01 = _mm256_loadu_ps(c0 + j + 8);
      __m256 r10 = _mm256_loadu_ps(c1 + j), r11 = _mm256_loadu_ps(c1 + j + 8);
      __m256 r20 = _mm256_loadu_ps(c2 + j), r21 = _mm256_loadu_ps(c2 + j + 8);
      __m256 r30 = _mm256_loadu_ps(c3 + j), r31 = _mm256_loadu_ps(c3 + j + 8);
      for (std::size_t p = 0; p < k; ++p) {
        const float* bp = b + p * ldb + j;
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
        const std::size_t off = p * cs;
        __m256 av = _mm256_broadcast_ss(a0 + off);
        r00 = _mm256_fmadd_ps(av, b0, r00);
        r01 = _mm256_fmadd_ps(av, b1, r01);
        av = _mm256_broadcast_ss(a1 + off);
        r10 = _mm256_fmadd_ps(av, b0, r10);
        r11 = _mm256_fmadd_ps(av, b1, r11);
        av = _mm256_broadcast_ss(a2 + off);
        r20 = _mm256_fmadd_ps(av, b0, r20);
        r21 = _mm256_fmadd_ps(av, b1, r21);
        av = _mm256_broadcast_ss(a3 + off);
        r30 = _mm256_fmadd_ps(av, b0, r30);
        r31 = _mm256_fmadd_ps(av, b1, r31);
      }
      _mm256_storeu_ps(c0 + j, r00), _mm256_storeu_ps(c0 + j + 8, r01);
      _mm256_storeu_ps(c1 + j, r10), _mm256_storeu_ps(c1 + j + 8, r11);
      _mm256_storeu_ps(c2 + j, r20), _mm256_storeu_ps(c2 + j + 8, r21);
      _mm256_storeu_ps(c3 + j, r30), _mm256_storeu_ps(c3 + j + 8, r31);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 r0 = _mm256_loadu_ps(c0 + j), r1 = _mm256_loadu_ps(c1 + j);
      __m256 r2 = _mm256_loadu_ps(c2 + j), r3 = _mm256_loadu_ps(c3 + j);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 bv = _mm256_loadu_ps(b + p * ldb + j);
        const std::size_t off = p * cs;
        r0 = _mm256_fmadd_ps(_mm256_broadcast_ss(a0 + off), bv, r0);
        r1 = _mm256_fmadd_ps(_mm256_broadcast_ss(a1 + off), bv, r1);
        r2 = _mm256_fmadd_ps(_mm256_broadcast_ss(a2 + off), bv, r2);
        r3 = _mm256_fmadd_ps(_mm256_broadcast_ss(a3 + off), bv, r3);
      }
      _mm256_storeu_ps(c0 + j, r0), _mm256_storeu_ps(c1 + j, r1);
      _mm256_storeu_ps(c2 + j, r2), _mm256_storeu_ps(c3 + j, r3);
    }
    for (; j < n; ++j) {
      float s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
      for (std::size_t p = 0; p < k; ++p) {
        const float bv = b[p * ldb + j];
        const std::size_t off = p * cs;
        s0 += a0[off] * bv;
        s1 += a1[off] * bv;
        s2 += a2[off] * bv;
        s3 += a3[off] * bv;
      }
      c0[j] = s0, c1[j] = s1, c2[j] = s2, c3[j] = s3;
    }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy(a[i * rs + p * cs], b + p * ldb, c + i * ldc, n);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  gemm_strided(m, n, k, a, lda, 1, b, ldb, c, ldc);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  gemm_strided(m, n, k, a, 1, lda, b, ldb, c, ldc);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * lda;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const float* b0 = b + (j + 0) * ldb;
      const float* b1 = b + (j + 1) * ldb;
      const float* b2 = b + (j + 2) * ldb;
      const float* b3 = b + (j + 3) * ldb;
      __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
      __m256 s2 = _mm256_setzero_ps(), s3 = _mm256_setzero_ps();
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        const __m256 av = _mm256_loadu_ps(ai + p);
        s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + p), s0);
        s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + p), s1);
        s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + p), s2);
        s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + p), s3);
      }
      float t0 = hsum(s0), t1 = hsum(s1), t2 = hsum(s2), t3 = hsum(s3);
      for (; p < k; ++p) {
        t0 += ai[p] * b0[p];
        t1 += ai[p] * b1[p];
        t2 += ai[p] * b2[p];
        t3 += ai[p] * b3[p];
      }
      float* ci = c + i * ldc + j;
      ci[0] += t0, ci[1] += t1, ci[2] += t2, ci[3] += t3;
    }
    for (; j < n; ++j) c[i * ldc + j] += dot(ai, b + j * ldb, k);
  }
}

void fake_quantize(const float* x, float* y, std::size_t n, float step, float qn, float qp) {
  const __m256 vs = _mm256_set1_ps(step);
  const __m256 vn = _mm256_set1_ps(qn);
  const __m256 vp = _mm256_set1_ps(qp);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 q = _mm256_round_ps(_mm256_div_ps(_mm256_loadu_ps(x + i), vs),
                               _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    q = _mm256_min_ps(_mm256_max_ps(q, vn), vp);
    _mm256_storeu_ps(y + i, _mm256_mul_ps(q, vs));
  }
  for (; i < n; ++i) y[i] = std::clamp(std::nearbyint(x[i] / step), qn, qp) * step;
}

double fake_quantize_backward(const float* x, const float* grad_out, float* grad_x, std::size_t n,
                              float step, float qn, float qp) {
  const __m256 vs = _mm256_set1_ps(step);
  const __m256 vn = _mm256_set1_ps(qn);
  const __m256 vp = _mm256_set1_ps(qp);
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_div_ps(_mm256_loadu_ps(x + i), vs);
    const __m256 g = _mm256_loadu_ps(grad_out + i);
    const __m256 below = _mm256_cmp_ps(v, vn, _CMP_LT_OQ);
    const __m256 above = _mm256_cmp_ps(v, vp, _CMP_GT_OQ);
    const __m256 clipped = _mm256_or_ps(below, above);
    _mm256_storeu_ps(grad_x + i, _mm256_andnot_ps(clipped, g));
    const __m256 rounded =
        _mm256_sub_ps(_mm256_round_ps(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC), v);
    __m256 local = _mm256_blendv_ps(rounded, vn, below);
    local = _mm256_blendv_ps(local, vp, above);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(local)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(g)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(local, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(g, 1)), acc1);
  }
  double gs = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) {
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

const KernelTable& avx2_table() {
  static const KernelTable table{"avx2",  dot,     axpy,    scale_shift,   moments,
                                 gemm_nn, gemm_tn, gemm_nt, fake_quantize, fake_quantize_backward};
  return table;
}

}  // namespace freqcoda::kernels
