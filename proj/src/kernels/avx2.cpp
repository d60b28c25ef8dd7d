// Built with -mavx2 -mfma; only reached after CPUID confirms support.

#include <immintrin.h>

#include <cmath>

#include "p2w/kernels.hpp"

namespace p2w::kernels::avx2 {
namespace {

struct AView {
  const Real* a;
  std::size_t lda;
  bool trans;
  Real operator()(std::size_t i, std::size_t p) const {
    return trans ? a[p * lda + i] : a[i * lda + p];
  }
};

inline void store(Real* dst, __m256d v, bool accumulate) {
  if (accumulate) v = _mm256_add_pd(_mm256_loadu_pd(dst), v);
  _mm256_storeu_pd(dst, v);
}

template <int R>
void block8(const AView& a, std::size_t i0, std::size_t k, const Real* b,
            std::size_t ldb, Real* c, std::size_t ldc, bool accumulate) {
  __m256d acc[R][2];
  for (int r = 0; r < R; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_set1_pd(a(i0 + r, p));
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < R; ++r) {
    store(c + r * ldc, acc[r][0], accumulate);
    store(c + r * ldc + 4, acc[r][1], accumulate);
  }
}

template <int R>
void block4(const AView& a, std::size_t i0, std::size_t k, const Real* b,
            std::size_t ldb, Real* c, std::size_t ldc, bool accumulate) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_pd(_mm256_set1_pd(a(i0 + r, p)), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) store(c + r * ldc, acc[r], accumulate);
}

template <int R>
void block1(const AView& a, std::size_t i0, std::size_t k, const Real* b,
            std::size_t ldb, Real* c, std::size_t ldc, bool accumulate) {
  Real acc[R] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const Real bv = b[p * ldb];
    for (int r = 0; r < R; ++r) acc[r] = std::fma(a(i0 + r, p), bv, acc[r]);
  }
  for (int r = 0; r < R; ++r) {
    c[r * ldc] = accumulate ? c[r * ldc] + acc[r] : acc[r];
  }
}

template <int R>
void row_panel(const AView& a, std::size_t i0, std::size_t n, std::size_t k,
               const Real* b, std::size_t ldb, Real* c, std::size_t ldc,
               bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) block8<R>(a, i0, k, b + j, ldb, c + j, ldc, accumulate);
  for (; j + 4 <= n; j += 4) block4<R>(a, i0, k, b + j, ldb, c + j, ldc, accumulate);
  for (; j < n; ++j) block1<R>(a, i0, k, b + j, ldb, c + j, ldc, accumulate);
}

Real hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

Real dot(const Real* a, const Real* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  Real s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          const Real* a, std::size_t lda, const Real* b, std::size_t ldb,
          Real* c, std::size_t ldc, bool accumulate) {
  if (tb) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        Real s;
        if (!ta) {
          s = dot(a + i * lda, b + j * ldb, k);
        } else {
          s = 0;
          for (std::size_t p = 0; p < k; ++p) s = std::fma(a[p * lda + i], b[j * ldb + p], s);
        }
        c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
      }
    }
    return;
  }
  const AView av{a, lda, ta};
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_panel<4>(av, i, n, k, b, ldb, c + i * ldc, ldc, accumulate);
  switch (m - i) {
    case 3: row_panel<3>(av, i, n, k, b, ldb, c + i * ldc, ldc, accumulate); break;
    case 2: row_panel<2>(av, i, n, k, b, ldb, c + i * ldc, ldc, accumulate); break;
    case 1: row_panel<1>(av, i, n, k, b, ldb, c + i * ldc, ldc, accumulate); break;
    default: break;
  }
}

void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// No FMA here: the update must match the scalar reference bit for bit.
void adam(Real* param, const Real* grad, Real* m, Real* v, std::size_t n,
          const AdamArgs& args) {
  const __m256d b1 = _mm256_set1_pd(args.beta1);
  const __m256d b2 = _mm256_set1_pd(args.beta2);
  const __m256d ob1 = _mm256_set1_pd(1 - args.beta1);
  const __m256d ob2 = _mm256_set1_pd(1 - args.beta2);
  const __m256d bc1 = _mm256_set1_pd(args.bias1);
  const __m256d bc2 = _mm256_set1_pd(args.bias2);
  const __m256d lr = _mm256_set1_pd(args.lr);
  const __m256d eps = _mm256_set1_pd(args.eps);
  const __m256d l2 = _mm256_set1_pd(args.l2);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d p = _mm256_loadu_pd(param + i);
    const __m256d g = _mm256_add_pd(_mm256_loadu_pd(grad + i), _mm256_mul_pd(l2, p));
    const __m256d mv = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(ob1, g));
    const __m256d vv = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(ob2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    const __m256d mhat = _mm256_div_pd(mv, bc1);
    const __m256d vhat = _mm256_div_pd(vv, bc2);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(lr, mhat), _mm256_add_pd(_mm256_sqrt_pd(vhat), eps));
    _mm256_storeu_pd(param + i, _mm256_sub_pd(p, step));
  }
  const Real one_b1 = 1 - args.beta1;
  const Real one_b2 = 1 - args.beta2;
  for (; i < n; ++i) {
    const Real g = grad[i] + args.l2 * param[i];
    m[i] = args.beta1 * m[i] + one_b1 * g;
    v[i] = args.beta2 * v[i] + one_b2 * (g * g);
    const Real mhat = m[i] / args.bias1;
    const Real vhat = v[i] / args.bias2;
    param[i] -= args.lr * mhat / (std::sqrt(vhat) + args.eps);
  }
}

}  // namespace

const KernelTable* table() {
  static const KernelTable t{Isa::avx2, &gemm, &dot, &axpy, &adam};
  return &t;
}

}  // namespace p2w::kernels::avx2
