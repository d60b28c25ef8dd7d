#include <cmath>
#include <vector>

#include "p2w/kernels.hpp"

namespace p2w::kernels::scalar {
namespace {

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          const Real* a, std::size_t lda, const Real* b, std::size_t ldb,
          Real* c, std::size_t ldc, bool accumulate) {
  std::vector<Real> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), Real{0});
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ta ? a[p * lda + i] : a[i * lda + p];
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * b[j * ldb + p];
      } else {
        const Real* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
      }
    }
    Real* crow = c + i * ldc;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] += acc[j];
    } else {
      for (std::size_t j = 0; j < n; ++j) crow[j] = acc[j];
    }
  }
}

Real dot(const Real* a, const Real* b, std::size_t n) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void adam(Real* param, const Real* grad, Real* m, Real* v, std::size_t n,
          const AdamArgs& args) {
  const Real one_b1 = 1 - args.beta1;
  const Real one_b2 = 1 - args.beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const Real g = grad[i] + args.l2 * param[i];
    m[i] = args.beta1 * m[i] + one_b1 * g;
    v[i] = args.beta2 * v[i] + one_b2 * (g * g);
    const Real mhat = m[i] / args.bias1;
    const Real vhat = v[i] / args.bias2;
    param[i] -= args.lr * mhat / (std::sqrt(vhat) + args.eps);
  }
}

}  // namespace

const KernelTable& table() {
  static const KernelTable t{Isa::scalar, &gemm, &dot, &axpy, &adam};
  return t;
}

}  // namespace p2w::kernels::scalar
