#pragma once

// Inner-loop arithmetic shared by every operator. Each routine has a scalar
// reference implementation and an AVX2/FMA variant; the variant is picked once
// at startup from CPUID and can be overridden with P2W_KERNELS=scalar|avx2 or
// force_isa().
//
// Per-element reduction order is fixed (k = 0..K-1, accumulate from zero,
// then add into C) in both variants, so a given output element never depends
// on where it sits inside a larger matrix.

#include <cstddef>
#include <string_view>

#include "p2w/tensor.hpp"

namespace p2w::kernels {

enum class Isa { scalar, avx2 };

/// C[m x n] = op(A) * op(B) (+ C when accumulate). Row-major with leading
/// dimensions; op(A) is m x k, op(B) is k x n.
using GemmFn = void (*)(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                        std::size_t k, const Real* a, std::size_t lda,
                        const Real* b, std::size_t ldb, Real* c, std::size_t ldc,
                        bool accumulate);
using DotFn = Real (*)(const Real* a, const Real* b, std::size_t n);
/// y += alpha * x
using AxpyFn = void (*)(Real alpha, const Real* x, Real* y, std::size_t n);
struct AdamArgs {
  Real lr;
  Real beta1;
  Real beta2;
  Real eps;
  Real bias1;  // 1 - beta1^t
  Real bias2;  // 1 - beta2^t
  Real l2;     // added to the gradient as l2 * param
};
/// Bias-corrected Adam moment and parameter update over a contiguous block.
using AdamFn = void (*)(Real* param, const Real* grad, Real* m, Real* v,
                        std::size_t n, const AdamArgs& args);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  DotFn dot;
  AxpyFn axpy;
  AdamFn adam;
};

namespace scalar {
const KernelTable& table();
}
namespace avx2 {
/// Null when the binary was built without the AVX2 translation unit.
const KernelTable* table();
}

bool isa_available(Isa isa);
Isa active_isa();
void force_isa(Isa isa);
std::string_view isa_name(Isa isa);
const KernelTable& active();

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const Real* a, std::size_t lda, const Real* b, std::size_t ldb,
                 Real* c, std::size_t ldc, bool accumulate) {
  active().gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
inline Real dot(const Real* a, const Real* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}

}  // namespace p2w::kernels
