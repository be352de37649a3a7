#pragma once

#include <cstddef>

// Raw GEMM loops. Every output element is accumulated over the inner index
// in ascending order, so results do not depend on blocking or threads.
namespace lami::kernels {

// C(m x n) = A(m x k) * B(k x n); accumulate adds into C instead of overwriting.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

// C(k x n) += A(m x k)^T * B(m x n)
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

// C(m x k) += A(m x n) * B(k x n)^T
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                 std::size_t k);

}  // namespace lami::kernels
