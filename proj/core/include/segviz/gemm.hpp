#pragma once

#include <cstddef>

namespace segviz::detail {

// Row-major C[m x n] = alpha * op(A) * op(B) + beta * C, contiguous leading
// dimensions. Backed by BLAS when built with SEGVIZ_WITH_BLAS, otherwise a
// portable blocked loop.
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, float alpha, const float* a,
          const float* b, float beta, float* c);
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, double alpha, const double* a,
          const double* b, double beta, double* c);

}  // namespace segviz::detail
