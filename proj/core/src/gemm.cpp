#include "segviz/gemm.hpp"

#include <vector>

#ifdef SEGVIZ_WITH_BLAS
#include <cblas.h>

// Present in OpenBLAS; weak so linking against a plain reference BLAS works.
extern "C" void openblas_set_num_threads(int) __attribute__((weak));

namespace {
struct BlasSingleThreadInit {
  BlasSingleThreadInit() {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
  }
};
const BlasSingleThreadInit g_blas_init;
}  // namespace
#endif

namespace segviz::detail {

#ifdef SEGVIZ_WITH_BLAS

void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(trans_a ? m : k), b,
              static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
}

void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(trans_a ? m : k), b,
              static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
}

#else

namespace {

// A(i,k) contiguous, B(k,j) contiguous: classic ikj order, vectorizes over j.
template <typename T>
void gemm_loop(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, T alpha, const T* a,
               const T* b, T beta, T* c) {
  for (size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (beta == T(0)) {
      for (size_t j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (!trans_b) {
    for (size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (size_t p = 0; p < k; ++p) {
        const T av = alpha * (trans_a ? a[p * m + i] : a[i * k + p]);
        const T* brow = b + p * n;
        for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    // B transposed: rows of B are contiguous dot-product operands.
    for (size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        if (!trans_a) {
          const T* arow = a + i * k;
          for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
        }
        crow[j] += alpha * acc;
      }
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  gemm_loop(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  gemm_loop(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

#endif

}  // namespace segviz::detail
