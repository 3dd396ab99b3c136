#pragma once

#include <cblas-openblas.h>

namespace vqseg {

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
/// m, n, k are the dimensions after applying the transposes.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

/// Pins BLAS to one thread. Call once at startup; keeps every run
/// reproducible and leaves scheduling decisions to the caller.
inline void use_single_threaded_blas() { openblas_set_num_threads(1); }

}  // namespace vqseg
