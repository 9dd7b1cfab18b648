// Dense matmul kernels. When DUETT_USE_CBLAS is defined the inner kernel is
// delegated to CBLAS (OpenBLAS pinned to one thread so results are
// reproducible run to run); otherwise a blocked ikj loop is used. Both paths
// are deterministic for fixed inputs.

#pragma once

#include <cstdint>
#include <type_traits>

#ifdef DUETT_USE_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace duett::kernels {

#ifdef DUETT_USE_CBLAS
inline void pin_blas_threads() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}
#endif

// C (m x n) += A (m x k) * B (k x n); A optionally transposed (a_t: A is
// k x m storage-wise), same for B.
template <typename S>
void gemm_accum(const S* a, const S* b, S* c, std::int64_t m, std::int64_t n,
                std::int64_t k, bool a_t, bool b_t) {
#ifdef DUETT_USE_CBLAS
  pin_blas_threads();
  if constexpr (std::is_same_v<S, float>) {
    cblas_sgemm(CblasRowMajor, a_t ? CblasTrans : CblasNoTrans,
                b_t ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0f, a,
                static_cast<int>(a_t ? m : k), b, static_cast<int>(b_t ? k : n),
                1.0f, c, static_cast<int>(n));
    return;
  } else if constexpr (std::is_same_v<S, double>) {
    cblas_dgemm(CblasRowMajor, a_t ? CblasTrans : CblasNoTrans,
                b_t ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0, a,
                static_cast<int>(a_t ? m : k), b, static_cast<int>(b_t ? k : n),
                1.0, c, static_cast<int>(n));
    return;
  }
#endif
  // ikj ordering: contiguous writes on C rows, vectorizes well.
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const S av = a_t ? a[p * m + i] : a[i * k + p];
      const S* brow = b_t ? nullptr : b + p * n;
      S* crow = c + i * n;
      if (b_t) {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace duett::kernels
