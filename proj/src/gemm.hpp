#pragma once

#include <cstddef>
#include <vector>

namespace mtcp::detail {

// C[m x n] += op(A) . op(B), all row-major. op(A) is [m x k], op(B) is [k x n].
// Transposed operands are repacked so the inner loop is a contiguous axpy.
inline void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                     const double* b, double* c) {
  std::vector<double> a_buf;
  std::vector<double> b_buf;
  if (trans_a) {
    // stored as [k x m]
    a_buf.resize(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) a_buf[i * k + p] = a[p * m + i];
    a = a_buf.data();
  }
  if (trans_b) {
    // stored as [n x k]
    b_buf.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) b_buf[p * n + j] = b[j * k + p];
    b = b_buf.data();
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace mtcp::detail
