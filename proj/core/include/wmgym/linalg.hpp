#pragma once

// Hot-path kernels. Reductions use a fixed 4-accumulator pattern so results
// are identical run to run while still vectorizing under strict FP semantics.

#include <cstddef>

namespace wmgym {

inline double dot(const double* __restrict a, const double* __restrict b, size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y += alpha * x
inline void axpy(double alpha, const double* __restrict x, double* __restrict y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out = W x (+ optional bias), W row-major [rows x cols].
inline void matvec(const double* __restrict w, const double* __restrict x,
                   const double* __restrict bias, double* __restrict out,
                   size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    out[r] = (bias ? bias[r] : 0.0) + dot(w + r * cols, x, cols);
  }
}

// out += W^T dy, W row-major [rows x cols]; accumulates into out[cols].
inline void matvec_t_acc(const double* __restrict w, const double* __restrict dy,
                         double* __restrict out, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    axpy(dy[r], w + r * cols, out, cols);
  }
}

// gW += dy x^T, gW row-major [rows x cols].
inline void outer_acc(const double* __restrict dy, const double* __restrict x,
                      double* __restrict gw, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    axpy(dy[r], x, gw + r * cols, cols);
  }
}

}  // namespace wmgym
