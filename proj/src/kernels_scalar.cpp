#include <cmath>

#include "kernels_impl.hpp"

namespace vqg::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemv(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) y[r] += dot(a + r * cols, x, cols);
}

void gemv_t(const double* a, std::size_t rows, std::size_t cols, const double* y, double* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (y[r] != 0.0) axpy(y[r], a + r * cols, x, cols);
  }
}

void ger(double alpha, const double* y, const double* x, double* a, std::size_t rows,
         std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = alpha * y[r];
    if (s != 0.0) axpy(s, x, a + r * cols, cols);
  }
}

void adam(double* param, const double* grad, double* m, double* v, std::size_t n,
          const AdamCoefficients& c) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c.bias_correction1;
    const double v_hat = v[i] / c.bias_correction2;
    param[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

}  // namespace vqg::kernels::scalar
