#pragma once

#include <cstddef>

#include "vqg/kernels.hpp"

namespace vqg::kernels {

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void gemv(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
void gemv_t(const double* a, std::size_t rows, std::size_t cols, const double* y, double* x);
void ger(double alpha, const double* y, const double* x, double* a, std::size_t rows,
         std::size_t cols);
void adam(double* param, const double* grad, double* m, double* v, std::size_t n,
          const AdamCoefficients& c);
}  // namespace scalar

#if defined(VQG_HAVE_AVX2)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void gemv(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
void gemv_t(const double* a, std::size_t rows, std::size_t cols, const double* y, double* x);
void ger(double alpha, const double* y, const double* x, double* a, std::size_t rows,
         std::size_t cols);
void adam(double* param, const double* grad, double* m, double* v, std::size_t n,
          const AdamCoefficients& c);
}  // namespace avx2
#endif

}  // namespace vqg::kernels
