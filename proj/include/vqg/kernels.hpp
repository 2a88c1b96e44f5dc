#pragma once

// Dense double-precision kernels used by the encoder, the LSTM and the
// optimizer. Every routine has a portable scalar reference; an AVX2/FMA
// variant is compiled on x86-64 and chosen at runtime when the CPU supports
// it. Setting VQG_SIMD=scalar in the environment forces the reference path.

#include <cstddef>
#include <span>
#include <string_view>

#include "vqg/tensor.hpp"

namespace vqg::kernels {

struct AdamCoefficients {
  double lr;
  double beta1;
  double beta2;
  double epsilon;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

// Raw-pointer entry points; the span wrappers below check shapes.
struct KernelTable {
  const char* name;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y += A x, A is rows x cols row-major
  void (*gemv)(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
  // x += A^T y
  void (*gemv_t)(const double* a, std::size_t rows, std::size_t cols, const double* y, double* x);
  // A += alpha * y x^T
  void (*ger)(double alpha, const double* y, const double* x, double* a, std::size_t rows,
              std::size_t cols);
  void (*adam)(double* param, const double* grad, double* m, double* v, std::size_t n,
               const AdamCoefficients& c);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2_table();

// The table used by the wrappers below.
const KernelTable& active();
void set_active(const KernelTable& table);

// Restores the previously active table on scope exit. Test helper.
class ScopedKernelOverride {
 public:
  explicit ScopedKernelOverride(const KernelTable& table) : saved_(&active()) { set_active(table); }
  ~ScopedKernelOverride() { set_active(*saved_); }
  ScopedKernelOverride(const ScopedKernelOverride&) = delete;
  ScopedKernelOverride& operator=(const ScopedKernelOverride&) = delete;

 private:
  const KernelTable* saved_;
};

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void gemv(const Matrix& a, std::span<const double> x, std::span<double> y);
void gemv_t(const Matrix& a, std::span<const double> y, std::span<double> x);
void ger(double alpha, std::span<const double> y, std::span<const double> x, Matrix& a);
void adam(std::span<double> param, std::span<const double> grad, std::span<double> m,
          std::span<double> v, const AdamCoefficients& c);

}  // namespace vqg::kernels
