#include "vqg/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"
#include "vqg/error.hpp"

namespace vqg::kernels {
namespace {

const KernelTable kScalar{"scalar",      scalar::dot, scalar::axpy, scalar::gemv,
                          scalar::gemv_t, scalar::ger, scalar::adam};

#if defined(VQG_HAVE_AVX2)
const KernelTable kAvx2{"avx2", avx2::dot, avx2::axpy, avx2::gemv, avx2::gemv_t, avx2::ger,
                        avx2::adam};
#endif

const KernelTable& select_default() {
  if (const char* env = std::getenv("VQG_SIMD"); env != nullptr && std::string_view(env) == "scalar") {
    return kScalar;
  }
  if (const KernelTable* t = avx2_table()) return *t;
  return kScalar;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{&select_default()};
  return slot;
}

void check(bool ok, const char* what) {
  if (!ok) throw Error(std::string("kernel shape mismatch in ") + what);
}

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

const KernelTable* avx2_table() {
#if defined(VQG_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &kAvx2 : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *active_slot().load(std::memory_order_acquire); }

void set_active(const KernelTable& table) { active_slot().store(&table, std::memory_order_release); }

double dot(std::span<const double> a, std::span<const double> b) {
  check(a.size() == b.size(), "dot");
  return active().dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check(x.size() == y.size(), "axpy");
  active().axpy(alpha, x.data(), y.data(), x.size());
}

void gemv(const Matrix& a, std::span<const double> x, std::span<double> y) {
  check(a.cols == x.size() && a.rows == y.size(), "gemv");
  active().gemv(a.data.data(), a.rows, a.cols, x.data(), y.data());
}

void gemv_t(const Matrix& a, std::span<const double> y, std::span<double> x) {
  check(a.cols == x.size() && a.rows == y.size(), "gemv_t");
  active().gemv_t(a.data.data(), a.rows, a.cols, y.data(), x.data());
}

void ger(double alpha, std::span<const double> y, std::span<const double> x, Matrix& a) {
  check(a.cols == x.size() && a.rows == y.size(), "ger");
  active().ger(alpha, y.data(), x.data(), a.data.data(), a.rows, a.cols);
}

void adam(std::span<double> param, std::span<const double> grad, std::span<double> m,
          std::span<double> v, const AdamCoefficients& c) {
  check(param.size() == grad.size() && m.size() == param.size() && v.size() == param.size(),
        "adam");
  active().adam(param.data(), grad.data(), m.data(), v.data(), param.size(), c);
}

}  // namespace vqg::kernels
