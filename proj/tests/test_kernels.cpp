#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "vqg/kernels.hpp"
#include "vqg/trainer.hpp"

using namespace vqg;

namespace {

std::vector<const kernels::KernelTable*> tables() {
  std::vector<const kernels::KernelTable*> out{&kernels::scalar_table()};
  if (const auto* t = kernels::avx2_table()) out.push_back(t);
  return out;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::max(std::abs(a), std::abs(b))); }

// Sizes straddling the 4- and 8-lane blocks.
const std::vector<std::size_t> kSizes = {0, 1, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 64, 97};

}  // namespace

TEST_CASE("every kernel table matches the long-double oracle") {
  for (const auto* table : tables()) {
    CAPTURE(table->name);
    for (std::size_t n : kSizes) {
      const auto a = testing::random_vector(n, 10 + n);
      const auto b = testing::random_vector(n, 20 + n);
      long double ref = 0.0L;
      for (std::size_t i = 0; i < n; ++i) ref += static_cast<long double>(a[i]) * b[i];
      CHECK(std::abs(table->dot(a.data(), b.data(), n) - static_cast<double>(ref)) <= 1e-13 * (1.0 + n));

      auto y = testing::random_vector(n, 30 + n);
      auto expected = y;
      for (std::size_t i = 0; i < n; ++i) expected[i] += 0.37 * a[i];
      table->axpy(0.37, a.data(), y.data(), n);
      for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-14));
    }
    for (std::size_t rows : {1, 3, 4, 5, 9, 17}) {
      for (std::size_t cols : {1, 4, 7, 13, 32}) {
        Matrix m(rows, cols);
        m.data = testing::random_vector(rows * cols, rows * 100 + cols);
        const auto x = testing::random_vector(cols, 7);
        std::vector<double> y(rows, 0.5);
        table->gemv(m.data.data(), rows, cols, x.data(), y.data());
        const auto want = oracle::matvec(m, x);
        for (std::size_t r = 0; r < rows; ++r) CHECK(std::abs(y[r] - (want[r] + 0.5)) <= 1e-13);

        const auto yy = testing::random_vector(rows, 8);
        std::vector<double> xt(cols, 0.0);
        table->gemv_t(m.data.data(), rows, cols, yy.data(), xt.data());
        for (std::size_t c = 0; c < cols; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) acc += m(r, c) * yy[r];
          CHECK(std::abs(xt[c] - acc) <= 1e-13);
        }

        Matrix g = m;
        table->ger(2.0, yy.data(), x.data(), g.data.data(), rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) CHECK(std::abs(g(r, c) - (m(r, c) + 2.0 * yy[r] * x[c])) <= 1e-14);
        }
      }
    }
  }
}

TEST_CASE("simd variants agree with the scalar reference") {
  const auto* simd = kernels::avx2_table();
  if (simd == nullptr) {
    MESSAGE("AVX2 variant unavailable on this build or CPU; equivalence checks skipped");
    return;
  }
  const auto& ref = kernels::scalar_table();
  for (std::size_t n : kSizes) {
    const auto a = testing::random_vector(n, 40 + n, 3.0);
    const auto b = testing::random_vector(n, 50 + n, 3.0);
    CHECK(std::abs(simd->dot(a.data(), b.data(), n) - ref.dot(a.data(), b.data(), n)) <= 1e-13 * (1.0 + n));

    const auto g = testing::random_vector(n, 60 + n);
    auto p1 = testing::random_vector(n, 70 + n), p2 = p1;
    auto m1 = testing::random_vector(n, 80 + n, 0.1), m2 = m1;
    std::vector<double> v1(n), v2(n);
    for (std::size_t i = 0; i < n; ++i) v1[i] = v2[i] = 0.01 * static_cast<double>(i + 1);
    const kernels::AdamCoefficients c{1e-3, 0.9, 0.999, 1e-8, 1.0 - 0.9 * 0.9, 1.0 - 0.999 * 0.999};
    ref.adam(p1.data(), g.data(), m1.data(), v1.data(), n, c);
    simd->adam(p2.data(), g.data(), m2.data(), v2.data(), n, c);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(rel_diff(p1[i], p2[i]) <= 1e-14);
      CHECK(rel_diff(m1[i], m2[i]) <= 1e-14);
      CHECK(rel_diff(v1[i], v2[i]) <= 1e-14);
    }
  }
}

TEST_CASE("model forward, gradients and decoding agree across kernel tables") {
  const auto* simd = kernels::avx2_table();
  if (simd == nullptr) return;
  const ModelDims dims{13, 6, 9, 11};
  const GradCheckSetup setup = make_grad_check_setup(dims, 5);

  auto run = [&](const kernels::KernelTable& table) {
    kernels::ScopedKernelOverride scope(table);
    Model grads = Model::zeros(dims);
    const double loss = accumulate_gradient(setup.model, setup.example, grads);
    return std::pair{loss, grads};
  };
  const auto [loss_ref, grads_ref] = run(kernels::scalar_table());
  const auto [loss_simd, grads_simd] = run(*simd);
  CHECK(std::abs(loss_ref - loss_simd) <= 1e-12);
  std::vector<std::span<const double>> ref_tensors;
  for_each_tensor(grads_ref, [&](const ConstTensorRef& t) { ref_tensors.push_back(t.data); });
  std::size_t k = 0;
  for_each_tensor(grads_simd, [&](const ConstTensorRef& t) {
    const auto r = ref_tensors[k++];
    for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(std::abs(t.data[i] - r[i]) <= 1e-12);
  });
}

TEST_CASE("scoped override restores the active table") {
  const auto* before = &kernels::active();
  {
    kernels::ScopedKernelOverride scope(kernels::scalar_table());
    CHECK(&kernels::active() == &kernels::scalar_table());
  }
  CHECK(&kernels::active() == before);
}

TEST_CASE("span wrappers reject mismatched shapes") {
  std::vector<double> a(3), b(4);
  CHECK_THROWS(kernels::dot(a, b));
  Matrix m(2, 3);
  std::vector<double> y(3);
  CHECK_THROWS(kernels::gemv(m, a, y));
}
