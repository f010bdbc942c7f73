#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "trace/simd.hpp"

using namespace trace::simd;

namespace {

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(u(rng));
  return v;
}

template <typename T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(1.0, std::abs(static_cast<double>(b[i])));
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) / denom);
  }
  return worst;
}

template <typename T>
void check_equivalence(double tol) {
  if (best_available() != Isa::kAvx2) {
    MESSAGE("AVX2 unavailable; equivalence check skipped");
    return;
  }
  std::mt19937_64 rng(7);
  // Shapes chosen to hit every micro-kernel edge: full blocks, single vectors, scalar tails, short rows.
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 16}, {7, 9, 33}, {13, 17, 19}, {64, 32, 96}, {106, 16, 106}, {5, 0, 3}};
  for (const auto& s : shapes) {
    const std::size_t m = s[0], k = s[1], n = s[2];
    CAPTURE(m);
    CAPTURE(k);
    CAPTURE(n);
    const auto a = random_vector<T>(m * k, rng);
    const auto b = random_vector<T>(k * n, rng);
    const auto bt = random_vector<T>(n * k, rng);
    const auto at = random_vector<T>(k * m, rng);
    for (bool acc : {false, true}) {
      auto c_ref = random_vector<T>(m * n, rng);
      auto c_simd = c_ref;
      scalar::gemm_nn(a.data(), b.data(), c_ref.data(), m, k, n, acc);
      avx2::gemm_nn(a.data(), b.data(), c_simd.data(), m, k, n, acc);
      CHECK(max_rel_diff(c_simd, c_ref) < tol);

      scalar::gemm_nt(a.data(), bt.data(), c_ref.data(), m, k, n, acc);
      avx2::gemm_nt(a.data(), bt.data(), c_simd.data(), m, k, n, acc);
      CHECK(max_rel_diff(c_simd, c_ref) < tol);

      scalar::gemm_tn(at.data(), b.data(), c_ref.data(), m, k, n, acc);
      avx2::gemm_tn(at.data(), b.data(), c_simd.data(), m, k, n, acc);
      CHECK(max_rel_diff(c_simd, c_ref) < tol);
    }
  }
  for (std::size_t n : {0u, 1u, 7u, 8u, 31u, 32u, 100u, 1001u}) {
    const auto x = random_vector<T>(n, rng);
    const auto y = random_vector<T>(n, rng);
    CHECK(std::abs(static_cast<double>(avx2::dot(x.data(), y.data(), n) - scalar::dot(x.data(), y.data(), n))) <
          tol * std::max<double>(1.0, static_cast<double>(n)));
    auto y_ref = y;
    auto y_simd = y;
    scalar::axpy(T(0.37), x.data(), y_ref.data(), n);
    avx2::axpy(T(0.37), x.data(), y_simd.data(), n);
    CHECK(max_rel_diff(y_simd, y_ref) < tol);
  }
}

}  // namespace

TEST_CASE("scalar gemm matches the textbook definition") {
  const double a[] = {1, 2, 3, 4, 5, 6};     // 2x3
  const double b[] = {7, 8, 9, 10, 11, 12};  // 3x2
  double c[4];
  scalar::gemm_nn(a, b, c, 2, 3, 2, false);
  CHECK(c[0] == 58);
  CHECK(c[1] == 64);
  CHECK(c[2] == 139);
  CHECK(c[3] == 154);
  // bᵀ stored 2x3: A·(Bᵀ)ᵀ
  const double bt[] = {7, 9, 11, 8, 10, 12};
  scalar::gemm_nt(a, bt, c, 2, 3, 2, false);
  CHECK(c[0] == 58);
  CHECK(c[3] == 154);
  // aᵀ stored 3x2
  const double at[] = {1, 4, 2, 5, 3, 6};
  scalar::gemm_tn(at, b, c, 2, 3, 2, false);
  CHECK(c[1] == 64);
  CHECK(c[2] == 139);
}

TEST_CASE("avx2 kernels agree with scalar reference in double precision") { check_equivalence<double>(1e-12); }

TEST_CASE("avx2 kernels agree with scalar reference in single precision") { check_equivalence<float>(1e-5); }

TEST_CASE("dispatch can be forced to the scalar path and back") {
  const Isa before = active_isa();
  set_active_isa(Isa::kScalar);
  CHECK(active_isa() == Isa::kScalar);
  const float x[] = {1, 2, 3};
  CHECK(dot(x, x, 3) == doctest::Approx(14.0));
  set_active_isa(before);
  CHECK(active_isa() == before);
  CHECK(isa_name(Isa::kAvx2) == "avx2");
}
