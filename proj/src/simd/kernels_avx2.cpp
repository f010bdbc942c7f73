// Compiled with -mavx2 -mfma. Only reached through dispatch after a CPUID check.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "trace/simd.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define TRACE_HAVE_AVX2 1
#else
#define TRACE_HAVE_AVX2 0
#endif

namespace trace::simd::avx2 {

#if TRACE_HAVE_AVX2

namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using Reg = __m256;
  static constexpr std::size_t kWidth = 8;
  static Reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, Reg v) { _mm256_storeu_ps(p, v); }
  static Reg zero() { return _mm256_setzero_ps(); }
  static Reg set1(float x) { return _mm256_set1_ps(x); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_ps(a, b, c); }
  static Reg add(Reg a, Reg b) { return _mm256_add_ps(a, b); }
  static float hsum(Reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

template <>
struct Vec<double> {
  using Reg = __m256d;
  static constexpr std::size_t kWidth = 4;
  static Reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, Reg v) { _mm256_storeu_pd(p, v); }
  static Reg zero() { return _mm256_setzero_pd(); }
  static Reg set1(double x) { return _mm256_set1_pd(x); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_pd(a, b, c); }
  static Reg add(Reg a, Reg b) { return _mm256_add_pd(a, b); }
  static double hsum(Reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// MR rows of C by NV vector-widths of columns, full k reduction in registers.
template <typename T, int MR, int NV>
inline void micro_kernel(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                         std::size_t k, bool accumulate) {
  using V = Vec<T>;
  typename V::Reg acc[MR][NV];
  for (int r = 0; r < MR; ++r) {
    for (int v = 0; v < NV; ++v) {
      acc[r][v] = accumulate ? V::load(c + r * ldc + v * V::kWidth) : V::zero();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    typename V::Reg bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = V::load(b + p * ldb + v * V::kWidth);
    for (int r = 0; r < MR; ++r) {
      const typename V::Reg av = V::set1(a[r * lda + p]);
      for (int v = 0; v < NV; ++v) acc[r][v] = V::fmadd(av, bv[v], acc[r][v]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int v = 0; v < NV; ++v) V::store(c + r * ldc + v * V::kWidth, acc[r][v]);
  }
}

template <typename T, int MR>
void row_block(const T* a, const T* b, T* c, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t w = Vec<T>::kWidth;
  std::size_t j = 0;
  for (; j + 2 * w <= n; j += 2 * w) micro_kernel<T, MR, 2>(a, k, b + j, n, c + j, n, k, accumulate);
  for (; j + w <= n; j += w) micro_kernel<T, MR, 1>(a, k, b + j, n, c + j, n, k, accumulate);
  for (; j < n; ++j) {
    for (int r = 0; r < MR; ++r) {
      T acc = accumulate ? c[r * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
      c[r * n + j] = acc;
    }
  }
}

template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, std::vector<T>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t col = 0; col < cols; ++col) dst[col * rows + r] = src[r * cols + col];
  }
}

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

}  // namespace

bool compiled() { return true; }

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<T, 4>(a + i * k, b, c + i * n, k, n, accumulate);
  switch (m - i) {
    case 3: row_block<T, 3>(a + i * k, b, c + i * n, k, n, accumulate); break;
    case 2: row_block<T, 2>(a + i * k, b, c + i * n, k, n, accumulate); break;
    case 1: row_block<T, 1>(a + i * k, b, c + i * n, k, n, accumulate); break;
    default: break;
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  std::vector<T>& bt = scratch<T>();
  transpose_into(b, n, k, bt);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  std::vector<T>& at = scratch<T>();
  transpose_into(a, k, m, at);
  gemm_nn(at.data(), b, c, m, k, n, accumulate);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  typename V::Reg acc0 = V::zero(), acc1 = V::zero(), acc2 = V::zero(), acc3 = V::zero();
  std::size_t i = 0;
  for (; i + 4 * w <= n; i += 4 * w) {
    acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
    acc1 = V::fmadd(V::load(a + i + w), V::load(b + i + w), acc1);
    acc2 = V::fmadd(V::load(a + i + 2 * w), V::load(b + i + 2 * w), acc2);
    acc3 = V::fmadd(V::load(a + i + 3 * w), V::load(b + i + 3 * w), acc3);
  }
  for (; i + w <= n; i += w) acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
  T total = V::hsum(V::add(V::add(acc0, acc1), V::add(acc2, acc3)));
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  const typename V::Reg av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

#else  // !TRACE_HAVE_AVX2

bool compiled() { return false; }

namespace {
[[noreturn]] void unavailable() { throw std::logic_error("AVX2 kernels not compiled into this build"); }
}  // namespace

template <typename T>
void gemm_nn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
template <typename T>
void gemm_nt(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
template <typename T>
void gemm_tn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
template <typename T>
T dot(const T*, const T*, std::size_t) { unavailable(); }
template <typename T>
void axpy(T, const T*, T*, std::size_t) { unavailable(); }

#endif

#define TRACE_INSTANTIATE(T)                                                                          \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template T dot<T>(const T*, const T*, std::size_t);                                                 \
  template void axpy<T>(T, const T*, T*, std::size_t);

TRACE_INSTANTIATE(float)
TRACE_INSTANTIATE(double)
#undef TRACE_INSTANTIATE

}  // namespace trace::simd::avx2
