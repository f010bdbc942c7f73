#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "trace/simd.hpp"

namespace trace::simd {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("TRACE_SIMD")) {
    if (std::string(env) == "scalar") return Isa::kScalar;
  }
  return best_available();
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

Isa best_available() { return (avx2::compiled() && cpu_has_avx2()) ? Isa::kAvx2 : Isa::kScalar; }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (isa == Isa::kAvx2 && best_available() != Isa::kAvx2) {
    throw std::runtime_error("AVX2 kernels are not available on this CPU/build");
  }
  current().store(isa, std::memory_order_relaxed);
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::kAvx2) {
    avx2::gemm_nn(a, b, c, m, k, n, accumulate);
  } else {
    scalar::gemm_nn(a, b, c, m, k, n, accumulate);
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::kAvx2) {
    avx2::gemm_nt(a, b, c, m, k, n, accumulate);
  } else {
    scalar::gemm_nt(a, b, c, m, k, n, accumulate);
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::kAvx2) {
    avx2::gemm_tn(a, b, c, m, k, n, accumulate);
  } else {
    scalar::gemm_tn(a, b, c, m, k, n, accumulate);
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  return active_isa() == Isa::kAvx2 ? avx2::dot(a, b, n) : scalar::dot(a, b, n);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  if (active_isa() == Isa::kAvx2) {
    avx2::axpy(alpha, x, y, n);
  } else {
    scalar::axpy(alpha, x, y, n);
  }
}

#define TRACE_INSTANTIATE(T)                                                                          \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template T dot<T>(const T*, const T*, std::size_t);                                                 \
  template void axpy<T>(T, const T*, T*, std::size_t);

TRACE_INSTANTIATE(float)
TRACE_INSTANTIATE(double)
#undef TRACE_INSTANTIATE

}  // namespace trace::simd
