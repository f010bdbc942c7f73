#pragma once

// Dense arithmetic kernels with a scalar reference path and an AVX2/FMA path.
//
// The active instruction set is chosen once at first use from the CPU's
// capabilities; TRACE_SIMD=scalar forces the reference path. Both paths
// implement the same contracts and are equivalence-tested against each other.

#include <cstddef>
#include <string_view>

namespace trace::simd {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

// Best instruction set supported by this CPU and build.
Isa best_available();

// Instruction set used by the dispatching entry points below.
Isa active_isa();

// Overrides the dispatch choice. Requesting an unavailable ISA throws.
void set_active_isa(Isa isa);

// Row-major GEMM variants. When `accumulate` is false C is overwritten.
//   gemm_nn: C[m×n] (+)= A[m×k] · B[k×n]
//   gemm_nt: C[m×n] (+)= A[m×k] · B[n×k]ᵀ
//   gemm_tn: C[m×n] (+)= A[k×m]ᵀ · B[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

template <typename T>
T dot(const T* a, const T* b, std::size_t n);

// y += alpha * x
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);

// Explicit per-ISA entry points, used by the equivalence tests.
namespace scalar {
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
T dot(const T* a, const T* b, std::size_t n);
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
}  // namespace scalar

namespace avx2 {
bool compiled();
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
T dot(const T* a, const T* b, std::size_t n);
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
}  // namespace avx2

}  // namespace trace::simd
