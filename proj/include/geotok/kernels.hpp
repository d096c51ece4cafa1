#pragma once

// Dense inner-loop kernels. Every kernel has a portable scalar reference
// implementation; an AVX2/FMA variant is compiled into the same binary and
// selected once at runtime when the CPU supports it.
//
// Set GEOTOK_KERNELS=scalar in the environment to pin the reference path.

#include <cstddef>
#include <string_view>

namespace geotok::kernels {

template <typename T>
struct KernelTable {
    std::string_view name;
    // sum_i x[i] * y[i]
    T (*dot)(const T* x, const T* y, std::size_t n);
    // y[i] += a * x[i]
    void (*axpy)(T a, const T* x, T* y, std::size_t n);
    // y[i] *= a
    void (*scale)(T a, T* y, std::size_t n);
};

template <typename T>
const KernelTable<T>& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks AVX2+FMA.
template <typename T>
const KernelTable<T>* avx2_table();

template <typename T>
const KernelTable<T>& active();

bool cpu_supports_avx2_fma();

// Overrides runtime selection; intended for tests and benchmarks.
void force_scalar(bool on);
bool scalar_forced();

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace geotok::kernels
