#include "geotok/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

namespace geotok::kernels {
namespace {

bool env_requests_scalar() {
    const char* v = std::getenv("GEOTOK_KERNELS");
    return v != nullptr && std::string_view(v) == "scalar";
}

std::atomic<bool>& forced_flag() {
    static std::atomic<bool> flag{env_requests_scalar()};
    return flag;
}

}  // namespace

bool cpu_supports_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
    static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

void force_scalar(bool on) { forced_flag().store(on); }
bool scalar_forced() { return forced_flag().load(); }

template <typename T>
const KernelTable<T>& active() {
    if (!scalar_forced()) {
        if (const auto* t = avx2_table<T>()) return *t;
    }
    return scalar_table<T>();
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto& kt = active<T>();
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            if (arow[p] != T(0)) kt.axpy(arow[p], b + p * n, crow, n);
        }
    }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto& kt = active<T>();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += kt.dot(arow, b + j * k, k);
    }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto& kt = active<T>();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            if (arow[p] != T(0)) kt.axpy(arow[p], brow, c + p * n, n);
        }
    }
}

template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();
template void gemm_nn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nn<double>(const double*, const double*, double*, std::size_t, std::size_t,
                              std::size_t);
template void gemm_nt<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<double>(const double*, const double*, double*, std::size_t, std::size_t,
                              std::size_t);
template void gemm_tn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<double>(const double*, const double*, double*, std::size_t, std::size_t,
                              std::size_t);

}  // namespace geotok::kernels
