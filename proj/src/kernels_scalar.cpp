#include "geotok/kernels.hpp"

namespace geotok::kernels {
namespace {

template <typename T>
T dot_scalar(const T* x, const T* y, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <typename T>
void axpy_scalar(T a, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale_scalar(T a, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

}  // namespace

template <>
const KernelTable<float>& scalar_table<float>() {
    static const KernelTable<float> t{"scalar", &dot_scalar<float>, &axpy_scalar<float>,
                                      &scale_scalar<float>};
    return t;
}

template <>
const KernelTable<double>& scalar_table<double>() {
    static const KernelTable<double> t{"scalar", &dot_scalar<double>, &axpy_scalar<double>,
                                       &scale_scalar<double>};
    return t;
}

}  // namespace geotok::kernels
