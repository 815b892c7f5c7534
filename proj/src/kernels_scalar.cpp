#include "t2tbio/kernels.hpp"

namespace t2tbio::kernels::detail {
namespace {

template <typename T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
void axpy_scalar(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T sum_squares_scalar(const T* x, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
    return acc;
}

}  // namespace

template <typename T>
KernelTable<T> scalar_table() {
    return {&dot_scalar<T>, &axpy_scalar<T>, &sum_squares_scalar<T>};
}

template KernelTable<float> scalar_table<float>();
template KernelTable<double> scalar_table<double>();

}  // namespace t2tbio::kernels::detail
