#pragma once

// Dense inner-loop kernels used by the model. Each kernel has a scalar reference
// implementation and vectorised variants (AVX2+FMA on x86-64, NEON on AArch64).
// The variant is chosen once at startup from CPU features and can be overridden
// with T2TBIO_KERNELS=scalar|avx2|neon or set_backend().

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace t2tbio::kernels {

enum class Backend { scalar, avx2, neon };

std::string_view backend_name(Backend b);
bool backend_supported(Backend b);
std::vector<Backend> supported_backends();

Backend active_backend();
// Throws Error(usage) when the backend is not available on this machine.
void set_backend(Backend b);

template <typename T>
struct KernelTable {
    T (*dot)(const T* a, const T* b, std::size_t n);
    void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
    T (*sum_squares)(const T* x, std::size_t n);
};

template <typename T>
const KernelTable<T>& table(Backend b);

template <typename T>
const KernelTable<T>& active();

// sum_i a[i] * b[i]
template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
    return active<T>().dot(a.data(), b.data(), a.size());
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    active<T>().axpy(alpha, x.data(), y.data(), x.size());
}

template <typename T>
inline T sum_squares(std::span<const T> x) {
    return active<T>().sum_squares(x.data(), x.size());
}

namespace detail {
template <typename T>
KernelTable<T> scalar_table();
#if defined(T2TBIO_HAVE_AVX2)
template <typename T>
KernelTable<T> avx2_table();
#endif
#if defined(T2TBIO_HAVE_NEON)
template <typename T>
KernelTable<T> neon_table();
#endif
}  // namespace detail

}  // namespace t2tbio::kernels
