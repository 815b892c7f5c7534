#include <atomic>
#include <cstdlib>
#include <string>

#include "t2tbio/error.hpp"
#include "t2tbio/kernels.hpp"

namespace t2tbio::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(T2TBIO_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend detect() {
    if (const char* env = std::getenv("T2TBIO_KERNELS")) {
        const std::string want(env);
        if (want == "scalar") return Backend::scalar;
        if (want == "avx2" && backend_supported(Backend::avx2)) return Backend::avx2;
        if (want == "neon" && backend_supported(Backend::neon)) return Backend::neon;
    }
    if (backend_supported(Backend::avx2)) return Backend::avx2;
    if (backend_supported(Backend::neon)) return Backend::neon;
    return Backend::scalar;
}

std::atomic<Backend>& current() {
    static std::atomic<Backend> b{detect()};
    return b;
}

template <typename T>
struct Tables {
    KernelTable<T> scalar = detail::scalar_table<T>();
#if defined(T2TBIO_HAVE_AVX2)
    KernelTable<T> avx2 = detail::avx2_table<T>();
#endif
#if defined(T2TBIO_HAVE_NEON)
    KernelTable<T> neon = detail::neon_table<T>();
#endif
};

template <typename T>
const Tables<T>& tables() {
    static const Tables<T> t;
    return t;
}

}  // namespace

std::string_view backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
        case Backend::neon: return "neon";
    }
    return "unknown";
}

bool backend_supported(Backend b) {
    switch (b) {
        case Backend::scalar: return true;
        case Backend::avx2: {
            static const bool ok = cpu_has_avx2();
            return ok;
        }
        case Backend::neon:
#if defined(T2TBIO_HAVE_NEON)
            return true;
#else
            return false;
#endif
    }
    return false;
}

std::vector<Backend> supported_backends() {
    std::vector<Backend> out;
    for (Backend b : {Backend::scalar, Backend::avx2, Backend::neon}) {
        if (backend_supported(b)) out.push_back(b);
    }
    return out;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
    if (!backend_supported(b)) {
        fail(ErrorKind::usage, "kernel backend not supported on this CPU: " + std::string(backend_name(b)));
    }
    current().store(b, std::memory_order_relaxed);
}

template <typename T>
const KernelTable<T>& table(Backend b) {
    const auto& t = tables<T>();
    switch (b) {
#if defined(T2TBIO_HAVE_AVX2)
        case Backend::avx2: return t.avx2;
#endif
#if defined(T2TBIO_HAVE_NEON)
        case Backend::neon: return t.neon;
#endif
        default: return t.scalar;
    }
}

template <typename T>
const KernelTable<T>& active() {
    return table<T>(active_backend());
}

template const KernelTable<float>& table<float>(Backend);
template const KernelTable<double>& table<double>(Backend);
template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

}  // namespace t2tbio::kernels
