#include <arm_neon.h>

#include "t2tbio/kernels.hpp"

namespace t2tbio::kernels::detail {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
    float32x4_t acc0 = vdupq_n_f32(0.0f);
    float32x4_t acc1 = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
        acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    float acc = vaddvq_f32(vaddq_f32(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    for (; i + 2 <= n; i += 2) acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

float sum_squares_f32(const float* x, std::size_t n) { return dot_f32(x, x, n); }
double sum_squares_f64(const double* x, std::size_t n) { return dot_f64(x, x, n); }

}  // namespace

template <>
KernelTable<float> neon_table<float>() {
    return {&dot_f32, &axpy_f32, &sum_squares_f32};
}

template <>
KernelTable<double> neon_table<double>() {
    return {&dot_f64, &axpy_f64, &sum_squares_f64};
}

}  // namespace t2tbio::kernels::detail
