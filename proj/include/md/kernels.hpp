#pragma once

#include <algorithm>
#include <cstring>
#include <memory>

#include "md/tensor.hpp"

namespace md {

// Polynomial expf, accurate to ~3 ulp. Auto-vectorizes in the scan inner loop,
// where std::expf is the bottleneck.
inline float fast_expf(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    float z = x * 1.44269504088896341f;
    float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;  // ln2 split hi/lo
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    int32_t e = static_cast<int32_t>(n);
    int32_t bits;
    std::memcpy(&bits, &p, 4);
    bits += e << 23;
    std::memcpy(&p, &bits, 4);
    return p;
}

// Polynomial logf (Cephes mantissa polynomial), ~3 ulp for x > 0. Branch-free
// (selects only) so activation loops using it auto-vectorize; libm's log1pf in
// the softplus path was the single most expensive op in a training step.
inline float fast_logf(float x) {
    int32_t bits;
    std::memcpy(&bits, &x, 4);
    int32_t e = ((bits >> 23) & 0xFF) - 126;  // x = m * 2^e with m in [0.5, 1)
    bits = (bits & 0x007FFFFF) | 0x3F000000;
    float m;
    std::memcpy(&m, &bits, 4);
    bool low = m < 0.70710678f;  // renormalize m into [sqrt(1/2), sqrt(2))
    m = low ? m + m : m;
    e = low ? e - 1 : e;
    float f = m - 1.0f;
    float p = 7.0376836292e-2f;
    p = p * f - 1.1514610310e-1f;
    p = p * f + 1.1676998740e-1f;
    p = p * f - 1.2420140846e-1f;
    p = p * f + 1.4249322787e-1f;
    p = p * f - 1.6668057665e-1f;
    p = p * f + 2.0000714765e-1f;
    p = p * f - 2.4999993993e-1f;
    p = p * f + 3.3333331174e-1f;
    float f2 = f * f;
    float fe = static_cast<float>(e);
    float r = f2 * f * p;
    r += -2.12194440e-4f * fe;
    r -= 0.5f * f2;
    r = f + r;
    return r + 0.693359375f * fe;
}

// softplus(x) = log(1 + e^x), evaluated as max(x,0) + log(1 + e^-|x|) so the
// exp never overflows; sigmoid comes out of the same e^-|x| for free.
inline float fast_softplus(float x) {
    float e = fast_expf(-std::fabs(x));
    float lp = fast_logf(1.0f + e);
    return (x > 0.0f ? x : 0.0f) + lp;
}

// phi(z) = (e^z - 1)/z with a series branch near zero; phi(0) = 1.
// Written branch-free (select, safe divisor) so the scan loops vectorize.
inline float ssm_phi(float expz, float z) {
    bool big = std::fabs(z) >= 0.02f;
    float zs = big ? z : 1.0f;
    float ratio = (expz - 1.0f) / zs;
    float series = 1.0f + z * (0.5f + z * (1.0f / 6.0f + z * (1.0f / 24.0f)));
    return big ? ratio : series;
}

// d/dz phi(z) = (e^z (z - 1) + 1) / z^2.
inline float ssm_dphi(float expz, float z) {
    bool big = std::fabs(z) >= 0.02f;
    float zs = big ? z : 1.0f;
    float ratio = (expz * (z - 1.0f) + 1.0f) / (zs * zs);
    float series = 0.5f + z * (1.0f / 3.0f + z * (1.0f / 8.0f + z * (1.0f / 30.0f)));
    return big ? ratio : series;
}

// phi and dphi together, sharing a single division (the divide dominates the
// scan's backward loop otherwise). Values match ssm_phi/ssm_dphi to 1 ulp.
inline void ssm_phi_pair(float expz, float z, float& phi, float& dphi) {
    bool big = std::fabs(z) >= 0.02f;
    float zs = big ? z : 1.0f;
    float rz = 1.0f / zs;
    float pr = (expz - 1.0f) * rz;
    float dr = (expz * (z - 1.0f) + 1.0f) * rz * rz;
    float ps = 1.0f + z * (0.5f + z * (1.0f / 6.0f + z * (1.0f / 24.0f)));
    float ds = 0.5f + z * (1.0f / 3.0f + z * (1.0f / 8.0f + z * (1.0f / 30.0f)));
    phi = big ? pr : ps;
    dphi = big ? dr : ds;
}

// C = A (m x k) * B (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A^T (k x m) * B (k x n) -> m x n
Tensor matmul_ta(const Tensor& a, const Tensor& b);
// C = A (m x k) * B^T (n x k) -> m x n
Tensor matmul_tb(const Tensor& a, const Tensor& b);

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out = Tensor::uninit(a.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] = f(a.data[i]);
    return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
    check_shape(a, b, "zip");
    Tensor out = Tensor::uninit(a.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
}

inline Tensor ew_add(const Tensor& a, const Tensor& b) { return zip(a, b, [](float x, float y) { return x + y; }); }
inline Tensor ew_sub(const Tensor& a, const Tensor& b) { return zip(a, b, [](float x, float y) { return x - y; }); }
inline Tensor ew_mul(const Tensor& a, const Tensor& b) { return zip(a, b, [](float x, float y) { return x * y; }); }
inline Tensor ew_scale(const Tensor& a, float s) { return map(a, [s](float x) { return x * s; }); }

void axpy(Tensor& y, float a, const Tensor& x);  // y += a * x

// Causal depthwise 1-D convolution along rows. x: T x C, w: K x C, b: C.
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b);
void conv1d_causal_back(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw, Tensor& gb);

// Selective state-space scan, fused discretization + recurrence.
//   z = delta[t,c] * A[c,s]; Abar = exp(z); Bbar = phi(z) * delta[t,c] * B[t,s]
//   h[t,c,s] = Abar h[t-1,c,s] + Bbar x[t,c];  y[t,c] = sum_s C[t,s] h[t,c,s]
// Hidden-state history h, state-major: row t holds [s][c] blocks so per-state
// channel sweeps are contiguous (the scan's hot loops vectorize over c).
// Abar/phi/dphi are cheaper to recompute in the jvp/backward than to cache:
// storing them triples the scan's memory traffic for arithmetic that
// vectorizes anyway. The buffer is left uninitialised on allocation; every
// entry is written.
struct ScanCache {
    std::unique_ptr<float[]> h;
    int t_len = 0;
    size_t row = 0;  // S * C
};

Tensor ssm_scan(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                ScanCache* cache);

// Tangent propagation; null tangent pointers mean zero.
Tensor ssm_scan_jvp(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                    const ScanCache& cache, const Tensor* d_delta, const Tensor* d_b, const Tensor* d_c,
                    const Tensor* d_x);

void ssm_scan_back(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                   const ScanCache& cache, const Tensor& gy, Tensor& g_delta, Tensor& g_a, Tensor& g_b,
                   Tensor& g_c, Tensor& g_x);

}  // namespace md
