#include "md/kernels.hpp"

#include <malloc.h>

namespace md {

namespace {

// Activation-sized buffers (hundreds of KB) sit above glibc's default mmap
// threshold, so every tensor allocation would be a fresh mmap: a page fault
// and a kernel page-zeroing per touch. Keeping them in the arena lets freed
// blocks be reused immediately.
const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 64 << 20);
    return true;
}();

// Register-tiled C = A * B (all row-major, C is m x n). Each C element is
// accumulated over k in ascending order and stored exactly once; the 4 x 32
// accumulator block stays in vector registers, so the inner loop runs 8 FMAs
// per 2 loads instead of the load/store-bound saxpy form.
constexpr int kRowTile = 8;

// One column panel [j0, j0 + JT) of the tiled product.
template <int JT>
void mm_panel(const float* __restrict a, const float* __restrict b, float* __restrict c, int m,
              int k, int n, int j0) {
    int i0 = 0;
    for (; i0 + kRowTile <= m; i0 += kRowTile) {
        float acc[kRowTile][JT] = {};
        const float* a0 = a + static_cast<size_t>(i0) * k;
        for (int kk = 0; kk < k; ++kk) {
            const float* br = b + static_cast<size_t>(kk) * n + j0;
            for (int ib = 0; ib < kRowTile; ++ib) {
                float av = a0[static_cast<size_t>(ib) * k + kk];
                for (int jj = 0; jj < JT; ++jj) acc[ib][jj] += av * br[jj];
            }
        }
        for (int ib = 0; ib < kRowTile; ++ib) {
            float* cr = c + static_cast<size_t>(i0 + ib) * n + j0;
            for (int jj = 0; jj < JT; ++jj) cr[jj] = acc[ib][jj];
        }
    }
    for (; i0 < m; ++i0) {
        float acc[JT] = {};
        const float* ar = a + static_cast<size_t>(i0) * k;
        for (int kk = 0; kk < k; ++kk) {
            const float* br = b + static_cast<size_t>(kk) * n + j0;
            float av = ar[kk];
            for (int jj = 0; jj < JT; ++jj) acc[jj] += av * br[jj];
        }
        float* cr = c + static_cast<size_t>(i0) * n + j0;
        for (int jj = 0; jj < JT; ++jj) cr[jj] = acc[jj];
    }
}

void mm_tile(const float* __restrict a, const float* __restrict b, float* __restrict c, int m,
             int k, int n) {
    int j0 = 0;
    for (; j0 + 32 <= n; j0 += 32) mm_panel<32>(a, b, c, m, k, n, j0);
    if (j0 < n) {
        // Zero-pad the tail columns of B to a full 32-wide panel; the padded
        // columns compute zeros that are simply not copied back. Far faster
        // than a variable-width inner loop, and the real columns see the
        // identical accumulation order.
        int jn = n - j0;
        std::vector<float> bp(static_cast<size_t>(k) * 32, 0.0f);
        for (int kk = 0; kk < k; ++kk) {
            const float* br = b + static_cast<size_t>(kk) * n + j0;
            float* pr = &bp[static_cast<size_t>(kk) * 32];
            for (int jj = 0; jj < jn; ++jj) pr[jj] = br[jj];
        }
        std::vector<float> cp(static_cast<size_t>(m) * 32);
        mm_panel<32>(a, bp.data(), cp.data(), m, k, 32, 0);
        for (int i = 0; i < m; ++i) {
            const float* pr = &cp[static_cast<size_t>(i) * 32];
            float* cr = c + static_cast<size_t>(i) * n + j0;
            for (int jj = 0; jj < jn; ++jj) cr[jj] = pr[jj];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor c = Tensor::uninit({m, n});
    mm_tile(a.data.data(), b.data.data(), c.data.data(), m, k, n);
    return c;
}

Tensor matmul_ta(const Tensor& a, const Tensor& b) {
    int k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul_ta: inner dimension mismatch");
    std::vector<float> at(static_cast<size_t>(m) * k);
    for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i)
            at[static_cast<size_t>(i) * k + kk] = a.data[static_cast<size_t>(kk) * m + i];
    Tensor c = Tensor::uninit({m, n});
    mm_tile(at.data(), b.data.data(), c.data.data(), m, k, n);
    return c;
}

Tensor matmul_tb(const Tensor& a, const Tensor& b) {
    int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) throw std::invalid_argument("matmul_tb: inner dimension mismatch");
    std::vector<float> bt(static_cast<size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk)
            bt[static_cast<size_t>(kk) * n + j] = b.data[static_cast<size_t>(j) * k + kk];
    Tensor c = Tensor::uninit({m, n});
    mm_tile(a.data.data(), bt.data(), c.data.data(), m, k, n);
    return c;
}

void axpy(Tensor& y, float a, const Tensor& x) {
    check_shape(y, x, "axpy");
    for (int64_t i = 0; i < y.size(); ++i) y.data[i] += a * x.data[i];
}

Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
    int t_len = x.rows(), c_len = x.cols(), k_len = w.rows();
    if (w.cols() != c_len || b.size() != c_len) throw std::invalid_argument("conv1d: dim mismatch");
    Tensor y = Tensor::zeros({t_len, c_len});
    for (int t = 0; t < t_len; ++t) {
        float* yr = &y.data[static_cast<size_t>(t) * c_len];
        for (int c = 0; c < c_len; ++c) yr[c] = b.data[c];
        for (int k = 0; k < k_len; ++k) {
            int ts = t - (k_len - 1) + k;
            if (ts < 0) continue;
            const float* xr = &x.data[static_cast<size_t>(ts) * c_len];
            const float* wr = &w.data[static_cast<size_t>(k) * c_len];
            for (int c = 0; c < c_len; ++c) yr[c] += wr[c] * xr[c];
        }
    }
    return y;
}

void conv1d_causal_back(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw, Tensor& gb) {
    int t_len = x.rows(), c_len = x.cols(), k_len = w.rows();
    gx = Tensor::zeros({t_len, c_len});
    gw = Tensor::zeros({k_len, c_len});
    gb = Tensor::zeros({c_len});
    for (int t = 0; t < t_len; ++t) {
        const float* gr = &gy.data[static_cast<size_t>(t) * c_len];
        for (int c = 0; c < c_len; ++c) gb.data[c] += gr[c];
        for (int k = 0; k < k_len; ++k) {
            int ts = t - (k_len - 1) + k;
            if (ts < 0) continue;
            const float* xr = &x.data[static_cast<size_t>(ts) * c_len];
            const float* wr = &w.data[static_cast<size_t>(k) * c_len];
            float* gxr = &gx.data[static_cast<size_t>(ts) * c_len];
            float* gwr = &gw.data[static_cast<size_t>(k) * c_len];
            for (int c = 0; c < c_len; ++c) {
                gxr[c] += wr[c] * gr[c];
                gwr[c] += xr[c] * gr[c];
            }
        }
    }
}

static void scan_check(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x) {
    int t_len = x.rows(), c_len = x.cols(), s_len = a.cols();
    if (delta.rows() != t_len || delta.cols() != c_len || a.rows() != c_len || b.rows() != t_len ||
        b.cols() != s_len || c.rows() != t_len || c.cols() != s_len)
        throw std::invalid_argument("ssm_scan: dim mismatch");
}

namespace {

// A [C x S] transposed to [S x C] so channel sweeps read contiguously.
std::vector<float> transpose_a(const Tensor& a) {
    int c_len = a.rows(), s_len = a.cols();
    std::vector<float> at(static_cast<size_t>(s_len) * c_len);
    for (int ci = 0; ci < c_len; ++ci)
        for (int s = 0; s < s_len; ++s)
            at[static_cast<size_t>(s) * c_len + ci] = a.data[static_cast<size_t>(ci) * s_len + s];
    return at;
}

}  // namespace

Tensor ssm_scan(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                ScanCache* cache) {
    scan_check(delta, a, b, c, x);
    int t_len = x.rows(), c_len = x.cols(), s_len = a.cols();
    size_t row = static_cast<size_t>(c_len) * s_len;
    Tensor y = Tensor::zeros({t_len, c_len});
    std::vector<float> at = transpose_a(a);
    const std::vector<float> hzero(row, 0.0f);  // stands in for h_{-1}
    // Without a cache only two rows of history are needed (ping-pong), and the
    // Abar/phi/dphi rows are written to throwaway scratch.
    std::vector<float> scratch;
    if (cache) {
        cache->h.reset(new float[static_cast<size_t>(t_len) * row]);
        cache->t_len = t_len;
        cache->row = row;
    } else {
        scratch.resize(2 * row);
    }
    const float* hp = hzero.data();
    for (int t = 0; t < t_len; ++t) {
        const float* __restrict dr = &delta.data[static_cast<size_t>(t) * c_len];
        const float* __restrict br = &b.data[static_cast<size_t>(t) * s_len];
        const float* __restrict cr = &c.data[static_cast<size_t>(t) * s_len];
        const float* __restrict xr = &x.data[static_cast<size_t>(t) * c_len];
        float* __restrict hr = cache ? &cache->h[t * row] : &scratch[(t & 1) * row];
        float* __restrict yr = &y.data[static_cast<size_t>(t) * c_len];
        for (int s = 0; s < s_len; ++s) {
            const float* __restrict as = &at[static_cast<size_t>(s) * c_len];
            const float* __restrict hps = hp + static_cast<size_t>(s) * c_len;
            float* __restrict hs = hr + static_cast<size_t>(s) * c_len;
            float bv = br[s], cv = cr[s];
            for (int ci = 0; ci < c_len; ++ci) {
                float d = dr[ci];
                float z = d * as[ci];
                float ab = fast_expf(z);
                float phi, dphi;
                ssm_phi_pair(ab, z, phi, dphi);
                float bb = phi * d * bv;
                float hv = ab * hps[ci] + bb * xr[ci];
                hs[ci] = hv;
                yr[ci] += cv * hv;
            }
        }
        hp = hr;
    }
    return y;
}

Tensor ssm_scan_jvp(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                    const ScanCache& cache, const Tensor* d_delta, const Tensor* d_b, const Tensor* d_c,
                    const Tensor* d_x) {
    scan_check(delta, a, b, c, x);
    int t_len = x.rows(), c_len = x.cols(), s_len = a.cols();
    size_t row = static_cast<size_t>(c_len) * s_len;
    Tensor dy = Tensor::zeros({t_len, c_len});
    std::vector<float> dh(row, 0.0f);
    std::vector<float> at = transpose_a(a);
    // Null tangents read from shared zero rows; keeps the hot loop branch-free.
    const std::vector<float> zc(static_cast<size_t>(c_len), 0.0f);
    const std::vector<float> zs(static_cast<size_t>(s_len), 0.0f);
    const std::vector<float> hzero(row, 0.0f);
    for (int t = 0; t < t_len; ++t) {
        const float* __restrict dr = &delta.data[static_cast<size_t>(t) * c_len];
        const float* __restrict br = &b.data[static_cast<size_t>(t) * s_len];
        const float* __restrict cr = &c.data[static_cast<size_t>(t) * s_len];
        const float* __restrict xr = &x.data[static_cast<size_t>(t) * c_len];
        const float* __restrict ddr = d_delta ? &d_delta->data[static_cast<size_t>(t) * c_len] : zc.data();
        const float* __restrict dbr = d_b ? &d_b->data[static_cast<size_t>(t) * s_len] : zs.data();
        const float* __restrict dcr = d_c ? &d_c->data[static_cast<size_t>(t) * s_len] : zs.data();
        const float* __restrict dxr = d_x ? &d_x->data[static_cast<size_t>(t) * c_len] : zc.data();
        // h_{-1} and its tangent are zero, handled by the hzero row and the
        // zero-initialised dh carry.
        const float* __restrict hp = t > 0 ? &cache.h[(t - 1) * row] : hzero.data();
        const float* __restrict hr = &cache.h[t * row];
        float* __restrict dyr = &dy.data[static_cast<size_t>(t) * c_len];
        for (int s = 0; s < s_len; ++s) {
            const float* __restrict as = &at[static_cast<size_t>(s) * c_len];
            const float* __restrict hps = hp + static_cast<size_t>(s) * c_len;
            const float* __restrict hs = hr + static_cast<size_t>(s) * c_len;
            float* __restrict dhs = dh.data() + static_cast<size_t>(s) * c_len;
            float bv = br[s], cv = cr[s], dbv = dbr[s], dcv = dcr[s];
            for (int ci = 0; ci < c_len; ++ci) {
                float d = dr[ci];
                float dd = ddr[ci];
                float z = d * as[ci];
                float ab = fast_expf(z);
                float phi, dphi;
                ssm_phi_pair(ab, z, phi, dphi);
                float bb = phi * d * bv;
                float dz = dd * as[ci];
                float dab = ab * dz;
                float dbb = dphi * dz * d * bv + phi * dd * bv + phi * d * dbv;
                float dhv = dab * hps[ci] + ab * dhs[ci] + dbb * xr[ci] + bb * dxr[ci];
                dyr[ci] += cv * dhv + dcv * hs[ci];
                dhs[ci] = dhv;
            }
        }
    }
    return dy;
}

void ssm_scan_back(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& x,
                   const ScanCache& cache, const Tensor& gy, Tensor& g_delta, Tensor& g_a, Tensor& g_b,
                   Tensor& g_c, Tensor& g_x) {
    scan_check(delta, a, b, c, x);
    int t_len = x.rows(), c_len = x.cols(), s_len = a.cols();
    g_delta = Tensor::zeros({t_len, c_len});
    g_a = Tensor::zeros({c_len, s_len});
    g_b = Tensor::zeros({t_len, s_len});
    g_c = Tensor::zeros({t_len, s_len});
    g_x = Tensor::zeros({t_len, c_len});
    size_t row = static_cast<size_t>(c_len) * s_len;
    std::vector<float> gh(row, 0.0f);
    std::vector<float> at = transpose_a(a);
    std::vector<float> gat(row, 0.0f);  // g_a accumulated in [S x C] layout
    // Per-state scratch for the g_b / g_c contributions; the strict-order
    // reductions over channels run as a separate cheap pass.
    std::vector<float> gbt(static_cast<size_t>(c_len)), gct(static_cast<size_t>(c_len));
    const std::vector<float> hzero(row, 0.0f);
    for (int t = t_len - 1; t >= 0; --t) {
        const float* __restrict dr = &delta.data[static_cast<size_t>(t) * c_len];
        const float* __restrict br = &b.data[static_cast<size_t>(t) * s_len];
        const float* __restrict cr = &c.data[static_cast<size_t>(t) * s_len];
        const float* __restrict xr = &x.data[static_cast<size_t>(t) * c_len];
        const float* __restrict gr = &gy.data[static_cast<size_t>(t) * c_len];
        const float* __restrict hp = t > 0 ? &cache.h[(t - 1) * row] : hzero.data();
        const float* __restrict hr = &cache.h[t * row];
        float* __restrict gdr = &g_delta.data[static_cast<size_t>(t) * c_len];
        float* __restrict gbr = &g_b.data[static_cast<size_t>(t) * s_len];
        float* __restrict gcr = &g_c.data[static_cast<size_t>(t) * s_len];
        float* __restrict gxr = &g_x.data[static_cast<size_t>(t) * c_len];
        for (int s = 0; s < s_len; ++s) {
            const float* __restrict as = &at[static_cast<size_t>(s) * c_len];
            const float* __restrict hps = hp + static_cast<size_t>(s) * c_len;
            const float* __restrict hs = hr + static_cast<size_t>(s) * c_len;
            float* __restrict ghs = gh.data() + static_cast<size_t>(s) * c_len;
            float* __restrict gas = gat.data() + static_cast<size_t>(s) * c_len;
            float bv = br[s], cv = cr[s];
            for (int ci = 0; ci < c_len; ++ci) {
                float gyv = gr[ci];
                float ghv = ghs[ci] + gyv * cv;
                float d = dr[ci];
                float z = d * as[ci];
                float ab = fast_expf(z);
                float phi, dphi;
                ssm_phi_pair(ab, z, phi, dphi);
                float gbb = ghv * xr[ci];
                float gz = ghv * hps[ci] * ab + gbb * dphi * d * bv;
                gxr[ci] += ghv * phi * d * bv;
                gdr[ci] += gz * as[ci] + gbb * phi * bv;
                gas[ci] += gz * d;
                gbt[ci] = gbb * phi * d;
                gct[ci] = gyv * hs[ci];
                ghs[ci] = ghv * ab;  // carried to t-1
            }
            float gb_acc = 0.0f, gc_acc = 0.0f;
            for (int ci = 0; ci < c_len; ++ci) {
                gb_acc += gbt[ci];
                gc_acc += gct[ci];
            }
            gbr[s] += gb_acc;
            gcr[s] += gc_acc;
        }
    }
    for (int ci = 0; ci < c_len; ++ci)
        for (int s = 0; s < s_len; ++s)
            g_a.data[static_cast<size_t>(ci) * s_len + s] = gat[static_cast<size_t>(s) * c_len + ci];
}

}  // namespace md
