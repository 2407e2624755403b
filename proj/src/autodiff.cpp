#include "md/autodiff.hpp"

namespace md {

Graph::V Graph::push(Tensor v, Tensor tan, std::function<void(Graph&)> back) {
    nodes.push_back(Node{std::move(v), std::move(tan), {}, std::move(back)});
    return static_cast<V>(nodes.size() - 1);
}

Tensor& Graph::gbuf(V id) {
    Node& n = nodes[id];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

void Graph::accum(V id, const Tensor& g) {
    Node& n = nodes[id];
    if (n.grad.empty()) n.grad = g;
    else axpy(n.grad, 1.0f, g);
}

void Graph::accum(V id, Tensor&& g) {
    Node& n = nodes[id];
    if (n.grad.empty()) n.grad = std::move(g);
    else axpy(n.grad, 1.0f, g);
}

void Graph::accum_scaled(V id, float s, const Tensor& g) {
    Node& n = nodes[id];
    if (n.grad.empty()) n.grad = ew_scale(g, s);
    else axpy(n.grad, s, g);
}

Graph::V Graph::constant(Tensor v) { return push(std::move(v), {}, nullptr); }

Graph::V Graph::input(Tensor v, Tensor tan) {
    if (!tan.empty()) check_shape(v, tan, "input");
    return push(std::move(v), std::move(tan), nullptr);
}

Graph::V Graph::param(const Tensor& p) {
    auto it = param_ids_.find(p.data.data());
    if (it != param_ids_.end()) return it->second;
    V id = push(p, {}, nullptr);
    param_ids_.emplace(p.data.data(), id);
    return id;
}

Tensor Graph::grad_of(const Tensor& p) const {
    auto it = param_ids_.find(p.data.data());
    if (it == param_ids_.end() || nodes[it->second].grad.empty()) return Tensor::zeros(p.shape);
    return nodes[it->second].grad;
}

void Graph::backward(V loss) {
    if (nodes[loss].val.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    gbuf(loss).data[0] = 1.0f;
    for (V i = loss; i >= 0; --i) {
        Node& n = nodes[i];
        if (n.back && !n.grad.empty()) n.back(*this);
    }
}

Graph::V Graph::add(V a, V b) {
    check_shape(nodes[a].val, nodes[b].val, "add");
    Tensor tan;
    if (has_tan(a) && has_tan(b)) tan = ew_add(nodes[a].tan, nodes[b].tan);
    else if (has_tan(a)) tan = nodes[a].tan;
    else if (has_tan(b)) tan = nodes[b].tan;
    V id = push(ew_add(nodes[a].val, nodes[b].val), std::move(tan), nullptr);
    nodes[id].back = [a, b, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        g.accum(a, gy);
        g.accum(b, gy);
    };
    return id;
}

Graph::V Graph::sub(V a, V b) {
    check_shape(nodes[a].val, nodes[b].val, "sub");
    Tensor tan;
    if (has_tan(a) && has_tan(b)) tan = ew_sub(nodes[a].tan, nodes[b].tan);
    else if (has_tan(a)) tan = nodes[a].tan;
    else if (has_tan(b)) tan = ew_scale(nodes[b].tan, -1.0f);
    V id = push(ew_sub(nodes[a].val, nodes[b].val), std::move(tan), nullptr);
    nodes[id].back = [a, b, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        g.accum(a, gy);
        g.accum_scaled(b, -1.0f, gy);
    };
    return id;
}

Graph::V Graph::mul(V a, V b) {
    check_shape(nodes[a].val, nodes[b].val, "mul");
    Tensor tan;
    if (has_tan(a)) tan = ew_mul(nodes[a].tan, nodes[b].val);
    if (has_tan(b)) {
        Tensor t2 = ew_mul(nodes[a].val, nodes[b].tan);
        tan = tan.empty() ? std::move(t2) : ew_add(tan, t2);
    }
    V id = push(ew_mul(nodes[a].val, nodes[b].val), std::move(tan), nullptr);
    nodes[id].back = [a, b, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        g.accum(a, ew_mul(gy, g.nodes[b].val));
        g.accum(b, ew_mul(gy, g.nodes[a].val));
    };
    return id;
}

Graph::V Graph::scale(V a, float s) {
    Tensor tan = has_tan(a) ? ew_scale(nodes[a].tan, s) : Tensor{};
    V id = push(ew_scale(nodes[a].val, s), std::move(tan), nullptr);
    nodes[id].back = [a, s, id](Graph& g) { g.accum_scaled(a, s, g.nodes[id].grad); };
    return id;
}

Graph::V Graph::add_scalar(V a, float s) {
    Tensor tan = nodes[a].tan;
    V id = push(map(nodes[a].val, [s](float x) { return x + s; }), std::move(tan), nullptr);
    nodes[id].back = [a, id](Graph& g) { g.accum(a, g.nodes[id].grad); };
    return id;
}

Graph::V Graph::matmul(V a, V b) {
    Tensor y = md::matmul(nodes[a].val, nodes[b].val);
    Tensor tan;
    if (has_tan(a)) tan = md::matmul(nodes[a].tan, nodes[b].val);
    if (has_tan(b)) {
        Tensor t2 = md::matmul(nodes[a].val, nodes[b].tan);
        tan = tan.empty() ? std::move(t2) : ew_add(tan, t2);
    }
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, b, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        g.accum(a, matmul_tb(gy, g.nodes[b].val));
        g.accum(b, matmul_ta(g.nodes[a].val, gy));
    };
    return id;
}

Graph::V Graph::linear(V x, V w, V b) { return add_rows(matmul(x, w), b); }

static void rows_check(const Tensor& x, const Tensor& v, const char* op) {
    if (v.size() != x.cols()) throw std::invalid_argument(std::string(op) + ": vector length mismatch");
}

Graph::V Graph::mul_rows(V x, V v) {
    const Tensor& xv = nodes[x].val;
    const Tensor& vv = nodes[v].val;
    rows_check(xv, vv, "mul_rows");
    auto apply = [](const Tensor& m, const Tensor& r) {
        Tensor y = m;
        int c = m.cols();
        for (int t = 0; t < m.rows(); ++t)
            for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(t) * c + j] *= r.data[j];
        return y;
    };
    Tensor tan;
    if (has_tan(x)) tan = apply(nodes[x].tan, vv);
    if (has_tan(v)) {
        Tensor t2 = apply(xv, nodes[v].tan);
        tan = tan.empty() ? std::move(t2) : ew_add(tan, t2);
    }
    V id = push(apply(xv, vv), std::move(tan), nullptr);
    nodes[id].back = [x, v, apply, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        const Tensor& xv2 = g.nodes[x].val;
        const Tensor& vv2 = g.nodes[v].val;
        g.accum(x, apply(gy, vv2));
        Tensor& gv = g.gbuf(v);
        int c = xv2.cols();
        for (int t = 0; t < xv2.rows(); ++t)
            for (int j = 0; j < c; ++j) {
                int64_t i = static_cast<int64_t>(t) * c + j;
                gv.data[j] += gy.data[i] * xv2.data[i];
            }
    };
    return id;
}

Graph::V Graph::add_rows(V x, V v) {
    const Tensor& xv = nodes[x].val;
    const Tensor& vv = nodes[v].val;
    rows_check(xv, vv, "add_rows");
    auto apply = [](const Tensor& m, const Tensor& r) {
        Tensor y = m;
        int c = m.cols();
        for (int t = 0; t < m.rows(); ++t)
            for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(t) * c + j] += r.data[j];
        return y;
    };
    Tensor tan;
    if (has_tan(x) && has_tan(v)) tan = apply(nodes[x].tan, nodes[v].tan);
    else if (has_tan(x)) tan = nodes[x].tan;
    else if (has_tan(v)) tan = apply(Tensor::zeros(xv.shape), nodes[v].tan);
    V id = push(apply(xv, vv), std::move(tan), nullptr);
    nodes[id].back = [x, v, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        g.accum(x, gy);
        Tensor& gv = g.gbuf(v);
        int c = g.nodes[x].val.cols();
        for (int t = 0; t < gy.rows(); ++t)
            for (int j = 0; j < c; ++j) gv.data[j] += gy.data[static_cast<size_t>(t) * c + j];
    };
    return id;
}

Graph::V Graph::tile_rows(V v, int t) {
    const Tensor& vv = nodes[v].val;
    int c = static_cast<int>(vv.size());
    auto apply = [t, c](const Tensor& r) {
        Tensor y = Tensor::zeros({t, c});
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(i) * c + j] = r.data[j];
        return y;
    };
    Tensor tan = has_tan(v) ? apply(nodes[v].tan) : Tensor{};
    V id = push(apply(vv), std::move(tan), nullptr);
    nodes[id].back = [v, c, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        Tensor& gv = g.gbuf(v);
        for (int i = 0; i < gy.rows(); ++i)
            for (int j = 0; j < c; ++j) gv.data[j] += gy.data[static_cast<size_t>(i) * c + j];
    };
    return id;
}

Graph::V Graph::concat_cols(V a, V b) {
    const Tensor& av = nodes[a].val;
    const Tensor& bv = nodes[b].val;
    if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    auto apply = [](const Tensor& x, const Tensor& y) {
        int t = x.rows(), ca = x.cols(), cb = y.cols();
        Tensor out = Tensor::zeros({t, ca + cb});
        for (int i = 0; i < t; ++i) {
            std::copy_n(&x.data[static_cast<size_t>(i) * ca], ca, &out.data[static_cast<size_t>(i) * (ca + cb)]);
            std::copy_n(&y.data[static_cast<size_t>(i) * cb], cb,
                        &out.data[static_cast<size_t>(i) * (ca + cb) + ca]);
        }
        return out;
    };
    int ca = av.cols(), cb = bv.cols();
    Tensor tan;
    if (has_tan(a) || has_tan(b))
        tan = apply(has_tan(a) ? nodes[a].tan : Tensor::zeros(av.shape),
                    has_tan(b) ? nodes[b].tan : Tensor::zeros(bv.shape));
    V id = push(apply(nodes[a].val, nodes[b].val), std::move(tan), nullptr);
    nodes[id].back = [a, b, ca, cb, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        Tensor& ga = g.gbuf(a);
        Tensor& gb = g.gbuf(b);
        for (int i = 0; i < gy.rows(); ++i)
            for (int j = 0; j < ca + cb; ++j) {
                float v = gy.data[static_cast<size_t>(i) * (ca + cb) + j];
                if (j < ca) ga.data[static_cast<size_t>(i) * ca + j] += v;
                else gb.data[static_cast<size_t>(i) * cb + (j - ca)] += v;
            }
    };
    return id;
}

Graph::V Graph::slice_cols(V a, int start, int len) {
    const Tensor& av = nodes[a].val;
    if (start < 0 || start + len > av.cols()) throw std::invalid_argument("slice_cols: out of range");
    auto apply = [start, len](const Tensor& x) {
        Tensor y = Tensor::zeros({x.rows(), len});
        for (int i = 0; i < x.rows(); ++i)
            std::copy_n(&x.data[static_cast<size_t>(i) * x.cols() + start], len,
                        &y.data[static_cast<size_t>(i) * len]);
        return y;
    };
    int cols = av.cols();
    Tensor tan = has_tan(a) ? apply(nodes[a].tan) : Tensor{};
    V id = push(apply(nodes[a].val), std::move(tan), nullptr);
    nodes[id].back = [a, start, len, cols, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        Tensor& ga = g.gbuf(a);
        for (int i = 0; i < gy.rows(); ++i)
            for (int j = 0; j < len; ++j)
                ga.data[static_cast<size_t>(i) * cols + start + j] += gy.data[static_cast<size_t>(i) * len + j];
    };
    return id;
}

Graph::V Graph::row(V a, int i) {
    const Tensor& av = nodes[a].val;
    if (i < 0 || i >= av.rows()) throw std::invalid_argument("row: index out of range");
    int c = av.cols();
    auto apply = [i, c](const Tensor& x) {
        Tensor y = Tensor::zeros({1, c});
        std::copy_n(&x.data[static_cast<size_t>(i) * c], c, y.data.data());
        return y;
    };
    Tensor tan = has_tan(a) ? apply(nodes[a].tan) : Tensor{};
    V id = push(apply(av), std::move(tan), nullptr);
    nodes[id].back = [a, i, c, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        Tensor& ga = g.gbuf(a);
        for (int j = 0; j < c; ++j) ga.data[static_cast<size_t>(i) * c + j] += gy.data[j];
    };
    return id;
}

static Tensor reverse_rows_t(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape);
    int t = x.rows(), c = x.cols();
    for (int i = 0; i < t; ++i)
        std::copy_n(&x.data[static_cast<size_t>(i) * c], c, &y.data[static_cast<size_t>(t - 1 - i) * c]);
    return y;
}

Graph::V Graph::reverse_rows(V a) {
    Tensor tan = has_tan(a) ? reverse_rows_t(nodes[a].tan) : Tensor{};
    V id = push(reverse_rows_t(nodes[a].val), std::move(tan), nullptr);
    nodes[id].back = [a, id](Graph& g) { g.accum(a, reverse_rows_t(g.nodes[id].grad)); };
    return id;
}

// Elementwise activations. Derivative tensors are captured at forward time.
Graph::V Graph::sigmoid_(V a) {
    const Tensor& xv = nodes[a].val;
    Tensor y = Tensor::uninit(xv.shape);
    Tensor deriv = Tensor::uninit(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) {
        float s = 1.0f / (1.0f + fast_expf(-xv.data[i]));
        y.data[i] = s;
        deriv.data[i] = s * (1.0f - s);
    }
    Tensor tan = has_tan(a) ? ew_mul(nodes[a].tan, deriv) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, id, d = std::move(deriv)](Graph& g) { g.accum(a, ew_mul(g.nodes[id].grad, d)); };
    return id;
}

Graph::V Graph::tanh_(V a) {
    Tensor y = map(nodes[a].val, [](float x) { return std::tanh(x); });
    Tensor deriv = map(y, [](float v) { return 1.0f - v * v; });
    Tensor tan = has_tan(a) ? ew_mul(nodes[a].tan, deriv) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, id, d = std::move(deriv)](Graph& g) { g.accum(a, ew_mul(g.nodes[id].grad, d)); };
    return id;
}

Graph::V Graph::exp_(V a) {
    Tensor y = map(nodes[a].val, [](float x) { return fast_expf(x); });
    Tensor tan = has_tan(a) ? ew_mul(nodes[a].tan, y) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, id](Graph& g) { g.accum(a, ew_mul(g.nodes[id].grad, g.nodes[id].val)); };
    return id;
}

Graph::V Graph::silu(V a) {
    const Tensor& xv = nodes[a].val;
    Tensor y = Tensor::uninit(xv.shape);
    Tensor deriv = Tensor::uninit(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) {
        float x = xv.data[i];
        float sv = 1.0f / (1.0f + fast_expf(-x));
        y.data[i] = x * sv;
        deriv.data[i] = sv * (1.0f + x * (1.0f - sv));
    }
    Tensor tan = has_tan(a) ? ew_mul(nodes[a].tan, deriv) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, id, d = std::move(deriv)](Graph& g) { g.accum(a, ew_mul(g.nodes[id].grad, d)); };
    return id;
}

Graph::V Graph::softplus_(V a) {
    const Tensor& xv = nodes[a].val;
    Tensor y = Tensor::uninit(xv.shape);
    Tensor deriv = Tensor::uninit(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) {
        float x = xv.data[i];
        float e = fast_expf(-std::fabs(x));  // shared by softplus and sigmoid
        float inv = 1.0f / (1.0f + e);
        y.data[i] = (x > 0.0f ? x : 0.0f) + fast_logf(1.0f + e);
        deriv.data[i] = x > 0.0f ? inv : e * inv;
    }
    Tensor tan = has_tan(a) ? ew_mul(nodes[a].tan, deriv) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, id, d = std::move(deriv)](Graph& g) { g.accum(a, ew_mul(g.nodes[id].grad, d)); };
    return id;
}

Graph::V Graph::rms_norm(V x, V gain) {
    const Tensor& xv = nodes[x].val;
    const Tensor& gv = nodes[gain].val;
    rows_check(xv, gv, "rms_norm");
    int t = xv.rows(), c = xv.cols();
    const float eps = 1e-5f;
    Tensor r({t}, std::vector<float>(t));
    Tensor y = Tensor::zeros(xv.shape);
    for (int i = 0; i < t; ++i) {
        float ss = 0;
        const float* xr = &xv.data[static_cast<size_t>(i) * c];
        for (int j = 0; j < c; ++j) ss += xr[j] * xr[j];
        float rv = std::sqrt(ss / c + eps);
        r.data[i] = rv;
        for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(i) * c + j] = gv.data[j] * xr[j] / rv;
    }
    Tensor tan;
    if (has_tan(x)) {
        const Tensor& dx = nodes[x].tan;
        tan = Tensor::zeros(xv.shape);
        for (int i = 0; i < t; ++i) {
            const float* xr = &xv.data[static_cast<size_t>(i) * c];
            const float* dxr = &dx.data[static_cast<size_t>(i) * c];
            float rv = r.data[i];
            float m = 0;
            for (int j = 0; j < c; ++j) m += xr[j] * dxr[j];
            m /= c;
            for (int j = 0; j < c; ++j)
                tan.data[static_cast<size_t>(i) * c + j] = gv.data[j] * (dxr[j] / rv - xr[j] * m / (rv * rv * rv));
        }
    }
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [x, gain, id, r = std::move(r)](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        const Tensor& xv2 = g.nodes[x].val;
        const Tensor& gv2 = g.nodes[gain].val;
        Tensor& gx = g.gbuf(x);
        Tensor& gg = g.gbuf(gain);
        int t2 = xv2.rows(), c2 = xv2.cols();
        for (int i = 0; i < t2; ++i) {
            const float* xr = &xv2.data[static_cast<size_t>(i) * c2];
            const float* gyr = &gy.data[static_cast<size_t>(i) * c2];
            float rv = r.data[i];
            float s = 0;
            for (int j = 0; j < c2; ++j) s += gyr[j] * gv2.data[j] * xr[j];
            for (int j = 0; j < c2; ++j) {
                gx.data[static_cast<size_t>(i) * c2 + j] += gyr[j] * gv2.data[j] / rv - xr[j] * s / (c2 * rv * rv * rv);
                gg.data[j] += gyr[j] * xr[j] / rv;
            }
        }
    };
    return id;
}

Graph::V Graph::conv1d(V x, V w, V b) {
    Tensor y = conv1d_causal(nodes[x].val, nodes[w].val, nodes[b].val);
    Tensor tan;
    if (has_tan(x))
        tan = conv1d_causal(nodes[x].tan, nodes[w].val, Tensor::zeros(nodes[b].val.shape));
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [x, w, b, id](Graph& g) {
        Tensor gx, gw, gb;
        conv1d_causal_back(g.nodes[x].val, g.nodes[w].val, g.nodes[id].grad, gx, gw, gb);
        g.accum(x, std::move(gx));
        g.accum(w, std::move(gw));
        g.accum(b, std::move(gb));
    };
    return id;
}

Graph::V Graph::scan(V delta, V a, V b, V c, V x) {
    auto cache = std::make_shared<ScanCache>();
    Tensor y = ssm_scan(nodes[delta].val, nodes[a].val, nodes[b].val, nodes[c].val, nodes[x].val, cache.get());
    Tensor tan;
    if (has_tan(delta) || has_tan(b) || has_tan(c) || has_tan(x)) {
        tan = ssm_scan_jvp(nodes[delta].val, nodes[a].val, nodes[b].val, nodes[c].val, nodes[x].val, *cache,
                           has_tan(delta) ? &nodes[delta].tan : nullptr, has_tan(b) ? &nodes[b].tan : nullptr,
                           has_tan(c) ? &nodes[c].tan : nullptr, has_tan(x) ? &nodes[x].tan : nullptr);
    }
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [delta, a, b, c, x, id, cache](Graph& g) {
        Tensor gd, ga, gb, gc, gx;
        ssm_scan_back(g.nodes[delta].val, g.nodes[a].val, g.nodes[b].val, g.nodes[c].val, g.nodes[x].val,
                      *cache, g.nodes[id].grad, gd, ga, gb, gc, gx);
        g.accum(delta, std::move(gd));
        g.accum(a, std::move(ga));
        g.accum(b, std::move(gb));
        g.accum(c, std::move(gc));
        g.accum(x, std::move(gx));
    };
    return id;
}

Tensor sinusoidal_embedding(float t, int dim) {
    Tensor y = Tensor::zeros({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        float w = std::pow(10000.0f, -static_cast<float>(i) / half);
        y.data[2 * i] = std::sin(t * w);
        y.data[2 * i + 1] = std::cos(t * w);
    }
    return y;
}

Graph::V Graph::sin_embed(V t, int dim) {
    if (nodes[t].val.size() != 1) throw std::invalid_argument("sin_embed: scalar input expected");
    float tv = nodes[t].val.data[0];
    Tensor y = sinusoidal_embedding(tv, dim);
    int half = dim / 2;
    Tensor deriv = Tensor::zeros({1, dim});  // dy/dt
    for (int i = 0; i < half; ++i) {
        float w = std::pow(10000.0f, -static_cast<float>(i) / half);
        deriv.data[2 * i] = w * std::cos(tv * w);
        deriv.data[2 * i + 1] = -w * std::sin(tv * w);
    }
    Tensor tan;
    if (has_tan(t)) tan = ew_scale(deriv, nodes[t].tan.data[0]);
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [t, id, d = std::move(deriv)](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        float acc = 0;
        for (int64_t i = 0; i < gy.size(); ++i) acc += gy.data[i] * d.data[i];
        g.gbuf(t).data[0] += acc;
    };
    return id;
}

Graph::V Graph::mean_all(V a) {
    const Tensor& av = nodes[a].val;
    float inv = 1.0f / static_cast<float>(av.size());
    float m = 0;
    for (float v : av.data) m += v;
    m *= inv;
    Tensor tan;
    if (has_tan(a)) {
        float dm = 0;
        for (float v : nodes[a].tan.data) dm += v;
        tan = Tensor::scalar(dm * inv);
    }
    V id = push(Tensor::scalar(m), std::move(tan), nullptr);
    nodes[id].back = [a, inv, id](Graph& g) {
        float gv = g.nodes[id].grad.data[0] * inv;
        Tensor& ga = g.gbuf(a);
        for (auto& v : ga.data) v += gv;
    };
    return id;
}

Graph::V Graph::sum_all(V a) {
    const Tensor& av = nodes[a].val;
    float m = 0;
    for (float v : av.data) m += v;
    Tensor tan;
    if (has_tan(a)) {
        float dm = 0;
        for (float v : nodes[a].tan.data) dm += v;
        tan = Tensor::scalar(dm);
    }
    V id = push(Tensor::scalar(m), std::move(tan), nullptr);
    nodes[id].back = [a, id](Graph& g) {
        float gv = g.nodes[id].grad.data[0];
        Tensor& ga = g.gbuf(a);
        for (auto& v : ga.data) v += gv;
    };
    return id;
}

Graph::V Graph::time_diff(V a, float fps) {
    Tensor y = frame_velocities(nodes[a].val, fps);
    Tensor tan = has_tan(a) ? frame_velocities(nodes[a].tan, fps) : Tensor{};
    V id = push(std::move(y), std::move(tan), nullptr);
    nodes[id].back = [a, fps, id](Graph& g) {
        const Tensor& gy = g.nodes[id].grad;
        Tensor& ga = g.gbuf(a);
        int t = gy.rows(), c = gy.cols();
        for (int i = 0; i < t - 1; ++i) {
            for (int j = 0; j < c; ++j) {
                // last output row repeats diff t-2, fold its grad in
                float gv = gy.data[static_cast<size_t>(i) * c + j];
                if (i == t - 2) gv += gy.data[static_cast<size_t>(t - 1) * c + j];
                ga.data[static_cast<size_t>(i + 1) * c + j] += fps * gv;
                ga.data[static_cast<size_t>(i) * c + j] -= fps * gv;
            }
        }
    };
    return id;
}

Graph::V Graph::fk(V motion, const Skeleton& skel) {
    Tensor y;
    Tensor tan;
    if (has_tan(motion)) {
        auto [p, dp] = fk_positions_jvp(nodes[motion].val, nodes[motion].tan, skel);
        y = std::move(p);
        tan = std::move(dp);
    } else {
        y = fk_positions(nodes[motion].val, skel);
    }
    V id = push(std::move(y), std::move(tan), nullptr);
    Skeleton sk = skel;
    nodes[id].back = [motion, id, sk = std::move(sk)](Graph& g) {
        g.accum(motion, fk_positions_back(g.nodes[motion].val, sk, g.nodes[id].grad));
    };
    return id;
}

Graph::V Graph::stop_grad(V a) { return push(nodes[a].val, {}, nullptr); }

Graph::V Graph::mse(V a, V b) {
    V d = sub(a, b);
    return mean_all(mul(d, d));
}

// EvalCtx out-of-line pieces -------------------------------------------------

EvalCtx::V EvalCtx::linear(const V& x, const V& w, const V& b) { return add_rows(md::matmul(x, w), b); }

EvalCtx::V EvalCtx::mul_rows(const V& x, const V& v) {
    rows_check(x, v, "mul_rows");
    Tensor y = x;
    int c = x.cols();
    for (int t = 0; t < x.rows(); ++t)
        for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(t) * c + j] *= v.data[j];
    return y;
}

EvalCtx::V EvalCtx::add_rows(const V& x, const V& v) {
    rows_check(x, v, "add_rows");
    Tensor y = x;
    int c = x.cols();
    for (int t = 0; t < x.rows(); ++t)
        for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(t) * c + j] += v.data[j];
    return y;
}

EvalCtx::V EvalCtx::tile_rows(const V& v, int t) {
    int c = static_cast<int>(v.size());
    Tensor y = Tensor::zeros({t, c});
    for (int i = 0; i < t; ++i) std::copy_n(v.data.data(), c, &y.data[static_cast<size_t>(i) * c]);
    return y;
}

EvalCtx::V EvalCtx::concat_cols(const V& a, const V& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    int t = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor y = Tensor::zeros({t, ca + cb});
    for (int i = 0; i < t; ++i) {
        std::copy_n(&a.data[static_cast<size_t>(i) * ca], ca, &y.data[static_cast<size_t>(i) * (ca + cb)]);
        std::copy_n(&b.data[static_cast<size_t>(i) * cb], cb, &y.data[static_cast<size_t>(i) * (ca + cb) + ca]);
    }
    return y;
}

EvalCtx::V EvalCtx::slice_cols(const V& a, int start, int len) {
    Tensor y = Tensor::zeros({a.rows(), len});
    for (int i = 0; i < a.rows(); ++i)
        std::copy_n(&a.data[static_cast<size_t>(i) * a.cols() + start], len, &y.data[static_cast<size_t>(i) * len]);
    return y;
}

EvalCtx::V EvalCtx::row(const V& a, int i) {
    Tensor y = Tensor::zeros({1, a.cols()});
    std::copy_n(&a.data[static_cast<size_t>(i) * a.cols()], a.cols(), y.data.data());
    return y;
}

EvalCtx::V EvalCtx::reverse_rows(const V& a) { return reverse_rows_t(a); }

EvalCtx::V EvalCtx::softplus_(const V& a) {
    return map(a, [](float x) { return fast_softplus(x); });
}

EvalCtx::V EvalCtx::rms_norm(const V& x, const V& gain) {
    rows_check(x, gain, "rms_norm");
    const float eps = 1e-5f;
    int t = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros(x.shape);
    for (int i = 0; i < t; ++i) {
        const float* xr = &x.data[static_cast<size_t>(i) * c];
        float ss = 0;
        for (int j = 0; j < c; ++j) ss += xr[j] * xr[j];
        float rv = std::sqrt(ss / c + eps);
        for (int j = 0; j < c; ++j) y.data[static_cast<size_t>(i) * c + j] = gain.data[j] * xr[j] / rv;
    }
    return y;
}

EvalCtx::V EvalCtx::sin_embed(const V& t, int dim) { return sinusoidal_embedding(t.data[0], dim); }

EvalCtx::V EvalCtx::mean_all(const V& a) {
    float m = 0;
    for (float v : a.data) m += v;
    return Tensor::scalar(m / static_cast<float>(a.size()));
}

EvalCtx::V EvalCtx::sum_all(const V& a) {
    float m = 0;
    for (float v : a.data) m += v;
    return Tensor::scalar(m);
}

EvalCtx::V EvalCtx::mse(const V& a, const V& b) {
    check_shape(a, b, "mse");
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        float d = a.data[i] - b.data[i];
        acc += static_cast<double>(d) * d;
    }
    return Tensor::scalar(static_cast<float>(acc / static_cast<double>(a.size())));
}

Tensor finite_diff_directional(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& inputs, const std::vector<Tensor>& tangents,
                               float h) {
    if (h <= 0) throw std::invalid_argument("finite_diff_directional: h must be positive");
    std::vector<Tensor> plus = inputs, minus = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        axpy(plus[i], h, tangents[i]);
        axpy(minus[i], -h, tangents[i]);
    }
    Tensor fp = f(plus), fm = f(minus);
    Tensor out = ew_sub(fp, fm);
    return ew_scale(out, 0.5f / h);
}

}  // namespace md
