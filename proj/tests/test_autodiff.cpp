#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "md/autodiff.hpp"

using namespace md;

namespace {

float dot(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
    return static_cast<float>(s);
}

float rel_err(const Tensor& a, const Tensor& b) {
    double num = 0, den = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = a.data[i] - b.data[i];
        num += d * d;
        den += static_cast<double>(b.data[i]) * b.data[i];
    }
    return static_cast<float>(std::sqrt(num / (den + 1e-12)));
}

}  // namespace

TEST_CASE("square jvp: x=3, tangent 1 gives value 9 and derivative 6") {
    Graph g;
    auto x = g.input(Tensor::scalar(3.0f), Tensor::scalar(1.0f));
    auto y = g.mul(x, x);
    CHECK(g.val(y).data[0] == doctest::Approx(9.0f));
    CHECK(g.tan(y).data[0] == doctest::Approx(6.0f));
}

TEST_CASE("grad of sum is ones") {
    Rng rng(1);
    Tensor x = rng.normal_tensor({4, 5});
    Graph g;
    auto xi = g.param(x);
    g.backward(g.sum_all(xi));
    Tensor gx = g.grad_of(x);
    for (float v : gx.data) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("grad of half squared norm is w") {
    Rng rng(2);
    Tensor w = rng.normal_tensor({3, 7});
    Graph g;
    auto wi = g.param(w);
    auto loss = g.scale(g.sum_all(g.mul(wi, wi)), 0.5f);
    g.backward(loss);
    Tensor gw = g.grad_of(w);
    for (int64_t i = 0; i < w.size(); ++i) CHECK(gw.data[i] == doctest::Approx(w.data[i]).epsilon(1e-5));
}

TEST_CASE("two-layer tanh net: jvp matches central finite differences") {
    Rng rng(3);
    Tensor w1 = rng.normal_tensor({6, 8}, 0.5f);
    Tensor b1 = rng.normal_tensor({8}, 0.1f);
    Tensor w2 = rng.normal_tensor({8, 4}, 0.5f);
    Tensor b2 = rng.normal_tensor({4}, 0.1f);
    Tensor x = rng.normal_tensor({5, 6});
    Tensor dx = rng.normal_tensor({5, 6});

    auto run = [&](const std::vector<Tensor>& in) {
        EvalCtx c;
        auto h = c.tanh_(c.linear(in[0], w1, b1));
        return c.linear(h, w2, b2);
    };
    Tensor fd = finite_diff_directional(run, {x}, {dx}, 1e-3f);

    Graph g;
    auto xi = g.input(x, dx);
    auto h = g.tanh_(g.linear(xi, g.param(w1), g.param(b1)));
    auto y = g.linear(h, g.param(w2), g.param(b2));
    CHECK(rel_err(g.tan(y), fd) < 1e-3f);

    // and reverse mode agrees with forward mode on a scalar loss:
    // d/dh loss(x + h dx) = <grad_x loss, dx> = tangent of loss
    Graph g2;
    auto xi2 = g2.input(x, dx);
    auto h2 = g2.tanh_(g2.linear(xi2, g2.param(w1), g2.param(b1)));
    auto loss = g2.mean_all(g2.mul(g2.linear(h2, g2.param(w2), g2.param(b2)),
                                   g2.constant(rng.normal_tensor({5, 4}))));
    g2.backward(loss);
    CHECK(dot(g2.nodes[xi2].grad, dx) == doctest::Approx(g2.tan(loss).data[0]).epsilon(1e-3));
}

TEST_CASE("jvp is linear in the tangent") {
    Rng rng(4);
    Tensor x = rng.normal_tensor({3, 4});
    Tensor u = rng.normal_tensor({3, 4});
    Tensor v = rng.normal_tensor({3, 4});
    Tensor w = rng.normal_tensor({4, 4}, 0.5f);
    auto jvp = [&](const Tensor& t) {
        Graph g;
        auto xi = g.input(x, t);
        return g.tan(g.silu(g.matmul(xi, g.param(w))));
    };
    Tensor ju = jvp(u);
    Tensor jv = jvp(v);
    Tensor combo = ew_add(ew_scale(u, 2.0f), ew_scale(v, -3.0f));
    Tensor jc = jvp(combo);
    Tensor expect = ew_add(ew_scale(ju, 2.0f), ew_scale(jv, -3.0f));
    CHECK(rel_err(jc, expect) < 1e-4f);
}

TEST_CASE("stop_grad: identity value, no tangent, blocks gradients") {
    Rng rng(5);
    Tensor x = rng.normal_tensor({2, 3});
    Tensor dx = rng.normal_tensor({2, 3});
    Graph g;
    auto xi = g.input(x, dx);
    auto s = g.stop_grad(xi);
    CHECK(g.val(s).data == x.data);  // bit-equal
    CHECK_FALSE(g.has_tan(s));

    Tensor w = rng.normal_tensor({2, 3});
    Graph g2;
    auto wi = g2.param(w);
    auto loss = g2.sum_all(g2.mul(g2.stop_grad(wi), wi));
    g2.backward(loss);
    Tensor gw = g2.grad_of(w);
    // only the non-detached factor contributes: grad = sg(w) * 1 = w
    for (int64_t i = 0; i < w.size(); ++i) CHECK(gw.data[i] == doctest::Approx(w.data[i]));
}

TEST_CASE("per-op jvp matches finite differences and reverse matches forward") {
    Rng rng(6);
    const int T = 6, C = 5;
    struct Case {
        const char* name;
        std::function<Graph::V(Graph&, Graph::V)> op;
        std::function<Tensor(EvalCtx&, const Tensor&)> ev;
    };
    Tensor gain = rng.uniform_tensor({C}, 0.5f, 1.5f);
    std::vector<Case> cases = {
        {"sigmoid", [](Graph& g, Graph::V x) { return g.sigmoid_(x); },
         [](EvalCtx& c, const Tensor& x) { return c.sigmoid_(x); }},
        {"tanh", [](Graph& g, Graph::V x) { return g.tanh_(x); },
         [](EvalCtx& c, const Tensor& x) { return c.tanh_(x); }},
        {"exp", [](Graph& g, Graph::V x) { return g.exp_(x); },
         [](EvalCtx& c, const Tensor& x) { return c.exp_(x); }},
        {"silu", [](Graph& g, Graph::V x) { return g.silu(x); },
         [](EvalCtx& c, const Tensor& x) { return c.silu(x); }},
        {"softplus", [](Graph& g, Graph::V x) { return g.softplus_(x); },
         [](EvalCtx& c, const Tensor& x) { return c.softplus_(x); }},
        {"rms_norm",
         [&gain](Graph& g, Graph::V x) { return g.rms_norm(x, g.param(gain)); },
         [&gain](EvalCtx& c, const Tensor& x) { return c.rms_norm(x, gain); }},
        {"time_diff", [](Graph& g, Graph::V x) { return g.time_diff(x, 30.0f); },
         [](EvalCtx& c, const Tensor& x) { return c.time_diff(x, 30.0f); }},
        {"reverse_rows", [](Graph& g, Graph::V x) { return g.reverse_rows(x); },
         [](EvalCtx& c, const Tensor& x) { return c.reverse_rows(x); }},
        {"slice_cols", [](Graph& g, Graph::V x) { return g.slice_cols(x, 1, 3); },
         [](EvalCtx& c, const Tensor& x) { return c.slice_cols(x, 1, 3); }},
        {"row", [](Graph& g, Graph::V x) { return g.row(x, 2); },
         [](EvalCtx& c, const Tensor& x) { return c.row(x, 2); }},
    };
    for (auto& cs : cases) {
        CAPTURE(cs.name);
        Tensor x = rng.normal_tensor({T, C});
        Tensor dx = rng.normal_tensor({T, C});
        auto run = [&](const std::vector<Tensor>& in) {
            EvalCtx c;
            return cs.ev(c, in[0]);
        };
        Tensor fd = finite_diff_directional(run, {x}, {dx}, 2e-3f);

        Graph g;
        auto xi = g.input(x, dx);
        auto y = cs.op(g, xi);
        CHECK(rel_err(g.tan(y), fd) < 2e-2f);

        // reverse-forward agreement on random scalar projection
        Tensor proj = rng.normal_tensor(g.val(y).shape);
        Graph g2;
        auto xi2 = g2.input(x, dx);
        auto loss = g2.sum_all(g2.mul(cs.op(g2, xi2), g2.constant(proj)));
        g2.backward(loss);
        CHECK(dot(g2.nodes[xi2].grad, dx) == doctest::Approx(g2.tan(loss).data[0]).epsilon(2e-3));
    }
}

TEST_CASE("structural ops: tile/concat/add_rows/mul_rows round trip gradients") {
    Rng rng(7);
    Tensor x = rng.normal_tensor({4, 3});
    Tensor v = rng.normal_tensor({3});
    Tensor dx = rng.normal_tensor({4, 3});
    Tensor dv = rng.normal_tensor({3});

    auto run = [&](const std::vector<Tensor>& in) {
        EvalCtx c;
        auto a = c.mul_rows(in[0], in[1]);
        auto b = c.add_rows(in[0], in[1]);
        auto cat = c.concat_cols(a, b);
        return c.add(cat, c.concat_cols(c.tile_rows(in[1], 4), c.tile_rows(in[1], 4)));
    };
    Tensor fd = finite_diff_directional(run, {x, v}, {dx, dv}, 1e-3f);

    Graph g;
    auto xi = g.input(x, dx);
    auto vi = g.input(v, dv);
    auto a = g.mul_rows(xi, vi);
    auto b = g.add_rows(xi, vi);
    auto cat = g.concat_cols(a, b);
    auto y = g.add(cat, g.concat_cols(g.tile_rows(vi, 4), g.tile_rows(vi, 4)));
    CHECK(rel_err(g.tan(y), fd) < 1e-3f);

    Tensor proj = rng.normal_tensor(g.val(y).shape);
    Graph g2;
    auto xi2 = g2.input(x, dx);
    auto vi2 = g2.input(v, dv);
    auto y2 = g2.add(g2.concat_cols(g2.mul_rows(xi2, vi2), g2.add_rows(xi2, vi2)),
                     g2.concat_cols(g2.tile_rows(vi2, 4), g2.tile_rows(vi2, 4)));
    auto loss = g2.sum_all(g2.mul(y2, g2.constant(proj)));
    g2.backward(loss);
    float fwd = g2.tan(loss).data[0];
    float rev = dot(g2.nodes[xi2].grad, dx) + dot(g2.nodes[vi2].grad, dv);
    CHECK(rev == doctest::Approx(fwd).epsilon(1e-3));
}

TEST_CASE("sin_embed: tangent matches finite differences") {
    const int dim = 16;
    float t0 = 0.37f;
    auto run = [&](const std::vector<Tensor>& in) { return sinusoidal_embedding(in[0].data[0], dim); };
    Tensor fd = finite_diff_directional(run, {Tensor::scalar(t0)}, {Tensor::scalar(1.0f)}, 1e-3f);
    Graph g;
    auto ti = g.input(Tensor::scalar(t0), Tensor::scalar(1.0f));
    auto e = g.sin_embed(ti, dim);
    CHECK(rel_err(g.tan(e), fd) < 1e-3f);

    Tensor proj = Rng(8).normal_tensor({1, dim});
    Graph g2;
    auto ti2 = g2.input(Tensor::scalar(t0), Tensor::scalar(1.0f));
    auto loss = g2.sum_all(g2.mul(g2.sin_embed(ti2, dim), g2.constant(proj)));
    g2.backward(loss);
    CHECK(g2.nodes[ti2].grad.data[0] == doctest::Approx(g2.tan(loss).data[0]).epsilon(1e-4));
}

TEST_CASE("mse value and gradient") {
    Rng rng(9);
    Tensor a = rng.normal_tensor({3, 4});
    Tensor b = rng.normal_tensor({3, 4});
    Graph g;
    auto ai = g.param(a);
    auto loss = g.mse(ai, g.constant(b));
    double ref = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = a.data[i] - b.data[i];
        ref += d * d;
    }
    ref /= a.size();
    CHECK(g.val(loss).data[0] == doctest::Approx(ref).epsilon(1e-5));
    g.backward(loss);
    Tensor ga = g.grad_of(a);
    for (int64_t i = 0; i < a.size(); ++i)
        CHECK(ga.data[i] == doctest::Approx(2.0f * (a.data[i] - b.data[i]) / a.size()).epsilon(1e-4));
}

TEST_CASE("param dedup: same tensor registered twice shares one node") {
    Tensor w = Tensor::full({2, 2}, 1.5f);
    Graph g;
    auto a = g.param(w);
    auto b = g.param(w);
    CHECK(a == b);
    auto loss = g.sum_all(g.add(g.mul(a, a), b));
    g.backward(loss);
    Tensor gw = g.grad_of(w);
    for (float v : gw.data) CHECK(v == doctest::Approx(2.0f * 1.5f + 1.0f));
}
