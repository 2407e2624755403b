#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "md/data.hpp"
#include "md/model.hpp"

using namespace md;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.latent_dim = 16;
    c.d_state = 4;
    c.conv_kernel = 4;
    c.expand = 2;
    c.cond_layers = 1;
    c.gen_blocks = 1;
    c.dt_rank = 2;
    c.motion_dim = 3 + 6 * 8;
    return c;
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

float dot(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
    return static_cast<float>(s);
}

// single-channel scan helper: delta/x length T, scalar A/B/C
std::vector<float> scan1(const std::vector<float>& delta, float A, float B, float C,
                         const std::vector<float>& x) {
    int T = static_cast<int>(x.size());
    Tensor d({T, 1}, delta), a({1, 1}, {A}), b = Tensor::zeros({T, 1}), c = Tensor::zeros({T, 1}),
                             xs({T, 1}, x);
    for (int t = 0; t < T; ++t) {
        b(t, 0) = B;
        c(t, 0) = C;
    }
    Tensor y = ssm_scan(d, a, b, c, xs, nullptr);
    return std::vector<float>(y.data.begin(), y.data.end());
}

}  // namespace

TEST_CASE("config validation and paper preset") {
    NetworkConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.latent_dim = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.motion_dim = 10;  // not 3 + 6J
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    NetworkConfig p = NetworkConfig::paper_scale(147);
    CHECK(p.latent_dim == 512);
    CHECK(p.d_state == 16);
    CHECK(p.conv_kernel == 4);
    CHECK(p.expand == 2);
    CHECK(p.cond_layers == 4);
    CHECK(p.gen_blocks == 8);
    CHECK(p.motion_dim == 147);
}

TEST_CASE("discretization: exact Abar/Bbar values and the A->0 limit") {
    // delta=1, A=ln 0.5, B=1, C=1, x=[1,0]: y0 = Bbar, y1 = Abar*Bbar
    float lnh = std::log(0.5f);
    auto y = scan1({1, 1}, lnh, 1.0f, 1.0f, {1, 0});
    float bbar = (0.5f - 1.0f) / lnh;  // phi(ln 0.5) * 1 * 1
    CHECK(y[0] == doctest::Approx(bbar).epsilon(1e-4));
    CHECK(y[0] == doctest::Approx(0.72135f).epsilon(1e-3));
    CHECK(y[1] / y[0] == doctest::Approx(0.5f).epsilon(1e-4));  // Abar

    // A -> 0: Abar = 1, Bbar = delta*B
    auto y0 = scan1({1, 1, 1}, -1e-9f, 1.0f, 1.0f, {1, 1, 1});
    CHECK(y0[0] == doctest::Approx(1.0f).epsilon(1e-4));
    CHECK(y0[1] == doctest::Approx(2.0f).epsilon(1e-4));
    CHECK(y0[2] == doctest::Approx(3.0f).epsilon(1e-4));

    // doubling delta squares Abar
    auto y2 = scan1({2, 2}, lnh, 1.0f, 1.0f, {1, 0});
    CHECK(y2[1] / y2[0] == doctest::Approx(0.25f).epsilon(1e-4));
}

TEST_CASE("selective scan hand examples") {
    // Abar=0.5, Bbar=1, C=1: delta=1, A=ln 0.5, B = 1/phi(ln 0.5)
    float lnh = std::log(0.5f);
    float B = lnh / (0.5f - 1.0f);
    auto y = scan1({1, 1, 1}, lnh, B, 1.0f, {1, 0, 0});
    CHECK(y[0] == doctest::Approx(1.0f).epsilon(1e-4));
    CHECK(y[1] == doctest::Approx(0.5f).epsilon(1e-4));
    CHECK(y[2] == doctest::Approx(0.25f).epsilon(1e-4));

    auto z = scan1({1, 1, 1}, lnh, B, 1.0f, {0, 0, 0});
    for (float v : z) CHECK(v == 0.0f);
}

TEST_CASE("mamba layer: shape, direction symmetry, zero weights") {
    Model m(tiny_config(), 21);
    Rng rng(22);
    Tensor x = rng.normal_tensor({12, 16});
    EvalCtx ctx;
    std::string p = "gen.b0.fwd.";

    Tensor fwd = m.mamba_layer(ctx, x, p, false);
    CHECK(fwd.shape == x.shape);

    // bwd(x) == reverse(fwd(reverse(x))) with the same weights
    Tensor bwd = m.mamba_layer(ctx, x, p, true);
    Tensor ref = ctx.reverse_rows(m.mamba_layer(ctx, ctx.reverse_rows(x), p, false));
    CHECK(rel_err(bwd, ref) < 1e-6f);

    // zeroed weights give the zero function
    Model mz = m;
    for (const char* n : {"in_proj.w", "conv.w", "x_proj.w", "dt_proj.w", "out_proj.w", "out_proj.b"})
        mz.params.get(p + n) = Tensor::zeros(mz.params.get(p + n).shape);
    Tensor zy = mz.mamba_layer(ctx, x, p, false);
    for (float v : zy.data) CHECK(v == 0.0f);
}

TEST_CASE("bimamba block: skip path when the gate saturates closed") {
    Model m(tiny_config(), 23);
    Rng rng(24);
    Tensor x = rng.normal_tensor({10, 16});
    EvalCtx ctx;
    std::string p = "gen.b0.";
    Tensor y = m.bimamba_block(ctx, x, p);
    CHECK(y.shape == x.shape);

    Model mg = m;
    mg.params.get(p + "gate.w") = Tensor::zeros({16, 16});
    mg.params.get(p + "gate.b") = Tensor::full({16}, -40.0f);  // sigmoid -> 0
    Tensor ys = mg.bimamba_block(ctx, x, p);
    CHECK(rel_err(ys, x) < 1e-6f);
}

TEST_CASE("genre gate: saturation limits and range checks") {
    Model m(tiny_config(), 25);
    Rng rng(26);
    Tensor feat = rng.normal_tensor({9, 16});
    EvalCtx ctx;
    CHECK_THROWS_AS((void)m.genre_gate(ctx, feat, -1, 9), std::out_of_range);
    CHECK_THROWS_AS((void)m.genre_gate(ctx, feat, m.cfg.genre_count + 1, 9), std::out_of_range);
    // null-genre row (id == genre_count) is valid: used for CFG dropout
    CHECK_NOTHROW((void)m.genre_gate(ctx, feat, m.cfg.genre_count, 9));

    Model m1 = m;
    m1.params.get("gate.wz.w") = Tensor::zeros({32, 16});
    m1.params.get("gate.wz.b") = Tensor::full({16}, 40.0f);  // gate -> 1
    Tensor hm = ctx.tanh_(ctx.linear(feat, m1.params.get("gate.wm.w"), m1.params.get("gate.wm.b")));
    CHECK(rel_err(m1.genre_gate(ctx, feat, 2, 9), hm) < 1e-5f);

    Model m0 = m;
    m0.params.get("gate.wz.w") = Tensor::zeros({32, 16});
    m0.params.get("gate.wz.b") = Tensor::full({16}, -40.0f);  // gate -> 0
    Tensor out0 = m0.genre_gate(ctx, feat, 2, 9);
    // h_g is constant over rows
    for (int t = 1; t < 9; ++t)
        for (int c = 0; c < 16; ++c) CHECK(out0(t, c) == doctest::Approx(out0(0, c)));
}

TEST_CASE("time embed: validation and t=r case") {
    Model m(tiny_config(), 27);
    EvalCtx ctx;
    CHECK_THROWS_AS((void)m.time_embed(ctx, Tensor::scalar(0.3f), Tensor::scalar(0.7f)),
                    std::invalid_argument);
    Tensor e = m.time_embed(ctx, Tensor::scalar(0.5f), Tensor::scalar(0.5f));
    CHECK(e.rows() == 1);
    CHECK(e.cols() == 16);
    // pre-MLP sinusoidal at 0 alternates [0,1,0,1,...]
    Tensor s0 = sinusoidal_embedding(0.0f, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(s0.data[2 * i] == doctest::Approx(0.0f));
        CHECK(s0.data[2 * i + 1] == doctest::Approx(1.0f));
    }
}

TEST_CASE("film: identity and constant limits") {
    Model m(tiny_config(), 28);
    Rng rng(29);
    Tensor x = rng.normal_tensor({7, 16});
    Tensor tv = rng.normal_tensor({1, 16});
    EvalCtx ctx;
    std::string p = "gen.b0.";

    Model mi = m;
    mi.params.get(p + "film_gamma.w") = Tensor::zeros({16, 16});
    mi.params.get(p + "film_gamma.b") = Tensor::full({16}, 1.0f);
    mi.params.get(p + "film_beta.w") = Tensor::zeros({16, 16});
    mi.params.get(p + "film_beta.b") = Tensor::zeros({16});
    CHECK(rel_err(mi.film(ctx, x, tv, p), x) < 1e-6f);

    mi.params.get(p + "film_gamma.b") = Tensor::zeros({16});
    mi.params.get(p + "film_beta.b") = Tensor::full({16}, 0.25f);
    Tensor out = mi.film(ctx, x, tv, p);
    for (float v : out.data) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("model forward: shapes across lengths, determinism") {
    Model m(tiny_config(), 30);
    MusicSequence music = synth_music(1024, 120.0, 4, 31);
    Rng rng(32);
    for (int T : {8, 240, 1024}) {
        Tensor z = rng.normal_tensor({T, m.cfg.motion_dim});
        Tensor mus = Tensor::zeros({T, kMusicDim});
        std::copy_n(music.features.data.data(), static_cast<size_t>(T) * kMusicDim, mus.data.data());
        Tensor u = m.forward_eval(z, 0.2f, 0.8f, mus, 4);
        CHECK(u.rows() == T);
        CHECK(u.cols() == m.cfg.motion_dim);
        CHECK(u.all_finite());
        Tensor u2 = m.forward_eval(z, 0.2f, 0.8f, mus, 4);
        CHECK(u.data == u2.data);  // bit-identical
    }
    // frame misalignment rejected
    Tensor z = rng.normal_tensor({16, m.cfg.motion_dim});
    Tensor mus = Tensor::zeros({8, kMusicDim});
    CHECK_THROWS((void)m.forward_eval(z, 0.0f, 1.0f, mus, 4));
}

TEST_CASE("model forward jvp along (v, 0, 1) matches finite differences") {
    Model m(tiny_config(), 33);
    Rng rng(34);
    const int T = 8;
    Tensor z = rng.normal_tensor({T, m.cfg.motion_dim});
    Tensor v = rng.normal_tensor({T, m.cfg.motion_dim});
    Tensor mus = synth_music(T, 120.0, 2, 35).features;
    float r0 = 0.25f, t0 = 0.75f;

    Graph g;
    auto zi = g.input(z, v);
    auto ri = g.input(Tensor::scalar(r0));  // no tangent: dr = 0
    auto ti = g.input(Tensor::scalar(t0), Tensor::scalar(1.0f));
    auto u = m.forward(g, zi, ri, ti, g.constant(mus), 2);

    auto run = [&](const std::vector<Tensor>& in) {
        return m.forward_eval(in[0], r0, in[1].data[0], mus, 2);
    };
    Tensor fd = finite_diff_directional(run, {z, Tensor::scalar(t0)}, {v, Tensor::scalar(1.0f)}, 2e-3f);
    CHECK(rel_err(g.tan(u), fd) < 1e-3f);
}

TEST_CASE("model backward: parameter gradients match finite differences") {
    Model m(tiny_config(), 36);
    Rng rng(37);
    const int T = 8;
    Tensor z = rng.normal_tensor({T, m.cfg.motion_dim});
    Tensor mus = synth_music(T, 110.0, 1, 38).features;
    Tensor target = rng.normal_tensor({T, m.cfg.motion_dim});

    Graph g;
    auto u = m.forward(g, g.input(z), g.input(Tensor::scalar(0.1f)), g.input(Tensor::scalar(0.9f)),
                       g.constant(mus), 1);
    auto loss = g.mse(u, g.constant(target));
    g.backward(loss);

    auto loss_of = [&](const Model& model) {
        Tensor out = model.forward_eval(z, 0.1f, 0.9f, mus, 1);
        EvalCtx c;
        return c.mse(out, target).data[0];
    };
    // directional FD across a representative set of parameters at once
    for (const char* name : {"gen.in_proj.w", "gen.b0.fwd.a_log", "gen.b0.fwd.dt_proj.b",
                             "cond.l0.fwd.conv.w", "gate.embed", "time.mlp1.w", "out_proj.w"}) {
        CAPTURE(name);
        const Tensor& p = m.params.get(name);
        Tensor grad = g.grad_of(p);
        Tensor dir = Rng(splitmix64(reinterpret_cast<uintptr_t>(name))).normal_tensor(p.shape);
        const float h = 1e-2f;
        Model mp = m, mm = m;
        axpy(mp.params.get(name), h, dir);
        axpy(mm.params.get(name), -h, dir);
        float fd = (loss_of(mp) - loss_of(mm)) / (2 * h);
        float analytic = dot(grad, dir);
        if (std::fabs(fd) > 1e-7f) CHECK(analytic == doctest::Approx(fd).epsilon(3e-2));
    }
}
