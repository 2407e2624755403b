#pragma once

#include "md/autodiff.hpp"
#include "md/params.hpp"

namespace md {

struct NetworkConfig {
    int latent_dim = 64;
    int d_state = 8;
    int conv_kernel = 4;
    int expand = 2;
    int cond_layers = 2;
    int gen_blocks = 4;
    int dt_rank = 4;
    int motion_dim = 51;
    int music_dim = 35;
    int genre_count = 16;

    int inner_dim() const { return expand * latent_dim; }
    void validate() const;

    // Paper-faithful scale: latent 512, d_state 16, cond_layers 4, gen_blocks 8.
    static NetworkConfig paper_scale(int motion_dim);
};

inline float scalar_value(Graph& g, Graph::V v) { return g.val(v).data[0]; }
inline float scalar_value(EvalCtx&, const Tensor& v) { return v.data[0]; }
inline int rows_of(Graph& g, Graph::V v) { return g.val(v).rows(); }
inline int rows_of(EvalCtx&, const Tensor& v) { return v.rows(); }

// u_theta(z_t, r, t | music, genre): condition stack (BiMamba layers + genre
// gate), sinusoidal time embedding MLP, generator stack of BiMamba blocks with
// FiLM time modulation and additive channel fusion of the condition.
struct Model {
    NetworkConfig cfg;
    ParameterStore params;

    Model() = default;
    explicit Model(const NetworkConfig& c, uint64_t seed) { init(c, seed); }
    void init(const NetworkConfig& c, uint64_t seed);

    // genre ids 0..genre_count-1; genre_count itself is the learned null
    // embedding used for classifier-free guidance.
    static constexpr const char* kGenreErr = "genre id out of range";

    template <class Ctx>
    typename Ctx::V mamba_layer(Ctx& ctx, typename Ctx::V x, const std::string& prefix,
                                bool backward_dir) const {
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(prefix + n)); };
        int ed = cfg.inner_dim(), S = cfg.d_state, R = cfg.dt_rank;
        typename Ctx::V in = backward_dir ? ctx.reverse_rows(x) : x;
        auto xz = ctx.linear(in, P("in_proj.w"), P("in_proj.b"));
        auto xs = ctx.slice_cols(xz, 0, ed);
        auto zgate = ctx.slice_cols(xz, ed, ed);
        xs = ctx.silu(ctx.conv1d(xs, P("conv.w"), P("conv.b")));
        auto proj = ctx.linear(xs, P("x_proj.w"), P("x_proj.b"));
        auto dt = ctx.softplus_(ctx.linear(ctx.slice_cols(proj, 0, R), P("dt_proj.w"), P("dt_proj.b")));
        auto b = ctx.slice_cols(proj, R, S);
        auto c = ctx.slice_cols(proj, R + S, S);
        auto a = ctx.scale(ctx.exp_(P("a_log")), -1.0f);
        auto y = ctx.scan(dt, a, b, c, xs);
        y = ctx.mul(y, ctx.silu(zgate));
        auto out = ctx.linear(y, P("out_proj.w"), P("out_proj.b"));
        return backward_dir ? ctx.reverse_rows(out) : out;
    }

    // y = x + sigmoid(Linear_g(n)) * (fwd(n) + bwd(n)), n = rms_norm(x)
    template <class Ctx>
    typename Ctx::V bimamba_block(Ctx& ctx, typename Ctx::V x, const std::string& prefix) const {
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(prefix + n)); };
        auto n = ctx.rms_norm(x, P("norm"));
        auto mix = ctx.add(mamba_layer(ctx, n, prefix + "fwd.", false),
                           mamba_layer(ctx, n, prefix + "bwd.", true));
        auto gate = ctx.sigmoid_(ctx.linear(n, P("gate.w"), P("gate.b")));
        return ctx.add(x, ctx.mul(gate, mix));
    }

    // gated multimodal unit fusing the music stack with the genre embedding
    template <class Ctx>
    typename Ctx::V genre_gate(Ctx& ctx, typename Ctx::V feat, int genre, int t_len) const {
        if (genre < 0 || genre > cfg.genre_count) throw std::out_of_range(kGenreErr);
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(std::string("gate.") + n)); };
        auto emb = ctx.row(P("embed"), genre);
        auto emb_t = ctx.tile_rows(emb, t_len);
        auto h_m = ctx.tanh_(ctx.linear(feat, P("wm.w"), P("wm.b")));
        auto h_g = ctx.tile_rows(ctx.tanh_(ctx.linear(emb, P("wg.w"), P("wg.b"))), t_len);
        auto gate = ctx.sigmoid_(ctx.linear(ctx.concat_cols(feat, emb_t), P("wz.w"), P("wz.b")));
        auto ones = ctx.constant(Tensor::full({t_len, cfg.latent_dim}, 1.0f));
        return ctx.add(ctx.mul(gate, h_m), ctx.mul(ctx.sub(ones, gate), h_g));
    }

    // sinusoidal(t) + sinusoidal(r) through a 2-layer MLP; requires r <= t
    template <class Ctx>
    typename Ctx::V time_embed(Ctx& ctx, typename Ctx::V t, typename Ctx::V r) const {
        float tv = scalar_value(ctx, t), rv = scalar_value(ctx, r);
        if (rv > tv + 1e-6f) throw std::invalid_argument("time_embed: r must not exceed t");
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(std::string("time.") + n)); };
        auto se = ctx.add(ctx.sin_embed(t, cfg.latent_dim), ctx.sin_embed(r, cfg.latent_dim));
        return ctx.linear(ctx.silu(ctx.linear(se, P("mlp1.w"), P("mlp1.b"))), P("mlp2.w"), P("mlp2.b"));
    }

    template <class Ctx>
    typename Ctx::V film(Ctx& ctx, typename Ctx::V x, typename Ctx::V time_vec,
                         const std::string& prefix) const {
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(prefix + n)); };
        auto gamma = ctx.linear(time_vec, P("film_gamma.w"), P("film_gamma.b"));
        auto beta = ctx.linear(time_vec, P("film_beta.w"), P("film_beta.b"));
        return ctx.add_rows(ctx.mul_rows(x, gamma), beta);
    }

    template <class Ctx>
    typename Ctx::V cond_stack(Ctx& ctx, const typename Ctx::V& music, int genre, int t_len) const {
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(std::string("cond.") + n)); };
        auto h = ctx.linear(music, P("in_proj.w"), P("in_proj.b"));
        for (int i = 0; i < cfg.cond_layers; ++i)
            h = bimamba_block(ctx, h, "cond.l" + std::to_string(i) + ".");
        return genre_gate(ctx, h, genre, t_len);
    }

    // Generator stack given a precomputed condition; lets one tape share the
    // condition stack across several (z, r, t) evaluations of the same sample.
    template <class Ctx>
    typename Ctx::V forward_with_cond(Ctx& ctx, typename Ctx::V z, typename Ctx::V r,
                                      typename Ctx::V t, typename Ctx::V cond) const {
        auto P = [&](const char* n) -> typename Ctx::V { return ctx.param(params.get(n)); };
        if (rows_of(ctx, cond) != rows_of(ctx, z))
            throw std::invalid_argument("model: condition frames != motion frames");
        auto time_vec = time_embed(ctx, t, r);
        auto h = ctx.linear(z, P("gen.in_proj.w"), P("gen.in_proj.b"));
        for (int i = 0; i < cfg.gen_blocks; ++i) {
            std::string prefix = "gen.b" + std::to_string(i) + ".";
            h = bimamba_block(ctx, h, prefix);
            h = ctx.add(film(ctx, h, time_vec, prefix), cond);
        }
        return ctx.linear(h, P("out_proj.w"), P("out_proj.b"));
    }

    template <class Ctx>
    typename Ctx::V forward(Ctx& ctx, typename Ctx::V z, typename Ctx::V r, typename Ctx::V t,
                            const typename Ctx::V& music, int genre) const {
        int t_len = rows_of(ctx, z);
        if (rows_of(ctx, music) != t_len)
            throw std::invalid_argument("model: music frames != motion frames");
        auto cond = cond_stack(ctx, music, genre, t_len);
        return forward_with_cond(ctx, z, r, t, cond);
    }

    // Plain evaluation convenience used by the sampler.
    Tensor forward_eval(const Tensor& z, float r, float t, const Tensor& music, int genre) const {
        EvalCtx ctx;
        return forward(ctx, z, Tensor::scalar(r), Tensor::scalar(t), music, genre);
    }
};

}  // namespace md
