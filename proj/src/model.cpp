#include "md/model.hpp"

namespace md {

void NetworkConfig::validate() const {
    auto pos = [](int v, const char* n) {
        if (v < 1) throw std::invalid_argument(std::string("config: ") + n + " must be positive");
    };
    pos(latent_dim, "latent_dim");
    pos(d_state, "d_state");
    pos(conv_kernel, "conv_kernel");
    pos(expand, "expand");
    pos(cond_layers, "cond_layers");
    pos(gen_blocks, "gen_blocks");
    pos(dt_rank, "dt_rank");
    pos(motion_dim, "motion_dim");
    pos(genre_count, "genre_count");
    if (music_dim != 35) throw std::invalid_argument("config: music_dim must be 35");
    if (motion_dim < 9 || (motion_dim - 3) % 6 != 0)
        throw std::invalid_argument("config: motion_dim must be 3 + 6*J");
}

NetworkConfig NetworkConfig::paper_scale(int motion_dim) {
    NetworkConfig c;
    c.latent_dim = 512;
    c.d_state = 16;
    c.conv_kernel = 4;
    c.expand = 2;
    c.cond_layers = 4;
    c.gen_blocks = 8;
    c.dt_rank = 32;
    c.motion_dim = motion_dim;
    return c;
}

namespace {

void add_linear(ParameterStore& ps, Rng& rng, const std::string& prefix, int in, int out,
                bool zero = false) {
    float s = zero ? 0.0f : 1.0f / std::sqrt(static_cast<float>(in));
    ps.add(prefix + ".w", zero ? Tensor::zeros({in, out}) : rng.normal_tensor({in, out}, s));
    ps.add(prefix + ".b", Tensor::zeros({out}));
}

void add_mamba(ParameterStore& ps, Rng& rng, const NetworkConfig& cfg, const std::string& prefix) {
    int d = cfg.latent_dim, ed = cfg.inner_dim(), S = cfg.d_state, K = cfg.conv_kernel, R = cfg.dt_rank;
    add_linear(ps, rng, prefix + "in_proj", d, 2 * ed);
    ps.add(prefix + "conv.w", rng.normal_tensor({K, ed}, 1.0f / std::sqrt(static_cast<float>(K))));
    ps.add(prefix + "conv.b", Tensor::zeros({ed}));
    add_linear(ps, rng, prefix + "x_proj", ed, R + 2 * S);
    // dt bias chosen so softplus(b) lands log-uniformly in [1e-3, 0.1]
    ps.add(prefix + "dt_proj.w", rng.normal_tensor({R, ed}, 1.0f / std::sqrt(static_cast<float>(R))));
    Tensor dtb = Tensor::zeros({ed});
    for (auto& v : dtb.data) {
        float dt = std::exp(std::log(1e-3f) +
                            static_cast<float>(rng.uniform()) * (std::log(0.1f) - std::log(1e-3f)));
        v = std::log(std::expm1(dt));  // inverse softplus
    }
    ps.add(prefix + "dt_proj.b", std::move(dtb));
    Tensor alog = Tensor::zeros({ed, S});
    for (int c = 0; c < ed; ++c)
        for (int s = 0; s < S; ++s) alog(c, s) = std::log(static_cast<float>(s + 1));
    ps.add(prefix + "a_log", std::move(alog));
    add_linear(ps, rng, prefix + "out_proj", ed, d);
}

void add_bimamba(ParameterStore& ps, Rng& rng, const NetworkConfig& cfg, const std::string& prefix) {
    ps.add(prefix + "norm", Tensor::full({cfg.latent_dim}, 1.0f));
    add_linear(ps, rng, prefix + "gate", cfg.latent_dim, cfg.latent_dim);
    add_mamba(ps, rng, cfg, prefix + "fwd.");
    add_mamba(ps, rng, cfg, prefix + "bwd.");
}

}  // namespace

void Model::init(const NetworkConfig& c, uint64_t seed) {
    c.validate();
    cfg = c;
    params = ParameterStore{};
    Rng rng(derive_seed(seed, 0x11, 0));
    int d = cfg.latent_dim;

    add_linear(params, rng, "cond.in_proj", cfg.music_dim, d);
    for (int i = 0; i < cfg.cond_layers; ++i)
        add_bimamba(params, rng, cfg, "cond.l" + std::to_string(i) + ".");

    params.add("gate.embed", rng.normal_tensor({cfg.genre_count + 1, d}, 0.5f));
    add_linear(params, rng, "gate.wm", d, d);
    add_linear(params, rng, "gate.wg", d, d);
    add_linear(params, rng, "gate.wz", 2 * d, d);

    add_linear(params, rng, "time.mlp1", d, d);
    add_linear(params, rng, "time.mlp2", d, d);

    add_linear(params, rng, "gen.in_proj", cfg.motion_dim, d);
    for (int i = 0; i < cfg.gen_blocks; ++i) {
        std::string prefix = "gen.b" + std::to_string(i) + ".";
        add_bimamba(params, rng, cfg, prefix);
        add_linear(params, rng, prefix + "film_gamma", d, d);
        params.get(prefix + "film_gamma.b") = Tensor::full({d}, 1.0f);  // start as identity
        add_linear(params, rng, prefix + "film_beta", d, d);
    }

    // zero-init output head: the model starts as the zero velocity field
    add_linear(params, rng, "out_proj", d, cfg.motion_dim, /*zero=*/true);
}

}  // namespace md
