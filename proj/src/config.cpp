#include "md/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace md {

using nlohmann::json;

namespace {

// Pulls known keys out of `j` and complains about leftovers so typos in a
// config file fail loudly instead of silently using a default.
struct Section {
    const json& j;
    std::string path;

    Section(const json& jj, std::string p) : j(jj), path(std::move(p)) {
        if (!j.is_object()) throw std::invalid_argument("config: " + path + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = j.find(key);
        if (it == j.end()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw std::invalid_argument("config: bad value for " + path + key);
        }
        seen.push_back(key);
    }

    const json* sub(const char* key) {
        auto it = j.find(key);
        if (it == j.end()) return nullptr;
        seen.push_back(key);
        return &*it;
    }

    void finish() const {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (std::find(seen.begin(), seen.end(), it.key()) == seen.end())
                throw std::invalid_argument("config: unknown key " + path + it.key());
    }

    std::vector<std::string> seen;
};

void check(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw std::invalid_argument("config: " + field + " " + why);
}

}  // namespace

void RunConfig::apply_paper_scale() {
    network = NetworkConfig::paper_scale(Skeleton::preset(skeleton).motion_dim());
    train.batch = 128;
    train.adan.lr = 4e-4f;
}

void RunConfig::validate() const {
    Skeleton skel = Skeleton::preset(skeleton);  // throws on unknown preset
    check(network.motion_dim == skel.motion_dim(), "network.motion_dim",
          "must match the skeleton preset");
    network.validate();
    check(train.steps >= 1, "train.steps", "must be >= 1");
    check(train.start_step >= 0 && train.start_step < train.steps, "train.start_step",
          "must lie in [0, steps)");
    check(train.batch >= 1, "train.batch", "must be >= 1");
    check(train.p_equal >= 0.0f && train.p_equal <= 1.0f, "train.p_equal", "must be in [0,1]");
    check(train.cfg_dropout >= 0.0f && train.cfg_dropout < 1.0f, "train.cfg_dropout",
          "must be in [0,1)");
    check(train.ema_decay >= 0.0f && train.ema_decay < 1.0f, "train.ema_decay", "must be in [0,1)");
    check(train.log_interval >= 1, "train.log_interval", "must be >= 1");
    check(train.threads >= 1, "train.threads", "must be >= 1");
    check(train.adan.lr > 0.0f, "optimizer.lr", "must be positive");
    check(train.adan.weight_decay >= 0.0f, "optimizer.weight_decay", "must be >= 0");
    const LossWeights& w = train.weights;
    for (float lw : {w.mf, w.rec, w.pos, w.vel, w.fcl})
        check(lw >= 0.0f, "loss_weights", "must all be >= 0");
    check(sample.steps >= 1, "sample.steps", "must be >= 1");
    if (sample.guidance) check(std::isfinite(*sample.guidance), "sample.guidance", "must be finite");
    check(window_frames >= 0, "window_frames", "must be >= 0");
}

std::string RunConfig::to_json_text() const {
    json j;
    j["skeleton"] = skeleton;
    j["data_dir"] = data_dir;
    j["seed"] = seed;
    j["window_frames"] = window_frames;
    j["network"] = {{"latent_dim", network.latent_dim}, {"d_state", network.d_state},
                    {"conv_kernel", network.conv_kernel}, {"expand", network.expand},
                    {"cond_layers", network.cond_layers}, {"gen_blocks", network.gen_blocks},
                    {"dt_rank", network.dt_rank},         {"genre_count", network.genre_count}};
    j["loss_weights"] = {{"mf", train.weights.mf},   {"rec", train.weights.rec},
                         {"pos", train.weights.pos}, {"vel", train.weights.vel},
                         {"fcl", train.weights.fcl}};
    j["optimizer"] = {{"lr", train.adan.lr},     {"weight_decay", train.adan.weight_decay},
                      {"beta1", train.adan.beta1}, {"beta2", train.adan.beta2},
                      {"beta3", train.adan.beta3}, {"eps", train.adan.eps}};
    j["train"] = {{"steps", train.steps},
                  {"batch", train.batch},
                  {"p_equal", train.p_equal},
                  {"cfg_dropout", train.cfg_dropout},
                  {"ema_decay", train.ema_decay},
                  {"log_interval", train.log_interval},
                  {"threads", train.threads},
                  {"fd_tangent", train.fd_tangent}};
    j["sample"] = {{"steps", sample.steps}, {"solver", solver_name(sample.solver)}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    Section root(j, "");
    root.get("skeleton", c.skeleton);
    root.get("data_dir", c.data_dir);
    root.get("seed", c.seed);
    root.get("window_frames", c.window_frames);
    if (const json* n = root.sub("network")) {
        Section s(*n, "network.");
        s.get("latent_dim", c.network.latent_dim);
        s.get("d_state", c.network.d_state);
        s.get("conv_kernel", c.network.conv_kernel);
        s.get("expand", c.network.expand);
        s.get("cond_layers", c.network.cond_layers);
        s.get("gen_blocks", c.network.gen_blocks);
        s.get("dt_rank", c.network.dt_rank);
        s.get("genre_count", c.network.genre_count);
        s.finish();
    }
    if (const json* n = root.sub("loss_weights")) {
        Section s(*n, "loss_weights.");
        s.get("mf", c.train.weights.mf);
        s.get("rec", c.train.weights.rec);
        s.get("pos", c.train.weights.pos);
        s.get("vel", c.train.weights.vel);
        s.get("fcl", c.train.weights.fcl);
        s.finish();
    }
    if (const json* n = root.sub("optimizer")) {
        Section s(*n, "optimizer.");
        s.get("lr", c.train.adan.lr);
        s.get("weight_decay", c.train.adan.weight_decay);
        s.get("beta1", c.train.adan.beta1);
        s.get("beta2", c.train.adan.beta2);
        s.get("beta3", c.train.adan.beta3);
        s.get("eps", c.train.adan.eps);
        s.finish();
    }
    if (const json* n = root.sub("train")) {
        Section s(*n, "train.");
        s.get("steps", c.train.steps);
        s.get("batch", c.train.batch);
        s.get("p_equal", c.train.p_equal);
        s.get("cfg_dropout", c.train.cfg_dropout);
        s.get("ema_decay", c.train.ema_decay);
        s.get("log_interval", c.train.log_interval);
        s.get("threads", c.train.threads);
        s.get("fd_tangent", c.train.fd_tangent);
        s.finish();
    }
    if (const json* n = root.sub("sample")) {
        Section s(*n, "sample.");
        s.get("steps", c.sample.steps);
        std::string solver = solver_name(c.sample.solver);
        s.get("solver", solver);
        c.sample.solver = parse_solver(solver);
        s.finish();
    }
    root.finish();
    c.network.motion_dim = Skeleton::preset(c.skeleton).motion_dim();
    c.network.music_dim = kMusicDim;
    c.train.seed = c.seed;
    c.sample.seed = c.seed;
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::invalid_argument("config: cannot write " + path.string());
    os << to_json_text();
}

}  // namespace md
