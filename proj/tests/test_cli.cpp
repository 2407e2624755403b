#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "md/checkpoint.hpp"
#include "md/config.hpp"

using namespace md;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.latent_dim = 16;
    c.d_state = 4;
    c.conv_kernel = 3;
    c.expand = 2;
    c.cond_layers = 1;
    c.gen_blocks = 1;
    c.dt_rank = 2;
    c.motion_dim = 3 + 6 * 8;
    c.genre_count = 4;
    return c;
}

bool throws_containing(const std::function<void()>& f, const std::string& needle) {
    try {
        f();
    } catch (const std::exception& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("run config: defaults, json round trip, overrides from file") {
    RunConfig def;
    CHECK_NOTHROW(def.validate());
    CHECK(def.network.motion_dim == 51);

    std::string text = def.to_json_text();
    RunConfig back = RunConfig::from_json_text(text);
    CHECK(back.to_json_text() == text);

    RunConfig c = RunConfig::from_json_text(R"({
        "seed": 7,
        "network": {"latent_dim": 32, "gen_blocks": 2},
        "loss_weights": {"vel": 0.5},
        "train": {"steps": 10, "batch": 2},
        "sample": {"steps": 5, "solver": "midpoint"}
    })");
    CHECK(c.seed == 7);
    CHECK(c.train.seed == 7);
    CHECK(c.network.latent_dim == 32);
    CHECK(c.network.gen_blocks == 2);
    CHECK(c.network.cond_layers == 2);  // untouched default
    CHECK(c.train.weights.vel == 0.5f);
    CHECK(c.train.weights.rec == 0.636f);
    CHECK(c.train.steps == 10);
    CHECK(c.sample.solver == Solver::midpoint);
}

TEST_CASE("run config: schema violations are named") {
    auto parse = [](const std::string& t) { return RunConfig::from_json_text(t); };
    CHECK(throws_containing([&] { parse(R"({"stps": 3})"); }, "unknown key stps"));
    CHECK(throws_containing([&] { parse(R"({"network": {"latent": 9}})"); },
                            "unknown key network.latent"));
    CHECK(throws_containing([&] { parse(R"({"loss_weights": {"rec": -0.1}})"); }, "loss_weights"));
    CHECK(throws_containing([&] { parse(R"({"train": {"steps": 0}})"); }, "train.steps"));
    CHECK(throws_containing([&] { parse(R"({"sample": {"solver": "rk4"}})"); }, "rk4"));
    CHECK(throws_containing([&] { parse(R"({"skeleton": "toy9"})"); }, "toy9"));
    CHECK(throws_containing([&] { parse(R"({"train": {"cfg_dropout": 1.0}})"); }, "cfg_dropout"));
    CHECK(throws_containing([&] { parse(R"({"train": {"batch": "many"}})"); }, "train.batch"));
    CHECK(throws_containing([&] { parse("not json"); }, "invalid JSON"));
}

TEST_CASE("run config: paper scale restores supplementary values") {
    RunConfig c;
    c.apply_paper_scale();
    CHECK(c.network.latent_dim == 512);
    CHECK(c.network.cond_layers == 4);
    CHECK(c.network.gen_blocks == 8);
    CHECK(c.train.batch == 128);
    CHECK(c.train.adan.lr == 4e-4f);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("checkpoint: round trip is bit-exact, including optimizer and EMA") {
    auto dir = std::filesystem::temp_directory_path() / "mdtest_ckpt";
    std::filesystem::create_directories(dir);
    Skeleton skel = Skeleton::preset("toy8");

    Model model(tiny_config(), 5);
    TrainOptions opts;
    opts.steps = 2;
    opts.batch = 1;
    opts.seed = 3;
    opts.log_interval = 100;
    AdanState opt;
    EmaState ema = ema_init(model.params, opts.ema_decay);
    std::vector<DatasetRecord> data = {synth_record(12, 120.0, 1, skel, 8, "a")};
    train_loop(model, skel, data, opts, opt, ema, nullptr);

    auto p1 = dir / "a.ck";
    save_checkpoint(p1, model, 2, &opt, &ema);
    CheckpointData ck = load_checkpoint(p1);
    CHECK(ck.step == 2);
    REQUIRE(ck.opt.has_value());
    REQUIRE(ck.ema.has_value());
    CHECK(ck.opt->step == opt.step);
    CHECK(ck.ema->decay == ema.decay);
    REQUIRE(ck.model.params.items.size() == model.params.items.size());
    for (size_t i = 0; i < model.params.items.size(); ++i) {
        CHECK(ck.model.params.items[i].first == model.params.items[i].first);
        CHECK(ck.model.params.items[i].second.data == model.params.items[i].second.data);
        CHECK(ck.opt->m[i].data == opt.m[i].data);
        CHECK(ck.opt->g_prev[i].data == opt.g_prev[i].data);
        CHECK(ck.ema->shadow[i].data == ema.shadow[i].data);
    }

    // save(load(x)) reproduces the file byte for byte
    auto p2 = dir / "b.ck";
    save_checkpoint(p2, ck.model, ck.step, &*ck.opt, &*ck.ema);
    CHECK(slurp(p1) == slurp(p2));

    // weights-only checkpoint: optional blocks absent
    auto p3 = dir / "w.ck";
    save_checkpoint(p3, model, 7);
    CheckpointData w = load_checkpoint(p3);
    CHECK(w.step == 7);
    CHECK_FALSE(w.opt.has_value());
    CHECK_FALSE(w.ema.has_value());

    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: config/tensor mismatch and corruption diagnostics") {
    auto dir = std::filesystem::temp_directory_path() / "mdtest_ckpt2";
    std::filesystem::create_directories(dir);
    Model model(tiny_config(), 1);
    auto path = dir / "m.ck";
    save_checkpoint(path, model, 0);

    // flip latent_dim in the stored config block (offset 8: after magic+version);
    // the tensor entries no longer match that config's registry shapes
    std::string bytes = slurp(path);
    int32_t latent = 32;
    std::memcpy(bytes.data() + 8, &latent, 4);
    auto bad = dir / "bad.ck";
    std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK(throws_containing([&] { load_checkpoint(bad); }, "mismatch"));
    CHECK(throws_containing([&] { load_checkpoint(bad); }, "in_proj"));  // names the tensors

    // truncation and bad magic
    auto trunc = dir / "trunc.ck";
    std::ofstream(trunc, std::ios::binary).write(bytes.data(), 64);
    CHECK_THROWS(load_checkpoint(trunc));
    auto nomagic = dir / "x.ck";
    std::ofstream(nomagic, std::ios::binary).write("XXXX0000", 8);
    CHECK(throws_containing([&] { load_checkpoint(nomagic); }, "magic"));
    CHECK_THROWS(load_checkpoint(dir / "missing.ck"));

    std::filesystem::remove_all(dir);
}

TEST_CASE("training resumes bit-identically from a checkpoint") {
    Skeleton skel = Skeleton::preset("toy8");
    std::vector<DatasetRecord> data = {synth_record(12, 120.0, 0, skel, 2, "a"),
                                       synth_record(12, 100.0, 1, skel, 3, "b")};
    TrainOptions opts;
    opts.steps = 4;
    opts.batch = 2;
    opts.seed = 11;
    opts.log_interval = 100;

    Model straight(tiny_config(), 5);
    AdanState opt_s;
    EmaState ema_s = ema_init(straight.params, opts.ema_decay);
    auto curve = train_loop(straight, skel, data, opts, opt_s, ema_s, nullptr);

    auto dir = std::filesystem::temp_directory_path() / "mdtest_resume";
    std::filesystem::create_directories(dir);
    Model half(tiny_config(), 5);
    AdanState opt_h;
    EmaState ema_h = ema_init(half.params, opts.ema_decay);
    TrainOptions first = opts;
    first.steps = 2;
    train_loop(half, skel, data, first, opt_h, ema_h, nullptr);
    save_checkpoint(dir / "half.ck", half, 2, &opt_h, &ema_h);

    CheckpointData ck = load_checkpoint(dir / "half.ck");
    TrainOptions second = opts;
    second.start_step = static_cast<int>(ck.step);
    auto tail = train_loop(ck.model, skel, data, second, *ck.opt, *ck.ema, nullptr);

    CHECK(tail.back().total == curve.back().total);
    for (size_t i = 0; i < straight.params.items.size(); ++i)
        CHECK(ck.model.params.items[i].second.data == straight.params.items[i].second.data);
    std::filesystem::remove_all(dir);
}
