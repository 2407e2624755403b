// Command-line front end: dataset generation, training, sampling, editing,
// evaluation, and loss-curve export.
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "md/checkpoint.hpp"
#include "md/config.hpp"
#include "md/metrics.hpp"

using namespace md;

namespace {

std::pair<double, double> parse_bpm_range(const std::string& s) {
    std::istringstream is(s);
    double a, b;
    char colon;
    if (!(is >> a >> colon >> b) || colon != ':' || a <= 0 || b < a)
        throw CLI::ValidationError("--bpm-range", "expected A:B with 0 < A <= B");
    return {a, b};
}

int cmd_gen_data(const std::string& out, int sequences, int frames, const std::string& bpm_range,
                 int genres, uint64_t seed, const std::string& skeleton) {
    auto [bpm_lo, bpm_hi] = parse_bpm_range(bpm_range);
    Skeleton skel = Skeleton::preset(skeleton);
    if (genres < 1 || genres > kNumGenres)
        throw CLI::ValidationError("--genres", "must be in [1, " + std::to_string(kNumGenres) + "]");
    std::filesystem::create_directories(out);
    std::ofstream manifest(std::filesystem::path(out) / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + out);
    for (int i = 0; i < sequences; ++i) {
        Rng rng(derive_seed(seed, 0xDA7Au, i));
        double bpm = bpm_lo + (bpm_hi - bpm_lo) * rng.uniform();
        std::string name = "rec_" + std::to_string(i) + ".fdr";
        DatasetRecord rec =
            synth_record(frames, bpm, i % genres, skel, derive_seed(seed, 0xD5u, i), name);
        save_record(rec, std::filesystem::path(out) / name);
        manifest << name << "\n";
    }
    std::cout << "wrote " << sequences << " records to " << out << "\n";
    return 0;
}

std::vector<DatasetRecord> load_training_data(const std::string& dir, const RunConfig& cfg) {
    std::vector<DatasetRecord> records = load_dataset(dir);
    if (cfg.window_frames <= 0) return records;
    std::vector<DatasetRecord> windows;
    for (const auto& rec : records)
        for (auto& w : window(rec, cfg.window_frames, cfg.window_frames))
            windows.push_back(std::move(w));
    if (windows.empty())
        throw std::runtime_error("training data: no record reaches window_frames=" +
                                 std::to_string(cfg.window_frames));
    return windows;
}

// Mirrors train_loop's log lines into both stdout and the log file that
// `curves` consumes.
class TeeBuf : public std::streambuf {
  public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

  protected:
    int overflow(int c) override {
        if (c == EOF) return c;
        if (a_->sputc(static_cast<char>(c)) == EOF) return EOF;
        if (b_->sputc(static_cast<char>(c)) == EOF) return EOF;
        return c;
    }

  private:
    std::streambuf *a_, *b_;
};

int cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& out,
              const std::string& resume, int ckpt_interval) {
    cfg.validate();
    Skeleton skel = Skeleton::preset(cfg.skeleton);
    std::vector<DatasetRecord> data = load_training_data(data_dir, cfg);

    Model model;
    AdanState opt;
    EmaState ema;
    if (!resume.empty()) {
        CheckpointData ck = load_checkpoint(resume);
        if (!ck.opt || !ck.ema)
            throw std::runtime_error("--resume needs a checkpoint with optimizer and EMA state");
        model = std::move(ck.model);
        opt = std::move(*ck.opt);
        ema = std::move(*ck.ema);
        cfg.train.start_step = static_cast<int>(ck.step);
        if (cfg.train.start_step >= cfg.train.steps)
            throw std::runtime_error("--resume: checkpoint already at step " +
                                     std::to_string(ck.step));
    } else {
        model.init(cfg.network, cfg.seed);
        ema = ema_init(model.params, cfg.train.ema_decay);
    }

    std::ofstream log_file(out + ".log", resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log_file) throw std::runtime_error("cannot write " + out + ".log");
    TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
    std::ostream log(&tee);

    // run in checkpoint-interval chunks so intermediates land on disk
    int done = cfg.train.start_step;
    while (done < cfg.train.steps) {
        TrainOptions chunk = cfg.train;
        chunk.start_step = done;
        chunk.steps = std::min(cfg.train.steps, done + ckpt_interval);
        train_loop(model, skel, data, chunk, opt, ema, &log);
        done = chunk.steps;
        save_checkpoint(out, model, done, &opt, &ema);
        std::cout << "checkpoint at step " << done << " -> " << out << "\n";
    }
    return 0;
}

Model select_model(CheckpointData& ck, bool use_ema) {
    if (!use_ema) return std::move(ck.model);
    if (!ck.ema) throw std::runtime_error("--ema: checkpoint has no EMA shadow");
    Model m;
    m.cfg = ck.model.cfg;
    m.params = ema_params(*ck.ema, ck.model.params);
    return m;
}

int cmd_sample(const std::string& ckpt, const std::string& music_path, const std::string& out,
               SampleConfig scfg, bool use_ema) {
    CheckpointData ck = load_checkpoint(ckpt);
    Model model = select_model(ck, use_ema);
    DatasetRecord rec = load_record(music_path);
    if (scfg.guidance)
        std::cerr << "warning: --guidance assumes the checkpoint was trained with "
                     "--cfg-dropout > 0; without that the null-condition branch is untrained\n";
    rec.motion = generate(model, rec.music, scfg);
    rec.id = std::filesystem::path(out).filename().string();
    save_record(rec, out);
    std::cout << "wrote " << out << " (" << rec.motion.frames() << " frames, solver "
              << solver_name(scfg.solver) << ", steps " << scfg.steps << ")\n";
    return 0;
}

int cmd_edit(const std::string& ckpt, const std::string& music_path, const std::string& spec_path,
             const std::string& mode, const std::string& out, SampleConfig scfg, bool use_ema) {
    CheckpointData ck = load_checkpoint(ckpt);
    Model model = select_model(ck, use_ema);
    Skeleton skel = Skeleton::preset("toy8");
    for (const std::string& name : {std::string("toy8"), std::string("smpl24")})
        if (Skeleton::preset(name).motion_dim() == model.cfg.motion_dim) skel = Skeleton::preset(name);
    DatasetRecord rec = load_record(music_path);

    std::ifstream spec_file(spec_path);
    if (!spec_file) throw std::runtime_error("cannot open edit spec " + spec_path);
    std::string spec_text((std::istreambuf_iterator<char>(spec_file)),
                          std::istreambuf_iterator<char>());
    EditSpec spec = parse_edit_spec(spec_text, skel, rec.music.frames(),
                                    std::filesystem::path(spec_path).parent_path());
    if (mode == "soft") spec.hard = false;
    else if (mode == "hard") spec.hard = true;
    else if (!mode.empty()) throw CLI::ValidationError("--mode", "must be soft or hard");

    MotionSequence free_motion = generate(model, rec.music, scfg);
    rec.motion = edit_sample(model, rec.music, scfg, spec);
    rec.id = std::filesystem::path(out).filename().string();
    save_record(rec, out);

    std::vector<int> edges = mask_edge_frames(spec.mask);
    std::ofstream report(out + ".jerk.txt");
    report << "mode = " << (spec.hard ? "hard" : "soft") << "\n";
    report << "mask_edges =";
    for (int e : edges) report << " " << e;
    report << "\n";
    report << "edited_boundary_jerk = " << boundary_jerk(rec.motion.channels, skel, edges) << "\n";
    report << "free_boundary_jerk = " << boundary_jerk(free_motion.channels, skel, edges) << "\n";
    std::cout << "wrote " << out << " and " << out << ".jerk.txt\n";
    return 0;
}

int cmd_eval(const std::string& gen, const std::string& ref, const std::string& out,
             const std::string& skeleton, const std::string& csv) {
    Skeleton skel = Skeleton::preset(skeleton);
    std::optional<std::filesystem::path> csv_path;
    if (!csv.empty()) csv_path = csv;
    EvalReport rep = evaluate_dirs(gen, ref, skel, csv_path);
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << rep.text();
    std::cout << rep.text();
    return 0;
}

int cmd_curves(const std::string& log_path, const std::string& out) {
    std::ifstream is(log_path);
    if (!is) throw std::runtime_error("cannot open log " + log_path);
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << "step,l_mf,l_rec,l_pos,l_vel,total\n";
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tok;
        std::map<std::string, std::string> kv;
        while (ls >> tok) {
            auto eq = tok.find('=');
            if (eq != std::string::npos) kv[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
        if (!kv.count("step") || !kv.count("total")) continue;
        os << kv["step"] << "," << kv["l_mf"] << "," << kv["l_rec"] << "," << kv["l_pos"] << ","
           << kv["l_vel"] << "," << kv["total"] << "\n";
        ++rows;
    }
    if (rows == 0) throw std::runtime_error("no loss lines found in " + log_path);
    std::cout << "wrote " << rows << " rows to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"music-to-dance pipeline"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_out, gd_bpm = "90:130", gd_skel = "toy8";
    int gd_sequences = 10, gd_frames = 240, gd_genres = kNumGenres;
    uint64_t gd_seed = 0;
    auto* gen_data = app.add_subcommand("gen-data", "generate a synthetic beat-locked dataset");
    gen_data->add_option("--out", gd_out, "output directory")->required();
    gen_data->add_option("--sequences", gd_sequences, "record count");
    gen_data->add_option("--frames", gd_frames, "frames per record");
    gen_data->add_option("--bpm-range", gd_bpm, "tempo range A:B");
    gen_data->add_option("--genres", gd_genres, "number of genre ids used");
    gen_data->add_option("--seed", gd_seed, "rng seed");
    gen_data->add_option("--skeleton", gd_skel, "skeleton preset");

    // train
    std::string tr_config, tr_data, tr_out, tr_resume;
    bool tr_fcl = false, tr_paper = false, tr_fd = false;
    double tr_cfg_dropout = -1;
    int tr_steps = -1, tr_batch = -1, tr_threads = -1, tr_interval = 500;
    int64_t tr_seed = -1;
    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--config", tr_config, "JSON run config");
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--out", tr_out, "checkpoint path")->required();
    train->add_option("--resume", tr_resume, "checkpoint to continue from");
    train->add_flag("--fcl", tr_fcl, "enable the foot contact loss (weight 0.323)");
    train->add_option("--cfg-dropout", tr_cfg_dropout, "condition dropout probability");
    train->add_flag("--paper-scale", tr_paper, "supplementary-scale network and batch");
    train->add_option("--steps", tr_steps, "override total steps");
    train->add_option("--batch", tr_batch, "override batch size");
    train->add_option("--seed", tr_seed, "override seed");
    train->add_option("--threads", tr_threads, "override worker threads");
    train->add_flag("--fd-tangent", tr_fd, "finite-difference MeanFlow tangent");
    train->add_option("--ckpt-interval", tr_interval, "steps between checkpoints");

    // sample
    std::string sm_ckpt, sm_music, sm_out, sm_solver = "euler";
    int sm_steps = 20;
    uint64_t sm_seed = 0;
    bool sm_ema = false;
    double sm_guidance = std::numeric_limits<double>::quiet_NaN();
    auto* sample = app.add_subcommand("sample", "sample motion for a music record");
    sample->add_option("--ckpt", sm_ckpt, "checkpoint")->required();
    sample->add_option("--music", sm_music, ".fdr record supplying the music")->required();
    sample->add_option("--out", sm_out, "output .fdr")->required();
    sample->add_option("--steps", sm_steps, "solver steps");
    sample->add_option("--solver", sm_solver, "euler | midpoint | heun");
    sample->add_option("--seed", sm_seed, "rng seed");
    sample->add_flag("--ema", sm_ema, "use the EMA shadow weights");
    sample->add_option("--guidance", sm_guidance, "classifier-free guidance weight");

    // edit
    std::string ed_ckpt, ed_music, ed_spec, ed_mode, ed_out, ed_solver = "euler";
    int ed_steps = 20;
    uint64_t ed_seed = 0;
    bool ed_ema = false;
    auto* edit = app.add_subcommand("edit", "constraint-aware sampling");
    edit->add_option("--ckpt", ed_ckpt, "checkpoint")->required();
    edit->add_option("--music", ed_music, ".fdr record supplying the music")->required();
    edit->add_option("--edit", ed_spec, "edit spec file")->required();
    edit->add_option("--mode", ed_mode, "soft | hard (overrides the spec)");
    edit->add_option("--out", ed_out, "output .fdr")->required();
    edit->add_option("--steps", ed_steps, "solver steps");
    edit->add_option("--solver", ed_solver, "euler | midpoint | heun");
    edit->add_option("--seed", ed_seed, "rng seed");
    edit->add_flag("--ema", ed_ema, "use the EMA shadow weights");

    // eval
    std::string ev_gen, ev_ref, ev_out, ev_skel = "toy8", ev_csv;
    auto* eval = app.add_subcommand("eval", "metric report for generated vs reference data");
    eval->add_option("--gen", ev_gen, "generated dataset dir")->required();
    eval->add_option("--ref", ev_ref, "reference dataset dir")->required();
    eval->add_option("--out", ev_out, "report path")->required();
    eval->add_option("--skeleton", ev_skel, "skeleton preset");
    eval->add_option("--csv", ev_csv, "optional per-sequence CSV");

    // curves
    std::string cv_log, cv_out;
    auto* curves = app.add_subcommand("curves", "loss-curve CSV from a training log");
    curves->add_option("--log", cv_log, "training log file")->required();
    curves->add_option("--out", cv_out, "CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_data->parsed())
            return cmd_gen_data(gd_out, gd_sequences, gd_frames, gd_bpm, gd_genres, gd_seed, gd_skel);
        if (train->parsed()) {
            RunConfig cfg = tr_config.empty() ? RunConfig{} : RunConfig::load(tr_config);
            if (tr_paper) cfg.apply_paper_scale();
            if (tr_fcl) cfg.train.weights.fcl = 0.323f;
            if (tr_cfg_dropout >= 0) cfg.train.cfg_dropout = static_cast<float>(tr_cfg_dropout);
            if (tr_steps >= 0) cfg.train.steps = tr_steps;
            if (tr_batch >= 0) cfg.train.batch = tr_batch;
            if (tr_threads >= 0) cfg.train.threads = tr_threads;
            if (tr_fd) cfg.train.fd_tangent = true;
            if (tr_seed >= 0) {
                cfg.seed = static_cast<uint64_t>(tr_seed);
                cfg.train.seed = cfg.seed;
                cfg.sample.seed = cfg.seed;
            }
            return cmd_train(cfg, tr_data, tr_out, tr_resume, tr_interval);
        }
        if (sample->parsed()) {
            SampleConfig scfg;
            scfg.steps = sm_steps;
            scfg.solver = parse_solver(sm_solver);
            scfg.seed = sm_seed;
            if (!std::isnan(sm_guidance)) scfg.guidance = static_cast<float>(sm_guidance);
            return cmd_sample(sm_ckpt, sm_music, sm_out, scfg, sm_ema);
        }
        if (edit->parsed()) {
            SampleConfig scfg;
            scfg.steps = ed_steps;
            scfg.solver = parse_solver(ed_solver);
            scfg.seed = ed_seed;
            return cmd_edit(ed_ckpt, ed_music, ed_spec, ed_mode, ed_out, scfg, ed_ema);
        }
        if (eval->parsed()) return cmd_eval(ev_gen, ev_ref, ev_out, ev_skel, ev_csv);
        if (curves->parsed()) return cmd_curves(cv_log, cv_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
