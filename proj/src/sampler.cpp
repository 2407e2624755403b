#include "md/sampler.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace md {

Solver parse_solver(const std::string& name) {
    if (name == "euler") return Solver::euler;
    if (name == "midpoint") return Solver::midpoint;
    if (name == "heun") return Solver::heun;
    throw std::invalid_argument("unknown solver '" + name + "' (valid: euler, midpoint, heun)");
}

std::string solver_name(Solver s) {
    switch (s) {
        case Solver::euler: return "euler";
        case Solver::midpoint: return "midpoint";
        case Solver::heun: return "heun";
    }
    return "?";
}

Tensor cfg_field(const Tensor& u_cond, const Tensor& u_uncond, float omega) {
    check_shape(u_cond, u_uncond, "cfg_field");
    return zip(u_cond, u_uncond,
               [omega](float c, float u) { return omega * c + (1.0f - omega) * u; });
}

void EditSpec::validate() const {
    check_shape(constraint, mask, "EditSpec");
    for (int64_t i = 0; i < mask.size(); ++i) {
        float m = mask.data[i];
        if (m != 0.0f && m != 1.0f) throw std::invalid_argument("EditSpec: mask must be binary");
        if (m == 1.0f && !std::isfinite(constraint.data[i]))
            throw std::invalid_argument("EditSpec: constraint non-finite on masked entry");
    }
}

Tensor apply_edit_mask(const Tensor& z_t, float t, const EditSpec& edit, const Tensor& eps) {
    check_shape(z_t, edit.mask, "apply_edit_mask");
    check_shape(z_t, eps, "apply_edit_mask");
    if (t < 0.0f || t > 1.0f) throw std::invalid_argument("apply_edit_mask: t must be in [0,1]");
    Tensor out = Tensor::uninit(z_t.shape);
    for (int64_t i = 0; i < out.size(); ++i) {
        float coef = (edit.hard ? 1.0f : t) * edit.mask.data[i];
        float fp = (1.0f - t) * edit.constraint.data[i] + t * eps.data[i];
        out.data[i] = coef * fp + (1.0f - coef) * z_t.data[i];
    }
    return out;
}

namespace {

void check_finite(const Tensor& z, int step) {
    if (!z.all_finite())
        throw std::runtime_error("sample: non-finite state at step " + std::to_string(step));
}

}  // namespace

Tensor sample_field(const VelocityField& u, const Tensor& eps, int steps, Solver solver,
                    const EditSpec* edit, const Tensor* edit_eps) {
    if (steps < 1) throw std::invalid_argument("sample_field: steps must be >= 1");
    if (edit && !edit_eps) throw std::invalid_argument("sample_field: edit requires edit noise");
    Tensor z = eps;
    float n = static_cast<float>(steps);
    for (int i = 0; i < steps; ++i) {
        float t = 1.0f - static_cast<float>(i) / n;
        float r = 1.0f - static_cast<float>(i + 1) / n;
        if (i + 1 == steps) r = 0.0f;
        float h = t - r;
        if (edit && !edit->empty()) z = apply_edit_mask(z, t, *edit, *edit_eps);
        switch (solver) {
            case Solver::euler: {
                Tensor v = u(z, r, t);
                axpy(z, -h, v);
                break;
            }
            case Solver::midpoint: {
                Tensor k1 = u(z, t, t);
                Tensor zh = z;
                axpy(zh, -0.5f * h, k1);
                Tensor k2 = u(zh, t - 0.5f * h, t - 0.5f * h);
                axpy(z, -h, k2);
                break;
            }
            case Solver::heun: {
                Tensor k1 = u(z, t, t);
                Tensor ze = z;
                axpy(ze, -h, k1);
                Tensor k2 = u(ze, r, r);
                for (int64_t e = 0; e < z.size(); ++e)
                    z.data[e] -= 0.5f * h * (k1.data[e] + k2.data[e]);
                break;
            }
        }
        check_finite(z, i);
    }
    return z;
}

VelocityField model_field(const Model& model, const Tensor& music, int genre,
                          const SampleConfig& cfg) {
    if (!cfg.guidance) {
        return [&model, music, genre](const Tensor& z, float r, float t) {
            return model.forward_eval(z, r, t, music, genre);
        };
    }
    float omega = *cfg.guidance;
    Tensor null_music = Tensor::zeros(music.shape);
    int null_genre = model.cfg.genre_count;
    return [&model, music, genre, null_music, null_genre, omega](const Tensor& z, float r, float t) {
        Tensor uc = model.forward_eval(z, r, t, music, genre);
        Tensor uu = model.forward_eval(z, r, t, null_music, null_genre);
        return cfg_field(uc, uu, omega);
    };
}

MotionSequence generate(const Model& model, const MusicSequence& music, const SampleConfig& cfg) {
    int T = music.frames();
    Rng rng(cfg.seed);
    Tensor eps = rng.normal_tensor({T, model.cfg.motion_dim});
    VelocityField u = model_field(model, music.features, music.genre, cfg);
    return MotionSequence{sample_field(u, eps, cfg.steps, cfg.solver)};
}

MotionSequence edit_sample(const Model& model, const MusicSequence& music, const SampleConfig& cfg,
                           const EditSpec& edit) {
    edit.validate();
    int T = music.frames();
    if (edit.mask.rows() != T || edit.mask.cols() != model.cfg.motion_dim)
        throw std::invalid_argument("edit_sample: edit spec shape mismatch");
    Rng rng(cfg.seed);
    Tensor eps = rng.normal_tensor({T, model.cfg.motion_dim});
    // Reusing the trajectory's initial noise keeps the constraint flow on the
    // same straight path as the sample; a fresh draw is available behind a flag.
    Tensor edit_eps = cfg.edit_fresh_noise
                          ? Rng(derive_seed(cfg.seed, 0xED17u, 0)).normal_tensor(eps.shape)
                          : eps;
    VelocityField u = model_field(model, music.features, music.genre, cfg);
    return MotionSequence{sample_field(u, eps, cfg.steps, cfg.solver, &edit, &edit_eps)};
}

void mask_add_region(Tensor& mask, const Skeleton& skel, int start, int end,
                     const std::string& group) {
    int T = mask.rows(), D = mask.cols();
    if (D != skel.motion_dim()) throw std::invalid_argument("mask_add_region: dim mismatch");
    if (start < 0 || end > T || start >= end)
        throw std::invalid_argument("mask_add_region: bad frame range");
    std::vector<int> channels;
    if (group == "root") {
        channels = {0, 1, 2};
    } else if (group == "all") {
        channels.resize(D);
        for (int c = 0; c < D; ++c) channels[c] = c;
    } else if (group == "upper" || group == "lower") {
        const auto& js = group == "upper" ? skel.upper_joints : skel.lower_joints;
        for (int j : js)
            for (int c = 0; c < 6; ++c) channels.push_back(3 + 6 * j + c);
    } else {
        throw std::invalid_argument("mask_add_region: unknown group '" + group +
                                    "' (valid: root, upper, lower, all)");
    }
    for (int t = start; t < end; ++t)
        for (int c : channels) mask(t, c) = 1.0f;
}

EditSpec parse_edit_spec(const std::string& text, const Skeleton& skel, int frames,
                         const std::filesystem::path& base_dir) {
    EditSpec spec;
    spec.mask = Tensor::zeros({frames, skel.motion_dim()});
    bool has_constraint = false;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        auto fail = [&](const std::string& msg) {
            throw std::invalid_argument("edit spec line " + std::to_string(lineno) + ": " + msg);
        };
        if (key == "mode") {
            std::string mode;
            if (!(ls >> mode)) fail("mode requires soft|hard");
            if (mode == "soft") spec.hard = false;
            else if (mode == "hard") spec.hard = true;
            else fail("mode must be soft or hard");
        } else if (key == "constraint") {
            std::string path;
            if (!(ls >> path)) fail("constraint requires a path");
            DatasetRecord rec = load_record(base_dir / path);
            if (rec.motion.frames() < frames) fail("constraint motion shorter than sequence");
            if (rec.motion.channels.cols() != skel.motion_dim()) fail("constraint dim mismatch");
            spec.constraint = Tensor::uninit({frames, skel.motion_dim()});
            std::copy_n(rec.motion.channels.data.begin(),
                        static_cast<size_t>(frames) * skel.motion_dim(),
                        spec.constraint.data.begin());
            has_constraint = true;
        } else if (key == "frames" || key == "channels") {
            // `[frames A:B[,C:D...]] channels <group>`; no frames = whole clip
            std::vector<std::pair<int, int>> ranges;
            if (key == "frames") {
                std::string spans;
                if (!(ls >> spans)) fail("frames requires A:B[,C:D...]");
                std::istringstream ss(spans);
                std::string span;
                while (std::getline(ss, span, ',')) {
                    int a, b;
                    char colon;
                    std::istringstream sp(span);
                    if (!(sp >> a >> colon >> b) || colon != ':')
                        fail("bad frame range '" + span + "' (want A:B)");
                    ranges.emplace_back(a, b);
                }
                if (ranges.empty()) fail("frames requires A:B[,C:D...]");
                if (!(ls >> key) || key != "channels") fail("frames must be followed by channels");
            } else {
                ranges.emplace_back(0, frames);
            }
            std::string group;
            if (!(ls >> group)) fail("channels requires a group");
            for (auto [a, b] : ranges) {
                try {
                    mask_add_region(spec.mask, skel, a, b, group);
                } catch (const std::invalid_argument& e) {
                    fail(e.what());
                }
            }
        } else {
            fail("unknown directive '" + key + "'");
        }
    }
    if (!has_constraint) throw std::invalid_argument("edit spec: missing constraint");
    spec.validate();
    return spec;
}

std::vector<int> mask_edge_frames(const Tensor& mask) {
    std::vector<int> edges;
    int T = mask.rows(), D = mask.cols();
    for (int t = 1; t < T; ++t) {
        for (int c = 0; c < D; ++c) {
            if (mask(t, c) != mask(t - 1, c)) {
                edges.push_back(t);
                break;
            }
        }
    }
    return edges;
}

float boundary_jerk(const Tensor& motion, const Skeleton& skel, const std::vector<int>& edges,
                    float fps) {
    Tensor vel = frame_velocities(fk_positions(motion, skel), fps);
    int D = vel.cols();
    float worst = 0.0f;
    for (int f : edges) {
        if (f < 1 || f >= vel.rows()) continue;
        double acc = 0.0;
        for (int c = 0; c < D; ++c) {
            float d = vel(f, c) - vel(f - 1, c);
            acc += static_cast<double>(d) * d;
        }
        worst = std::max(worst, static_cast<float>(std::sqrt(acc)));
    }
    return worst;
}

}  // namespace md
