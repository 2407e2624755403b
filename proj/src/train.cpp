#include "md/train.hpp"

#include <ostream>
#include <thread>

namespace md {

Tensor flow_path(const Tensor& x, const Tensor& eps, float t) {
    check_shape(x, eps, "flow_path");
    if (t < 0.0f || t > 1.0f) throw std::invalid_argument("flow_path: t must be in [0,1]");
    return zip(x, eps, [t](float xv, float ev) { return (1.0f - t) * xv + t * ev; });
}

Tensor instantaneous_velocity(const Tensor& x, const Tensor& eps) {
    check_shape(x, eps, "instantaneous_velocity");
    return ew_sub(eps, x);
}

std::pair<float, float> sample_times(Rng& rng, float p_equal) {
    if (p_equal < 0.0f || p_equal > 1.0f) throw std::invalid_argument("sample_times: p_equal in [0,1]");
    if (rng.uniform() < p_equal) {
        float u = static_cast<float>(rng.uniform());
        return {u, u};
    }
    float a = static_cast<float>(rng.uniform());
    float b = static_cast<float>(rng.uniform());
    return {std::min(a, b), std::max(a, b)};
}

MfTarget meanflow_target(Graph& g, const Model& model, Graph::V cond, const Tensor& z_t, float r,
                         float t, const Tensor& v, const FdTangent* fd) {
    if (r > t) throw std::invalid_argument("meanflow_target: r must not exceed t");
    check_shape(z_t, v, "meanflow_target");
    MfTarget out;
    if (fd) {
        auto zi = g.input(z_t);
        out.u = model.forward_with_cond(g, zi, g.input(Tensor::scalar(r)), g.input(Tensor::scalar(t)),
                                        cond);
        if (r == t) {
            out.u_tgt = v;
            return out;
        }
        float h = fd->h;
        Tensor zp = z_t, zm = z_t;
        axpy(zp, h, v);
        axpy(zm, -h, v);
        Tensor up = model.forward_eval(zp, r, t + h, fd->music, fd->genre);
        Tensor um = model.forward_eval(zm, r, t - h, fd->music, fd->genre);
        Tensor du = ew_scale(ew_sub(up, um), 0.5f / h);
        out.u_tgt = ew_sub(v, ew_scale(du, t - r));
        return out;
    }
    if (r == t) {
        // (t-r) = 0 exactly: the FM reduction, bit-exact; no tangents needed.
        auto zi = g.input(z_t);
        out.u = model.forward_with_cond(g, zi, g.input(Tensor::scalar(r)),
                                        g.input(Tensor::scalar(t)), cond);
        out.u_tgt = v;
        return out;
    }
    // one pass: the tape carries tangents along (dz, dr, dt) = (v, 0, 1)
    auto zi = g.input(z_t, v);
    auto ti = g.input(Tensor::scalar(t), Tensor::scalar(1.0f));
    out.u = model.forward_with_cond(g, zi, g.input(Tensor::scalar(r)), ti, cond);
    out.u_tgt = ew_sub(v, ew_scale(g.tan_or_zero(out.u), t - r));
    return out;
}

PccNodes pcc_losses(Graph& g, const Model& model, Graph::V cond, const Tensor& x, const Tensor& eps,
                    float t1, const Skeleton& skel, float fps) {
    PccNodes out;
    Tensor z_t1 = flow_path(x, eps, t1);
    auto zi = g.input(z_t1);
    auto u = model.forward_with_cond(g, zi, g.input(Tensor::scalar(0.0f)),
                                     g.input(Tensor::scalar(t1)), cond);
    out.z0_hat = g.sub(zi, g.scale(u, t1));
    out.rec = g.mse(out.z0_hat, g.constant(x));
    Tensor pos_gt = fk_positions(x, skel);
    auto pos_hat = g.fk(out.z0_hat, skel);
    out.pos = g.mse(pos_hat, g.constant(pos_gt));
    out.vel = g.mse(g.time_diff(pos_hat, fps), g.constant(frame_velocities(pos_gt, fps)));
    return out;
}

Graph::V fcl_loss(Graph& g, Graph::V z0_hat, const Tensor& gt_contacts, const Skeleton& skel,
                  float fps) {
    int T = g.val(z0_hat).rows();
    int nf = static_cast<int>(skel.foot_joints.size());
    if (gt_contacts.rows() != T || gt_contacts.cols() != nf)
        throw std::invalid_argument("fcl_loss: contact label shape mismatch");
    Tensor mask = Tensor::zeros({T, 3 * skel.joints});
    int n_contact = 0;
    for (int t = 0; t < T; ++t)
        for (int f = 0; f < nf; ++f)
            if (gt_contacts(t, f) > 0.5f) {
                ++n_contact;
                int j = skel.foot_joints[f];
                for (int i = 0; i < 3; ++i) mask(t, 3 * j + i) = 1.0f;
            }
    if (n_contact == 0) return g.constant(Tensor::scalar(0.0f));
    auto vel = g.time_diff(g.fk(z0_hat, skel), fps);
    auto masked = g.mul(g.mul(vel, vel), g.constant(mask));
    return g.scale(g.sum_all(masked), 1.0f / static_cast<float>(n_contact));
}

void adan_step(ParameterStore& params, const std::vector<Tensor>& grads, AdanState& state,
               const AdanConfig& cfg) {
    size_t np = params.items.size();
    if (grads.size() != np) throw std::invalid_argument("adan_step: gradient count mismatch");
    if (state.m.empty()) {
        for (const auto& [name, p] : params.items) {
            state.m.push_back(Tensor::zeros(p.shape));
            state.v.push_back(Tensor::zeros(p.shape));
            state.n.push_back(Tensor::zeros(p.shape));
        }
        state.g_prev.resize(np);
    }
    ++state.step;
    double k = static_cast<double>(state.step);
    float c1 = 1.0f - static_cast<float>(std::pow(1.0 - cfg.beta1, k));
    float c2 = 1.0f - static_cast<float>(std::pow(1.0 - cfg.beta2, k));
    float c3 = 1.0f - static_cast<float>(std::pow(1.0 - cfg.beta3, k));
    float decay_div = 1.0f + cfg.lr * cfg.weight_decay;
    for (size_t i = 0; i < np; ++i) {
        Tensor& p = params.items[i].second;
        const Tensor& g = grads[i];
        if (!p.same_shape(g)) throw std::invalid_argument("adan_step: gradient shape mismatch");
        if (!g.all_finite())
            throw std::runtime_error("adan_step: non-finite gradient for " + params.items[i].first);
        const Tensor& gp = state.g_prev[i].empty() ? g : state.g_prev[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        Tensor& n = state.n[i];
        for (int64_t e = 0; e < p.size(); ++e) {
            float gv = g.data[e];
            float diff = gv - gp.data[e];
            m.data[e] = (1.0f - cfg.beta1) * m.data[e] + cfg.beta1 * gv;
            v.data[e] = (1.0f - cfg.beta2) * v.data[e] + cfg.beta2 * diff;
            float nest = gv + (1.0f - cfg.beta2) * diff;
            n.data[e] = (1.0f - cfg.beta3) * n.data[e] + cfg.beta3 * nest * nest;
            float m_hat = m.data[e] / c1;
            float v_hat = v.data[e] / c2;
            float n_hat = n.data[e] / c3;
            float upd = cfg.lr * (m_hat + (1.0f - cfg.beta2) * v_hat) / (std::sqrt(n_hat) + cfg.eps);
            p.data[e] = (p.data[e] - upd) / decay_div;
        }
        state.g_prev[i] = g;
    }
}

EmaState ema_init(const ParameterStore& params, float decay) {
    EmaState ema;
    ema.decay = decay;
    for (const auto& [name, p] : params.items) ema.shadow.push_back(p);
    return ema;
}

void ema_update(EmaState& ema, const ParameterStore& params) {
    if (ema.shadow.size() != params.items.size())
        throw std::invalid_argument("ema_update: shadow count mismatch");
    for (size_t i = 0; i < ema.shadow.size(); ++i) {
        const Tensor& p = params.items[i].second;
        Tensor& s = ema.shadow[i];
        for (int64_t e = 0; e < s.size(); ++e)
            s.data[e] = ema.decay * s.data[e] + (1.0f - ema.decay) * p.data[e];
    }
}

ParameterStore ema_params(const EmaState& ema, const ParameterStore& params) {
    ParameterStore out;
    for (size_t i = 0; i < params.items.size(); ++i) out.add(params.items[i].first, ema.shadow[i]);
    return out;
}

SampleNodes build_sample_loss(Graph& g, const Model& model, const Skeleton& skel,
                              const DatasetRecord& sample, Rng& rng, const TrainOptions& opts) {
    const Tensor& x = sample.motion.channels;
    int T = x.rows();
    Tensor eps = rng.normal_tensor(x.shape);
    auto [r, t] = sample_times(rng, opts.p_equal);
    float t1 = static_cast<float>(rng.uniform());
    int genre = sample.music.genre;
    if (opts.cfg_dropout > 0.0f && rng.uniform() < opts.cfg_dropout) genre = model.cfg.genre_count;

    auto music = g.constant(sample.music.features);
    auto cond = model.cond_stack(g, music, genre, T);

    Tensor z_t = flow_path(x, eps, t);
    Tensor v = instantaneous_velocity(x, eps);
    FdTangent fd;
    if (opts.fd_tangent) {
        fd.music = sample.music.features;
        fd.genre = genre;
    }
    MfTarget mf = meanflow_target(g, model, cond, z_t, r, t, v, opts.fd_tangent ? &fd : nullptr);

    SampleNodes out;
    out.mf = g.mse(mf.u, g.constant(mf.u_tgt));
    PccNodes pcc = pcc_losses(g, model, cond, x, eps, t1, skel);
    out.rec = pcc.rec;
    out.pos = pcc.pos;
    out.vel = pcc.vel;
    const LossWeights& w = opts.weights;
    out.total = g.add(g.scale(out.mf, w.mf),
                      g.add(g.scale(out.rec, w.rec),
                            g.add(g.scale(out.pos, w.pos), g.scale(out.vel, w.vel))));
    if (w.fcl > 0.0f) {
        Tensor contacts = foot_contact_labels(fk_positions(x, skel), skel, static_cast<float>(kFps));
        out.fcl = fcl_loss(g, pcc.z0_hat, contacts, skel);
        out.total = g.add(out.total, g.scale(out.fcl, w.fcl));
    } else {
        out.fcl = g.constant(Tensor::scalar(0.0f));
    }
    return out;
}

namespace {

struct SampleResult {
    StepLosses losses;
    std::vector<Tensor> grads;
};

SampleResult run_sample(const Model& model, const Skeleton& skel, const DatasetRecord& sample,
                        uint64_t seed, const TrainOptions& opts) {
    Graph g;
    Rng rng(seed);
    SampleNodes nodes = build_sample_loss(g, model, skel, sample, rng, opts);
    g.backward(nodes.total);
    SampleResult res;
    res.losses.mf = g.val(nodes.mf).data[0];
    res.losses.rec = g.val(nodes.rec).data[0];
    res.losses.pos = g.val(nodes.pos).data[0];
    res.losses.vel = g.val(nodes.vel).data[0];
    res.losses.fcl = g.val(nodes.fcl).data[0];
    res.losses.total = g.val(nodes.total).data[0];
    res.grads.reserve(model.params.items.size());
    for (const auto& [name, p] : model.params.items) res.grads.push_back(g.grad_of(p));
    return res;
}

}  // namespace

StepLosses train_step(Model& model, const Skeleton& skel, const std::vector<DatasetRecord>& batch,
                      int step_index, AdanState& opt, EmaState& ema, const TrainOptions& opts) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    int n = static_cast<int>(batch.size());
    std::vector<SampleResult> results(n);
    auto seed_for = [&](int i) {
        return derive_seed(opts.seed, 0x7A00u + static_cast<uint64_t>(step_index), i);
    };
    int workers = std::max(1, std::min(opts.threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) results[i] = run_sample(model, skel, batch[i], seed_for(i), opts);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (int i = w; i < n; i += workers)
                    results[i] = run_sample(model, skel, batch[i], seed_for(i), opts);
            });
        for (auto& th : pool) th.join();
    }

    // ordered reduction keeps results independent of scheduling
    StepLosses mean;
    std::vector<Tensor> grads;
    for (const auto& [name, p] : model.params.items) grads.push_back(Tensor::zeros(p.shape));
    float inv = 1.0f / static_cast<float>(n);
    for (int i = 0; i < n; ++i) {
        mean.mf += results[i].losses.mf * inv;
        mean.rec += results[i].losses.rec * inv;
        mean.pos += results[i].losses.pos * inv;
        mean.vel += results[i].losses.vel * inv;
        mean.fcl += results[i].losses.fcl * inv;
        mean.total += results[i].losses.total * inv;
        for (size_t j = 0; j < grads.size(); ++j) axpy(grads[j], inv, results[i].grads[j]);
    }
    if (!std::isfinite(mean.total))
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step_index) +
                                 " (mf=" + std::to_string(mean.mf) + ", rec=" + std::to_string(mean.rec) +
                                 ", pos=" + std::to_string(mean.pos) + ", vel=" + std::to_string(mean.vel) + ")");
    adan_step(model.params, grads, opt, opts.adan);
    ema_update(ema, model.params);
    return mean;
}

std::vector<StepLosses> train_loop(Model& model, const Skeleton& skel,
                                   const std::vector<DatasetRecord>& data, const TrainOptions& opts,
                                   AdanState& opt, EmaState& ema, std::ostream* log) {
    if (data.empty()) throw std::invalid_argument("train_loop: empty dataset");
    std::vector<StepLosses> curve;
    curve.reserve(opts.steps);
    for (int step = opts.start_step; step < opts.steps; ++step) {
        Rng pick(derive_seed(opts.seed, 0x5E1Cu, step));
        std::vector<DatasetRecord> batch;
        batch.reserve(opts.batch);
        for (int i = 0; i < opts.batch; ++i)
            batch.push_back(data[static_cast<size_t>(pick.bits() % data.size())]);
        StepLosses l = train_step(model, skel, batch, step, opt, ema, opts);
        curve.push_back(l);
        if (log && (step % opts.log_interval == 0 || step + 1 == opts.steps)) {
            (*log) << "step=" << step << " l_mf=" << l.mf << " l_rec=" << l.rec << " l_pos=" << l.pos
                   << " l_vel=" << l.vel;
            if (opts.weights.fcl > 0.0f) (*log) << " l_fcl=" << l.fcl;
            (*log) << " total=" << l.total << "\n";
        }
    }
    return curve;
}

}  // namespace md
