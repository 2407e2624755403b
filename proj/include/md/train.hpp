#pragma once

#include <iosfwd>
#include <optional>

#include "md/data.hpp"
#include "md/model.hpp"

namespace md {

// Straight-line flow path FP(x, t) = (1-t) x + t eps.
Tensor flow_path(const Tensor& x, const Tensor& eps, float t);

// Conditional instantaneous velocity v = eps - x (constant along the path).
Tensor instantaneous_velocity(const Tensor& x, const Tensor& eps);

// (r, t): with probability p_equal a single uniform draw gives r = t, else
// two draws with t = max, r = min.
std::pair<float, float> sample_times(Rng& rng, float p_equal);

struct LossWeights {
    float mf = 1.0f;
    float rec = 0.636f;
    float pos = 0.636f;
    float vel = 0.323f;
    float fcl = 0.0f;
};

// Finite-difference fallback for the directional derivative in the MeanFlow
// target, replacing the analytic JVP (used for cross-validation).
struct FdTangent {
    Tensor music;
    int genre = 0;
    float h = 1e-3f;
};

// u_theta at (z_t, r, t) on the tape plus the detached target
// u_tgt = v - (t-r) * d/ds u_theta(z_t + s v, r, t + s)|_{s=0}.
struct MfTarget {
    Graph::V u;
    Tensor u_tgt;
};
MfTarget meanflow_target(Graph& g, const Model& model, Graph::V cond, const Tensor& z_t, float r,
                         float t, const Tensor& v, const FdTangent* fd = nullptr);

// Physical consistency: z0_hat = z_t1 - t1 * u_theta(z_t1, 0, t1) and the
// reconstruction / FK-position / FK-velocity MSEs against the clean motion.
struct PccNodes {
    Graph::V z0_hat;
    Graph::V rec;
    Graph::V pos;
    Graph::V vel;
};
PccNodes pcc_losses(Graph& g, const Model& model, Graph::V cond, const Tensor& x, const Tensor& eps,
                    float t1, const Skeleton& skel, float fps = static_cast<float>(kFps));

// Mean squared foot-joint velocity of FK(z0_hat) over ground-truth contact
// frames; 0 when no frame is in contact.
Graph::V fcl_loss(Graph& g, Graph::V z0_hat, const Tensor& gt_contacts, const Skeleton& skel,
                  float fps = static_cast<float>(kFps));

struct AdanConfig {
    float lr = 4e-4f;
    float weight_decay = 0.02f;
    float beta1 = 0.02f;
    float beta2 = 0.08f;
    float beta3 = 0.01f;
    float eps = 1e-8f;
};

struct AdanState {
    std::vector<Tensor> m, v, n, g_prev;
    int64_t step = 0;
};

// Adan update (one step, k = state.step after increment):
//   m_k = (1-b1) m + b1 g
//   v_k = (1-b2) v + b2 (g - g_prev)          (g_prev = g on the first step)
//   n_k = (1-b3) n + b3 (g + (1-b2)(g - g_prev))^2
//   hat_x = x_k / (1 - (1-b_i)^k)
//   theta = (theta - lr (m_hat + (1-b2) v_hat) / (sqrt(n_hat) + eps)) / (1 + lr wd)
void adan_step(ParameterStore& params, const std::vector<Tensor>& grads, AdanState& state,
               const AdanConfig& cfg);

struct EmaState {
    std::vector<Tensor> shadow;
    float decay = 0.9999f;
};
EmaState ema_init(const ParameterStore& params, float decay);
void ema_update(EmaState& ema, const ParameterStore& params);
// Parameter store with EMA weights substituted in.
ParameterStore ema_params(const EmaState& ema, const ParameterStore& params);

struct StepLosses {
    float mf = 0, rec = 0, pos = 0, vel = 0, fcl = 0, total = 0;
};

struct TrainOptions {
    int steps = 2000;       // global step budget (end index)
    int start_step = 0;     // first step index; nonzero when resuming
    int batch = 16;
    LossWeights weights;
    float p_equal = 0.25f;
    float cfg_dropout = 0.0f;
    AdanConfig adan;
    float ema_decay = 0.9999f;
    uint64_t seed = 0;
    int log_interval = 50;
    int threads = 1;
    bool fd_tangent = false;
};

// Per-sample loss graph; exposed for tests. Returns the component nodes.
struct SampleNodes {
    Graph::V mf, rec, pos, vel, fcl, total;
};
SampleNodes build_sample_loss(Graph& g, const Model& model, const Skeleton& skel,
                              const DatasetRecord& sample, Rng& rng, const TrainOptions& opts);

// One optimizer step over a batch; accumulates mean gradients sequentially
// (or with a deterministic ordered reduction when opts.threads > 1).
StepLosses train_step(Model& model, const Skeleton& skel, const std::vector<DatasetRecord>& batch,
                      int step_index, AdanState& opt, EmaState& ema, const TrainOptions& opts);

std::vector<StepLosses> train_loop(Model& model, const Skeleton& skel,
                                   const std::vector<DatasetRecord>& data, const TrainOptions& opts,
                                   AdanState& opt, EmaState& ema, std::ostream* log);

}  // namespace md
