#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "md/data.hpp"
#include "md/model.hpp"

namespace md {

enum class Solver { euler, midpoint, heun };

// Throws std::invalid_argument listing the valid names.
Solver parse_solver(const std::string& name);
std::string solver_name(Solver s);

struct SampleConfig {
    int steps = 20;
    Solver solver = Solver::euler;
    uint64_t seed = 0;
    std::optional<float> guidance;  // classifier-free guidance weight; unset = off
    bool edit_fresh_noise = false;  // noise constraints with fresh eps instead of the trajectory's
};

// Velocity field u(z, r, t). Model-backed fields evaluate the network; tests
// substitute analytic oracles.
using VelocityField = std::function<Tensor(const Tensor& z, float r, float t)>;

// omega * u_cond + (1 - omega) * u_uncond.
Tensor cfg_field(const Tensor& u_cond, const Tensor& u_uncond, float omega);

struct EditSpec {
    Tensor constraint;  // T x motion_dim
    Tensor mask;        // T x motion_dim, binary
    bool hard = false;
    bool empty() const { return mask.empty(); }
    void validate() const;  // binary mask, finite constraint on masked entries
};

// Constraint blending before a solver step at time t:
//   soft: (t*M) . FP(x', t) + (1 - t*M) . z      (time-decayed)
//   hard: M . FP(x', t) + (1 - M) . z
// with FP(x', t) = (1 - t) x' + t eps.
Tensor apply_edit_mask(const Tensor& z_t, float t, const EditSpec& edit, const Tensor& eps);

// Integrate the field from z(1) = eps down to t = 0 over a uniform grid.
// Euler uses the interval mean velocity u(z, r, t); midpoint and heun use the
// r = t diagonal as the instantaneous-velocity estimate. If edit is non-null,
// apply_edit_mask runs before every solver step (using edit_eps as the
// constraint noise). Throws std::runtime_error naming the step index if the
// state goes non-finite.
Tensor sample_field(const VelocityField& u, const Tensor& eps, int steps, Solver solver,
                    const EditSpec* edit = nullptr, const Tensor* edit_eps = nullptr);

// Model-backed field for one piece of music; honours cfg.guidance (null
// condition = zero music features + the reserved null-genre embedding).
VelocityField model_field(const Model& model, const Tensor& music, int genre,
                          const SampleConfig& cfg);

MotionSequence generate(const Model& model, const MusicSequence& music, const SampleConfig& cfg);
MotionSequence edit_sample(const Model& model, const MusicSequence& music, const SampleConfig& cfg,
                           const EditSpec& edit);

// ---- Edit-spec construction ------------------------------------------------

// Channel groups for masks: "root" (translation), "upper"/"lower" (6d rotation
// blocks of the skeleton's joint groups), "all".
void mask_add_region(Tensor& mask, const Skeleton& skel, int start, int end,
                     const std::string& group);

// Structured text format, one directive per line ('#' comments):
//   mode soft|hard
//   constraint <path to .fdr record>        (its motion block is x')
//   [frames A:B[,C:D...]] channels <group>  (end-exclusive; no frames = whole clip)
// Paths are resolved relative to base_dir.
EditSpec parse_edit_spec(const std::string& text, const Skeleton& skel, int frames,
                         const std::filesystem::path& base_dir = ".");

// Frames where any channel's mask value changes between f-1 and f.
std::vector<int> mask_edge_frames(const Tensor& mask);

// Max over edge frames of the L2 jump in FK frame velocity:
// max_f || v_f - v_{f-1} ||_2 over all position channels.
float boundary_jerk(const Tensor& motion, const Skeleton& skel, const std::vector<int>& edges,
                    float fps = static_cast<float>(kFps));

}  // namespace md
