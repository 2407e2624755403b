#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "md/data.hpp"
#include "md/skeleton.hpp"

namespace md {

// Feature extractors. The paper names the kinetic/geometric extractors but
// never defines them, so the definitions here are fixed and documented;
// absolute values are comparable only within this artifact.

// 2J-dim: per joint, mean squared FK velocity magnitude over frames, then per
// joint mean squared acceleration magnitude. Requires T >= 2.
Tensor kinetic_features(const Tensor& motion, const Skeleton& skel, float fps = kFps);

// Time-averages of boolean relational tests, fixed order:
//   [per-foot ground contact (|feet| values), hands-close (< 0.3 m),
//    hand-above-head, feet crossed (x-order reversed vs rest pose),
//    torso lean > 30 deg]
Tensor geometric_features(const Tensor& motion, const Skeleton& skel);

struct FrechetStats {
    Tensor mu;   // D
    Tensor cov;  // D x D, symmetric
    int dim() const { return static_cast<int>(mu.size()); }
};

// Sample mean and unbiased covariance of a feature population (n >= 2).
FrechetStats feature_stats(const std::vector<Tensor>& features);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the matrix square root
// uses a symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2} with eigenvalues
// clamped at zero (guards small-sample covariance noise).
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

// Mean pairwise Euclidean distance over unordered pairs (n >= 2).
double diversity(const std::vector<Tensor>& features);

// Mean joint-speed curve from FK positions; one value per frame interval.
Tensor joint_speed_curve(const Tensor& motion, const Skeleton& skel, float fps = kFps);

// Strict 3-frame local minima of the speed curve.
std::vector<int> kinematic_beats(const Tensor& motion, const Skeleton& skel, float fps = kFps);

// Mean over music-beat frames b of exp(-min_d |b-d|^2 / (2 sigma^2)) with d
// over kinematic beats; 0 when there are no kinematic beats. Throws when the
// music has no beat frames.
double beat_align_score(const Tensor& motion, const Tensor& music_features, const Skeleton& skel,
                        float sigma = 3.0f, float fps = kFps);

// (#contact frame/foot pairs with horizontal speed > v_thresh) / (#contact
// pairs); contact = foot height above ground < h_thresh. 0 when no contacts.
double foot_slide_ratio(const Tensor& motion, const Skeleton& skel, float h_thresh = 0.05f,
                        float v_thresh_slide = 0.10f, float fps = kFps);

struct EvalReport {
    double fid_k = 0, fid_g = 0, div_k = 0, div_g = 0, fsr = 0, bas = 0;
    std::string text() const;  // "key = value" lines
};

// FID between generated and reference populations; DIV/FSR/BAS over the
// generated one. BAS uses each record's own music.
EvalReport evaluate(const std::vector<DatasetRecord>& gen, const std::vector<DatasetRecord>& ref,
                    const Skeleton& skel);

// Directory form: records listed via each directory's manifest (deterministic
// order). Optionally writes a per-sequence CSV for the generated population.
EvalReport evaluate_dirs(const std::filesystem::path& gen_dir, const std::filesystem::path& ref_dir,
                         const Skeleton& skel,
                         const std::optional<std::filesystem::path>& csv_path = std::nullopt);

}  // namespace md
