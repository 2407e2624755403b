#include "md/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "md/kernels.hpp"
#include <fstream>
#include <sstream>

namespace md {

Tensor kinetic_features(const Tensor& motion, const Skeleton& skel, float fps) {
    int T = motion.rows(), J = skel.joints;
    if (T < 2) throw std::invalid_argument("kinetic_features: need at least 2 frames");
    Tensor pos = fk_positions(motion, skel);
    Tensor feat = Tensor::zeros({2 * J});
    // raw frame differences (not the padded frame_velocities) so means are
    // taken over exactly the defined intervals
    auto vel = [&](int t, int j, int c) {
        return fps * (pos(t + 1, 3 * j + c) - pos(t, 3 * j + c));
    };
    for (int j = 0; j < J; ++j) {
        double vacc = 0.0;
        for (int t = 0; t < T - 1; ++t) {
            double sq = 0.0;
            for (int c = 0; c < 3; ++c) {
                double v = vel(t, j, c);
                sq += v * v;
            }
            vacc += sq;
        }
        feat.data[j] = static_cast<float>(vacc / (T - 1));
        if (T >= 3) {
            double aacc = 0.0;
            for (int t = 0; t < T - 2; ++t) {
                double sq = 0.0;
                for (int c = 0; c < 3; ++c) {
                    double a = fps * (vel(t + 1, j, c) - vel(t, j, c));
                    sq += a * a;
                }
                aacc += sq;
            }
            feat.data[J + j] = static_cast<float>(aacc / (T - 2));
        }
    }
    return feat;
}

namespace {

// Rest-pose world positions: identity rotations, root raised to rest height.
Tensor rest_positions(const Skeleton& skel) {
    Tensor motion = Tensor::zeros({1, skel.motion_dim()});
    motion(0, 1) = skel.rest_root_height;
    for (int j = 0; j < skel.joints; ++j) {
        motion(0, 3 + 6 * j + 0) = 1.0f;
        motion(0, 3 + 6 * j + 4) = 1.0f;
    }
    return fk_positions(motion, skel);
}

}  // namespace

Tensor geometric_features(const Tensor& motion, const Skeleton& skel) {
    int T = motion.rows();
    int nf = static_cast<int>(skel.foot_joints.size());
    Tensor pos = fk_positions(motion, skel);
    Tensor feat = Tensor::zeros({nf + 4});
    auto p = [&](int t, int j, int c) { return pos(t, 3 * j + c); };

    float rest_cross = 0.0f;
    if (nf >= 2) {
        Tensor rest = rest_positions(skel);
        rest_cross = rest(0, 3 * skel.foot_joints[0] + 0) - rest(0, 3 * skel.foot_joints[1] + 0);
    }
    const float kContact = 0.05f, kHandsClose = 0.3f;
    const float kLeanCos = std::cos(30.0f * 3.14159265358979f / 180.0f);

    for (int t = 0; t < T; ++t) {
        for (int f = 0; f < nf; ++f)
            if (p(t, skel.foot_joints[f], 1) - skel.ground_height < kContact) feat.data[f] += 1.0f;
        if (skel.hand_joints.size() >= 2) {
            int h0 = skel.hand_joints[0], h1 = skel.hand_joints[1];
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                double d = p(t, h0, c) - p(t, h1, c);
                d2 += d * d;
            }
            if (std::sqrt(d2) < kHandsClose) feat.data[nf + 0] += 1.0f;
            if (skel.head_joint >= 0 &&
                (p(t, h0, 1) > p(t, skel.head_joint, 1) || p(t, h1, 1) > p(t, skel.head_joint, 1)))
                feat.data[nf + 1] += 1.0f;
        }
        if (nf >= 2) {
            float cross = p(t, skel.foot_joints[0], 0) - p(t, skel.foot_joints[1], 0);
            if (rest_cross != 0.0f && cross * rest_cross < 0.0f) feat.data[nf + 2] += 1.0f;
        }
        if (skel.head_joint >= 0) {
            float dx = p(t, skel.head_joint, 0) - p(t, 0, 0);
            float dy = p(t, skel.head_joint, 1) - p(t, 0, 1);
            float dz = p(t, skel.head_joint, 2) - p(t, 0, 2);
            float len = std::sqrt(dx * dx + dy * dy + dz * dz);
            if (len > 1e-6f && dy / len < kLeanCos) feat.data[nf + 3] += 1.0f;
        }
    }
    for (auto& v : feat.data) v /= static_cast<float>(T);
    return feat;
}

FrechetStats feature_stats(const std::vector<Tensor>& features) {
    if (features.size() < 2) throw std::invalid_argument("feature_stats: need at least 2 samples");
    int n = static_cast<int>(features.size());
    int d = static_cast<int>(features[0].size());
    FrechetStats s;
    s.mu = Tensor::zeros({d});
    for (const Tensor& f : features) {
        if (f.size() != d) throw std::invalid_argument("feature_stats: feature length mismatch");
        axpy(s.mu, 1.0f, f);
    }
    for (auto& v : s.mu.data) v /= static_cast<float>(n);
    s.cov = Tensor::zeros({d, d});
    for (const Tensor& f : features)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                s.cov(i, j) += (f.data[i] - s.mu.data[i]) * (f.data[j] - s.mu.data[j]);
    for (auto& v : s.cov.data) v /= static_cast<float>(n - 1);  // unbiased
    return s;
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    int d = a.dim();
    if (b.dim() != d || a.cov.rows() != d || b.cov.rows() != d)
        throw std::invalid_argument("frechet_distance: dimension mismatch");
    using Mat = Eigen::MatrixXd;
    Mat sa(d, d), sb(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            sa(i, j) = a.cov(i, j);
            sb(i, j) = b.cov(i, j);
        }
    // symmetrize against accumulation noise
    sa = 0.5 * (sa + sa.transpose());
    sb = 0.5 * (sb + sb.transpose());

    Eigen::SelfAdjointEigenSolver<Mat> ea(sa);
    Mat a_half = ea.eigenvectors() *
                 ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                 ea.eigenvectors().transpose();
    Mat inner = a_half * sb * a_half;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> ei(inner);
    double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mu2 = 0.0;
    for (int i = 0; i < d; ++i) {
        double dm = static_cast<double>(a.mu.data[i]) - b.mu.data[i];
        mu2 += dm * dm;
    }
    // the eigenvalue clamping can leave the trace term a hair above its exact
    // value, so the distance of a population against itself lands slightly
    // below zero; clamp to keep the metric non-negative
    return std::max(0.0, mu2 + sa.trace() + sb.trace() - 2.0 * tr_sqrt);
}

double diversity(const std::vector<Tensor>& features) {
    size_t n = features.size();
    if (n < 2) throw std::invalid_argument("diversity: need at least 2 samples");
    double acc = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (int64_t k = 0; k < features[i].size(); ++k) {
                double d = static_cast<double>(features[i].data[k]) - features[j].data[k];
                d2 += d * d;
            }
            acc += std::sqrt(d2);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

Tensor joint_speed_curve(const Tensor& motion, const Skeleton& skel, float fps) {
    int T = motion.rows(), J = skel.joints;
    if (T < 2) throw std::invalid_argument("joint_speed_curve: need at least 2 frames");
    Tensor pos = fk_positions(motion, skel);
    Tensor speed = Tensor::zeros({T - 1});
    for (int t = 0; t < T - 1; ++t) {
        double acc = 0.0;
        for (int j = 0; j < J; ++j) {
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                double d = fps * (pos(t + 1, 3 * j + c) - pos(t, 3 * j + c));
                d2 += d * d;
            }
            acc += std::sqrt(d2);
        }
        speed.data[t] = static_cast<float>(acc / J);
    }
    return speed;
}

std::vector<int> kinematic_beats(const Tensor& motion, const Skeleton& skel, float fps) {
    Tensor s = joint_speed_curve(motion, skel, fps);
    std::vector<int> beats;
    for (int t = 1; t + 1 < static_cast<int>(s.size()); ++t)
        if (s.data[t] < s.data[t - 1] && s.data[t] < s.data[t + 1]) beats.push_back(t);
    return beats;
}

double beat_align_score(const Tensor& motion, const Tensor& music_features, const Skeleton& skel,
                        float sigma, float fps) {
    if (sigma <= 0.0f) throw std::invalid_argument("beat_align_score: sigma must be positive");
    if (music_features.cols() <= kBeatChannel)
        throw std::invalid_argument("beat_align_score: no beat channel in music features");
    std::vector<int> music_beats;
    for (int t = 0; t < music_features.rows(); ++t)
        if (music_features(t, kBeatChannel) > 0.5f) music_beats.push_back(t);
    if (music_beats.empty()) throw std::invalid_argument("beat_align_score: music has no beats");
    std::vector<int> kin = kinematic_beats(motion, skel, fps);
    if (kin.empty()) return 0.0;
    double acc = 0.0;
    for (int b : music_beats) {
        double best = std::numeric_limits<double>::max();
        for (int d : kin) best = std::min(best, static_cast<double>(b - d) * (b - d));
        acc += std::exp(-best / (2.0 * sigma * sigma));
    }
    return acc / static_cast<double>(music_beats.size());
}

double foot_slide_ratio(const Tensor& motion, const Skeleton& skel, float h_thresh,
                        float v_thresh_slide, float fps) {
    if (skel.foot_joints.empty())
        throw std::invalid_argument("foot_slide_ratio: skeleton has no foot joints");
    int T = motion.rows();
    Tensor pos = fk_positions(motion, skel);
    int64_t contacts = 0, slides = 0;
    for (int t = 0; t < T - 1; ++t)
        for (int f : skel.foot_joints) {
            if (pos(t, 3 * f + 1) - skel.ground_height >= h_thresh) continue;
            ++contacts;
            float dx = fps * (pos(t + 1, 3 * f + 0) - pos(t, 3 * f + 0));
            float dz = fps * (pos(t + 1, 3 * f + 2) - pos(t, 3 * f + 2));
            if (std::sqrt(dx * dx + dz * dz) > v_thresh_slide) ++slides;
        }
    if (contacts == 0) return 0.0;
    return static_cast<double>(slides) / static_cast<double>(contacts);
}

std::string EvalReport::text() const {
    std::ostringstream os;
    os << "fid_k = " << fid_k << "\n"
       << "fid_g = " << fid_g << "\n"
       << "div_k = " << div_k << "\n"
       << "div_g = " << div_g << "\n"
       << "fsr = " << fsr << "\n"
       << "bas = " << bas << "\n";
    return os.str();
}

EvalReport evaluate(const std::vector<DatasetRecord>& gen, const std::vector<DatasetRecord>& ref,
                    const Skeleton& skel) {
    if (gen.empty() || ref.empty()) throw std::invalid_argument("evaluate: empty population");
    auto extract = [&](const std::vector<DatasetRecord>& recs, bool kinetic) {
        std::vector<Tensor> out;
        out.reserve(recs.size());
        for (const auto& r : recs)
            out.push_back(kinetic ? kinetic_features(r.motion.channels, skel)
                                  : geometric_features(r.motion.channels, skel));
        return out;
    };
    std::vector<Tensor> gk = extract(gen, true), gg = extract(gen, false);
    std::vector<Tensor> rk = extract(ref, true), rg = extract(ref, false);
    EvalReport rep;
    rep.fid_k = frechet_distance(feature_stats(gk), feature_stats(rk));
    rep.fid_g = frechet_distance(feature_stats(gg), feature_stats(rg));
    rep.div_k = diversity(gk);
    rep.div_g = diversity(gg);
    double fsr = 0.0, bas = 0.0;
    for (const auto& r : gen) {
        fsr += foot_slide_ratio(r.motion.channels, skel);
        bas += beat_align_score(r.motion.channels, r.music.features, skel);
    }
    rep.fsr = fsr / static_cast<double>(gen.size());
    rep.bas = bas / static_cast<double>(gen.size());
    return rep;
}

EvalReport evaluate_dirs(const std::filesystem::path& gen_dir, const std::filesystem::path& ref_dir,
                         const Skeleton& skel,
                         const std::optional<std::filesystem::path>& csv_path) {
    std::vector<DatasetRecord> gen = load_dataset(gen_dir);
    std::vector<DatasetRecord> ref = load_dataset(ref_dir);
    EvalReport rep = evaluate(gen, ref, skel);
    if (csv_path) {
        std::ofstream csv(*csv_path);
        if (!csv) throw DataError(DataError::Code::io, "cannot write " + csv_path->string());
        csv << "id,fsr,bas\n";
        for (const auto& r : gen)
            csv << r.id << "," << foot_slide_ratio(r.motion.channels, skel) << ","
                << beat_align_score(r.motion.channels, r.music.features, skel) << "\n";
    }
    return rep;
}

}  // namespace md
