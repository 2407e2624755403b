#include "md/skeleton.hpp"

#include <cmath>
#include <stdexcept>

namespace md {

void Skeleton::validate() const {
    if (joints < 1 || static_cast<int>(parent.size()) != joints || static_cast<int>(offset.size()) != joints)
        throw std::invalid_argument("skeleton: inconsistent joint arrays");
    if (parent[0] != -1) throw std::invalid_argument("skeleton: joint 0 must be the root");
    for (int j = 1; j < joints; ++j)
        if (parent[j] < 0 || parent[j] >= j)
            throw std::invalid_argument("skeleton: parents must precede children");
    for (int f : foot_joints)
        if (f < 0 || f >= joints) throw std::invalid_argument("skeleton: foot joint out of range");
    for (const auto& o : offset)
        for (float v : o)
            if (!std::isfinite(v)) throw std::invalid_argument("skeleton: non-finite offset");
}

Skeleton Skeleton::preset(const std::string& name) {
    Skeleton s;
    s.name = name;
    if (name == "toy8") {
        s.joints = 8;
        s.parent = {-1, 0, 1, 2, 2, 2, 0, 0};
        s.offset = {{0, 0, 0},          {0, 0.25f, 0},       {0, 0.25f, 0},       {0, 0.30f, 0},
                    {0.45f, 0.05f, 0},  {-0.45f, 0.05f, 0},  {0.15f, -0.90f, 0},  {-0.15f, -0.90f, 0}};
        s.foot_joints = {6, 7};
        s.hand_joints = {4, 5};
        s.head_joint = 3;
        s.rest_root_height = 0.90f;
        s.upper_joints = {1, 2, 3, 4, 5};
        s.lower_joints = {6, 7};
    } else if (name == "smpl24") {
        s.joints = 24;
        s.parent = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
        s.offset = {{0, 0, 0},
                    {0.09f, -0.07f, 0},   {-0.09f, -0.07f, 0},  {0, 0.11f, 0},
                    {0, -0.38f, 0},       {0, -0.38f, 0},       {0, 0.13f, 0},
                    {0, -0.40f, 0},       {0, -0.40f, 0},       {0, 0.05f, 0},
                    {0, -0.06f, 0.12f},   {0, -0.06f, 0.12f},   {0, 0.21f, 0},
                    {0.08f, 0.11f, 0},    {-0.08f, 0.11f, 0},   {0, 0.09f, 0},
                    {0.09f, 0.02f, 0},    {-0.09f, 0.02f, 0},   {0.26f, 0, 0},
                    {-0.26f, 0, 0},       {0.25f, 0, 0},        {-0.25f, 0, 0},
                    {0.08f, 0, 0},        {-0.08f, 0, 0}};
        s.foot_joints = {10, 11};
        s.hand_joints = {22, 23};
        s.head_joint = 15;
        s.rest_root_height = 0.91f;
        s.upper_joints = {3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23};
        s.lower_joints = {1, 2, 4, 5, 7, 8, 10, 11};
    } else {
        throw std::invalid_argument("unknown skeleton preset: " + name);
    }
    s.validate();
    return s;
}

namespace {

[[noreturn]] void degenerate(int frame, int joint) {
    throw std::domain_error("degenerate 6d rotation at frame " + std::to_string(frame) + ", joint " +
                            std::to_string(joint));
}

struct Vec3 {
    float x = 0, y = 0, z = 0;
};
inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(float s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline float dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

struct Mat3 {
    // row-major
    float m[9] = {0};
    static Mat3 from_cols(Vec3 c0, Vec3 c1, Vec3 c2) {
        Mat3 r;
        r.m[0] = c0.x; r.m[1] = c1.x; r.m[2] = c2.x;
        r.m[3] = c0.y; r.m[4] = c1.y; r.m[5] = c2.y;
        r.m[6] = c0.z; r.m[7] = c1.z; r.m[8] = c2.z;
        return r;
    }
    Vec3 col(int j) const { return {m[j], m[3 + j], m[6 + j]}; }
    Vec3 apply(Vec3 v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Vec3 apply_t(Vec3 v) const {
        return {m[0] * v.x + m[3] * v.y + m[6] * v.z, m[1] * v.x + m[4] * v.y + m[7] * v.z,
                m[2] * v.x + m[5] * v.y + m[8] * v.z};
    }
};
inline Mat3 mul(const Mat3& a, const Mat3& b) {
    Mat3 c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            float acc = 0;
            for (int k = 0; k < 3; ++k) acc += a.m[i * 3 + k] * b.m[k * 3 + j];
            c.m[i * 3 + j] = acc;
        }
    return c;
}
inline Mat3 mul_abt(const Mat3& a, const Mat3& b) {  // A * B^T
    Mat3 c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            float acc = 0;
            for (int k = 0; k < 3; ++k) acc += a.m[i * 3 + k] * b.m[j * 3 + k];
            c.m[i * 3 + j] = acc;
        }
    return c;
}
inline Mat3 mul_atb(const Mat3& a, const Mat3& b) {  // A^T * B
    Mat3 c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            float acc = 0;
            for (int k = 0; k < 3; ++k) acc += a.m[k * 3 + i] * b.m[k * 3 + j];
            c.m[i * 3 + j] = acc;
        }
    return c;
}

struct GsCache {
    Vec3 a1, a2, b1, u2, b2, b3;
    float n1 = 0, n2 = 0, dotv = 0;
};

Mat3 gram_schmidt(const float* r6, GsCache* gc, int frame, int joint) {
    Vec3 a1{r6[0], r6[1], r6[2]}, a2{r6[3], r6[4], r6[5]};
    float n1 = std::sqrt(dot(a1, a1));
    if (n1 < 1e-8f) degenerate(frame, joint);
    Vec3 b1 = (1.0f / n1) * a1;
    float dotv = dot(b1, a2);
    Vec3 u2 = a2 - dotv * b1;
    float n2 = std::sqrt(dot(u2, u2));
    if (n2 < 1e-8f) degenerate(frame, joint);
    Vec3 b2 = (1.0f / n2) * u2;
    Vec3 b3 = cross(b1, b2);
    if (gc) *gc = GsCache{a1, a2, b1, u2, b2, b3, n1, n2, dotv};
    return Mat3::from_cols(b1, b2, b3);
}

// VJP of gram_schmidt: gradient of the 3x3 output back to the 6 inputs.
void gram_schmidt_back(const GsCache& g, const Mat3& grad, float* gr6) {
    Vec3 gb1 = grad.col(0), gb2 = grad.col(1), gb3 = grad.col(2);
    gb1 = gb1 + cross(g.b2, gb3);
    gb2 = gb2 + cross(gb3, g.b1);
    Vec3 gu2 = (1.0f / g.n2) * (gb2 - dot(gb2, g.b2) * g.b2);
    Vec3 ga2 = gu2 - dot(g.b1, gu2) * g.b1;
    gb1 = gb1 - dot(g.b1, gu2) * g.a2 - g.dotv * gu2;
    Vec3 ga1 = (1.0f / g.n1) * (gb1 - dot(gb1, g.b1) * g.b1);
    gr6[0] += ga1.x; gr6[1] += ga1.y; gr6[2] += ga1.z;
    gr6[3] += ga2.x; gr6[4] += ga2.y; gr6[5] += ga2.z;
}

}  // namespace

std::array<float, 9> rot6d_to_matrix(const float* r6, int frame, int joint) {
    Mat3 r = gram_schmidt(r6, nullptr, frame, joint);
    std::array<float, 9> out;
    std::copy(r.m, r.m + 9, out.begin());
    return out;
}

std::array<float, 6> matrix_to_rot6d(const std::array<float, 9>& r) {
    return {r[0], r[3], r[6], r[1], r[4], r[7]};
}

Tensor fk_positions(const Tensor& motion, const Skeleton& skel) {
    int t_len = motion.rows(), nj = skel.joints;
    if (motion.cols() != skel.motion_dim()) throw std::invalid_argument("fk: motion channel count mismatch");
    Tensor pos = Tensor::zeros({t_len, 3 * nj});
    std::vector<Mat3> rw(nj);
    std::vector<Vec3> pw(nj);
    for (int t = 0; t < t_len; ++t) {
        const float* ch = &motion.data[static_cast<size_t>(t) * motion.cols()];
        for (int j = 0; j < nj; ++j) {
            Mat3 rl = gram_schmidt(ch + 3 + 6 * j, nullptr, t, j);
            if (j == 0) {
                rw[0] = rl;
                pw[0] = Vec3{ch[0], ch[1], ch[2]};
            } else {
                int p = skel.parent[j];
                rw[j] = mul(rw[p], rl);
                Vec3 off{skel.offset[j][0], skel.offset[j][1], skel.offset[j][2]};
                pw[j] = pw[p] + rw[p].apply(off);
            }
            float* out = &pos.data[static_cast<size_t>(t) * 3 * nj + 3 * j];
            out[0] = pw[j].x; out[1] = pw[j].y; out[2] = pw[j].z;
        }
    }
    return pos;
}

Tensor fk_positions_back(const Tensor& motion, const Skeleton& skel, const Tensor& gpos) {
    int t_len = motion.rows(), nj = skel.joints;
    if (gpos.rows() != t_len || gpos.cols() != 3 * nj) throw std::invalid_argument("fk_back: gpos shape");
    Tensor gmotion = Tensor::zeros({t_len, motion.cols()});
    std::vector<Mat3> rl(nj), rw(nj);
    std::vector<GsCache> gs(nj);
    for (int t = 0; t < t_len; ++t) {
        const float* ch = &motion.data[static_cast<size_t>(t) * motion.cols()];
        for (int j = 0; j < nj; ++j) {
            rl[j] = gram_schmidt(ch + 3 + 6 * j, &gs[j], t, j);
            rw[j] = j == 0 ? rl[0] : mul(rw[skel.parent[j]], rl[j]);
        }
        std::vector<Vec3> gp(nj);
        std::vector<Mat3> grw(nj);
        const float* gr = &gpos.data[static_cast<size_t>(t) * 3 * nj];
        for (int j = 0; j < nj; ++j) gp[j] = Vec3{gr[3 * j], gr[3 * j + 1], gr[3 * j + 2]};
        float* gm = &gmotion.data[static_cast<size_t>(t) * motion.cols()];
        for (int j = nj - 1; j >= 1; --j) {
            int p = skel.parent[j];
            Vec3 off{skel.offset[j][0], skel.offset[j][1], skel.offset[j][2]};
            gp[p] = gp[p] + gp[j];
            // p_j = p_par + Rw_par off  => gRw_par += gp_j off^T
            for (int r = 0; r < 3; ++r) {
                float gv = r == 0 ? gp[j].x : (r == 1 ? gp[j].y : gp[j].z);
                grw[p].m[r * 3 + 0] += gv * off.x;
                grw[p].m[r * 3 + 1] += gv * off.y;
                grw[p].m[r * 3 + 2] += gv * off.z;
            }
            // Rw_j = Rw_par Rl_j
            Mat3 g_par = mul_abt(grw[j], rl[j]);
            Mat3 g_local = mul_atb(rw[p], grw[j]);
            for (int i = 0; i < 9; ++i) grw[p].m[i] += g_par.m[i];
            gram_schmidt_back(gs[j], g_local, gm + 3 + 6 * j);
        }
        gm[0] += gp[0].x; gm[1] += gp[0].y; gm[2] += gp[0].z;
        gram_schmidt_back(gs[0], grw[0], gm + 3);
    }
    return gmotion;
}

namespace {

// Dual-number FK frame for the forward-mode pair.
struct DualF {
    float v = 0, d = 0;
};
inline DualF operator+(DualF a, DualF b) { return {a.v + b.v, a.d + b.d}; }
inline DualF operator-(DualF a, DualF b) { return {a.v - b.v, a.d - b.d}; }
inline DualF operator*(DualF a, DualF b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline DualF operator*(float s, DualF a) { return {s * a.v, s * a.d}; }
inline DualF dsqrt(DualF a) {
    float s = std::sqrt(a.v);
    return {s, a.d / (2.0f * s)};
}
inline DualF dinv(DualF a) { return {1.0f / a.v, -a.d / (a.v * a.v)}; }

}  // namespace

std::pair<Tensor, Tensor> fk_positions_jvp(const Tensor& motion, const Tensor& dmotion, const Skeleton& skel) {
    check_shape(motion, dmotion, "fk_jvp");
    int t_len = motion.rows(), nj = skel.joints;
    Tensor pos = Tensor::zeros({t_len, 3 * nj});
    Tensor dpos = Tensor::zeros({t_len, 3 * nj});
    using V3 = std::array<DualF, 3>;
    auto vdot = [](const V3& a, const V3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; };
    std::vector<std::array<DualF, 9>> rw(nj);
    std::vector<V3> pw(nj);
    for (int t = 0; t < t_len; ++t) {
        const float* ch = &motion.data[static_cast<size_t>(t) * motion.cols()];
        const float* dch = &dmotion.data[static_cast<size_t>(t) * motion.cols()];
        for (int j = 0; j < nj; ++j) {
            const float* r6 = ch + 3 + 6 * j;
            const float* dr6 = dch + 3 + 6 * j;
            V3 a1{DualF{r6[0], dr6[0]}, DualF{r6[1], dr6[1]}, DualF{r6[2], dr6[2]}};
            V3 a2{DualF{r6[3], dr6[3]}, DualF{r6[4], dr6[4]}, DualF{r6[5], dr6[5]}};
            DualF n1 = dsqrt(vdot(a1, a1));
            if (n1.v < 1e-8f) throw std::domain_error("degenerate 6d rotation at frame " + std::to_string(t) +
                                                      ", joint " + std::to_string(j));
            DualF in1 = dinv(n1);
            V3 b1{a1[0] * in1, a1[1] * in1, a1[2] * in1};
            DualF dv = vdot(b1, a2);
            V3 u2{a2[0] - dv * b1[0], a2[1] - dv * b1[1], a2[2] - dv * b1[2]};
            DualF n2 = dsqrt(vdot(u2, u2));
            if (n2.v < 1e-8f) throw std::domain_error("degenerate 6d rotation at frame " + std::to_string(t) +
                                                      ", joint " + std::to_string(j));
            DualF in2 = dinv(n2);
            V3 b2{u2[0] * in2, u2[1] * in2, u2[2] * in2};
            V3 b3{b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]};
            std::array<DualF, 9> rl{b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
            if (j == 0) {
                rw[0] = rl;
                pw[0] = V3{DualF{ch[0], dch[0]}, DualF{ch[1], dch[1]}, DualF{ch[2], dch[2]}};
            } else {
                int p = skel.parent[j];
                std::array<DualF, 9> r;
                for (int i = 0; i < 3; ++i)
                    for (int jj = 0; jj < 3; ++jj) {
                        DualF acc{0, 0};
                        for (int k = 0; k < 3; ++k) acc = acc + rw[p][i * 3 + k] * rl[k * 3 + jj];
                        r[i * 3 + jj] = acc;
                    }
                rw[j] = r;
                const auto& off = skel.offset[j];
                for (int i = 0; i < 3; ++i)
                    pw[j][i] = pw[p][i] + off[0] * rw[p][i * 3] + off[1] * rw[p][i * 3 + 1] +
                               off[2] * rw[p][i * 3 + 2];
            }
            for (int i = 0; i < 3; ++i) {
                pos.data[static_cast<size_t>(t) * 3 * nj + 3 * j + i] = pw[j][i].v;
                dpos.data[static_cast<size_t>(t) * 3 * nj + 3 * j + i] = pw[j][i].d;
            }
        }
    }
    return {std::move(pos), std::move(dpos)};
}

Tensor frame_velocities(const Tensor& pos, float fps) {
    int t_len = pos.rows();
    if (t_len < 2) throw std::invalid_argument("frame_velocities: need at least 2 frames");
    Tensor v = Tensor::zeros({t_len, pos.cols()});
    for (int t = 0; t < t_len - 1; ++t)
        for (int c = 0; c < pos.cols(); ++c) v(t, c) = (pos(t + 1, c) - pos(t, c)) * fps;
    for (int c = 0; c < pos.cols(); ++c) v(t_len - 1, c) = v(t_len - 2, c);
    return v;
}

Tensor foot_contact_labels(const Tensor& pos, const Skeleton& skel, float fps, float h_thresh, float v_thresh) {
    int t_len = pos.rows();
    int nf = static_cast<int>(skel.foot_joints.size());
    Tensor vel = t_len >= 2 ? frame_velocities(pos, fps) : Tensor::zeros({t_len, pos.cols()});
    Tensor out = Tensor::zeros({t_len, nf});
    for (int t = 0; t < t_len; ++t)
        for (int f = 0; f < nf; ++f) {
            int j = skel.foot_joints[f];
            float h = pos(t, 3 * j + 1) - skel.ground_height;
            float vx = vel(t, 3 * j), vy = vel(t, 3 * j + 1), vz = vel(t, 3 * j + 2);
            float speed = std::sqrt(vx * vx + vy * vy + vz * vz);
            out(t, f) = (h < h_thresh && speed < v_thresh) ? 1.0f : 0.0f;
        }
    return out;
}

}  // namespace md
