#pragma once

#include <array>
#include <string>
#include <vector>

#include "md/tensor.hpp"

namespace md {

// Kinematic tree. Parent indices must precede children (joint 0 is the root).
// Convention: y-up, meters; motion channels = [root translation (3) | 6d rotation per joint].
struct Skeleton {
    std::string name;
    int joints = 0;
    std::vector<int> parent;                    // -1 for root
    std::vector<std::array<float, 3>> offset;   // in parent frame
    std::vector<int> foot_joints;
    std::vector<int> hand_joints;
    int head_joint = -1;
    float ground_height = 0.0f;
    float rest_root_height = 0.0f;
    std::vector<int> upper_joints;
    std::vector<int> lower_joints;

    int motion_dim() const { return 3 + 6 * joints; }
    void validate() const;

    static Skeleton preset(const std::string& name);  // "toy8" | "smpl24"
};

// Gram-Schmidt 6d -> rotation matrix (row-major, columns are the basis vectors).
// Throws std::domain_error on degenerate input; frame/joint are used in the message.
std::array<float, 9> rot6d_to_matrix(const float* r6, int frame = -1, int joint = -1);

// First two columns of R flattened to 6 values.
std::array<float, 6> matrix_to_rot6d(const std::array<float, 9>& r);

// World joint positions. motion: T x (3 + 6J) -> T x 3J.
Tensor fk_positions(const Tensor& motion, const Skeleton& skel);

// VJP of fk_positions: gpos (T x 3J) -> gradient w.r.t. motion channels.
Tensor fk_positions_back(const Tensor& motion, const Skeleton& skel, const Tensor& gpos);

// Forward-mode pair: returns positions and their directional derivative.
std::pair<Tensor, Tensor> fk_positions_jvp(const Tensor& motion, const Tensor& dmotion, const Skeleton& skel);

// Forward differences scaled by fps; the last row repeats the previous difference.
Tensor frame_velocities(const Tensor& pos, float fps);

// contact <=> height - ground < h_thresh and speed < v_thresh. Result: T x |foot_joints| in {0,1}.
Tensor foot_contact_labels(const Tensor& pos, const Skeleton& skel, float fps, float h_thresh = 0.05f,
                           float v_thresh = 0.15f);

}  // namespace md
