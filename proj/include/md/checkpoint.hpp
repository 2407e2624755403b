#pragma once

#include <filesystem>
#include <optional>

#include "md/train.hpp"

namespace md {

// FLDN checkpoint container (little-endian, fixed layout):
//   magic "FLDN" | u32 version | network config block (10 x i32) | u64 step |
//   u32 tensor count | per tensor: u32 name length, name bytes, u32 ndim,
//   u32 dims..., f32 data | u8 has_optimizer [u64 opt step + m/v/n/g_prev
//   blocks per parameter, registry order] | u8 has_ema [f32 decay + shadow
//   blocks per parameter]
// Round trips are bit-exact. Loading rebuilds the model from the stored
// config; a tensor-name or shape mismatch against that config's parameter
// registry fails with a diff listing the offending names.
struct CheckpointData {
    Model model;
    int64_t step = 0;
    std::optional<AdanState> opt;
    std::optional<EmaState> ema;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, int64_t step,
                     const AdanState* opt = nullptr, const EmaState* ema = nullptr);
CheckpointData load_checkpoint(const std::filesystem::path& path);

}  // namespace md
