#pragma once

#include <filesystem>
#include <string>

#include "md/sampler.hpp"
#include "md/train.hpp"

namespace md {

// Everything a run needs, loadable from a JSON file. The JSON schema mirrors
// the nested structure below; every key is optional (defaults apply) but
// unknown keys are rejected at every level. motion_dim / music_dim are derived
// from the skeleton preset and the fixed music layout, never read from JSON.
struct RunConfig {
    std::string skeleton = "toy8";
    std::string data_dir;
    uint64_t seed = 0;
    NetworkConfig network;   // motion_dim filled from the skeleton
    TrainOptions train;      // carries LossWeights + AdanConfig + seed
    SampleConfig sample;
    int window_frames = 0;   // > 0: slide non-overlapping training windows

    // Supplementary-scale settings: latent 512, 4/8 layers, batch 128.
    void apply_paper_scale();

    void validate() const;   // throws std::invalid_argument naming the field

    std::string to_json_text() const;
    static RunConfig from_json_text(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

}  // namespace md
