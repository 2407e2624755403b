#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "md/skeleton.hpp"
#include "md/tensor.hpp"

namespace md {

// Music feature channel layout: [MFCC 0-19 | Chroma 20-31 | Peak 32 | Beat 33 | Envelope 34].
inline constexpr int kMusicDim = 35;
inline constexpr int kMfccStart = 0, kMfccDim = 20;
inline constexpr int kChromaStart = 20, kChromaDim = 12;
inline constexpr int kPeakChannel = 32, kBeatChannel = 33, kEnvelopeChannel = 34;
inline constexpr int kFps = 30;
inline constexpr int kNumGenres = 16;

struct MusicSequence {
    Tensor features;  // T x 35
    int genre = 0;
    int frames() const { return features.rows(); }
};

struct MotionSequence {
    Tensor channels;  // T x (3 + 6J)
    int frames() const { return channels.rows(); }
};

struct DatasetRecord {
    MusicSequence music;
    MotionSequence motion;
    std::string id;
};

struct DataError : std::runtime_error {
    enum class Code { magic_mismatch, bad_version, dim_mismatch, truncated, alignment, io };
    Code code;
    DataError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

// Beat grid: frames round(k * fps * 60 / bpm) that fall inside [0, T).
std::vector<int> beat_frames(int T, double bpm, int fps = kFps);

MusicSequence synth_music(int T, double bpm, int genre, uint64_t seed);
MotionSequence synth_motion(const MusicSequence& music, const Skeleton& skel, uint64_t seed);
DatasetRecord synth_record(int T, double bpm, int genre, const Skeleton& skel, uint64_t seed,
                           std::string id);

// Aligned sliding windows; the last partial window is dropped. len > T gives {}.
std::vector<DatasetRecord> window(const DatasetRecord& rec, int len, int stride);

// FDR1 container: magic "FDR1", u32 version, u32 T, u32 music_dim, u32 motion_dim,
// u32 genre, then little-endian f32 music block then motion block (row-major).
void save_record(const DatasetRecord& rec, const std::filesystem::path& path);
DatasetRecord load_record(const std::filesystem::path& path);

// Dataset = directory of .fdr files listed in manifest.txt (one relative path per line).
void generate_dataset(const std::filesystem::path& dir, int n, int T, const Skeleton& skel, uint64_t seed);
std::vector<std::string> read_manifest(const std::filesystem::path& dir);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& dir);

}  // namespace md
