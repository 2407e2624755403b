#include "md/data.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace md {

std::vector<int> beat_frames(int T, double bpm, int fps) {
    std::vector<int> beats;
    if (bpm <= 0) throw std::invalid_argument("beat_frames: bpm must be positive");
    for (int k = 0;; ++k) {
        int f = static_cast<int>(std::lround(k * fps * 60.0 / bpm));
        if (f >= T) break;
        beats.push_back(f);
    }
    return beats;
}

MusicSequence synth_music(int T, double bpm, int genre, uint64_t seed) {
    if (T < 1) throw std::invalid_argument("synth_music: T must be >= 1");
    MusicSequence m;
    m.genre = genre;
    m.features = Tensor::zeros({T, kMusicDim});
    auto beats = beat_frames(T, bpm);

    Rng rng(derive_seed(seed, 0xA0, static_cast<uint64_t>(genre)));
    // band-limited noise: white noise smoothed with a short moving average
    auto smooth_noise = [&rng, T]() {
        std::vector<float> w(T + 4);
        for (auto& v : w) v = static_cast<float>(rng.normal());
        std::vector<float> s(T);
        for (int t = 0; t < T; ++t) {
            float acc = 0;
            for (int k = 0; k < 5; ++k) acc += w[t + k];
            s[t] = acc / 5.0f;
        }
        return s;
    };

    for (int i = 0; i < kMfccDim; ++i) {
        float freq = 0.4f + 0.11f * static_cast<float>((genre * 7 + i) % 11);
        float phase = static_cast<float>(rng.uniform()) * 6.2831853f;
        float amp = 0.6f + 0.4f * static_cast<float>(rng.uniform());
        auto noise = smooth_noise();
        for (int t = 0; t < T; ++t)
            m.features(t, kMfccStart + i) =
                amp * std::sin(6.2831853f * freq * t / kFps + phase) + 0.3f * noise[t];
    }
    for (int i = 0; i < kChromaDim; ++i) {
        float freq = 0.25f + 0.09f * static_cast<float>((genre * 5 + i) % 13);
        float phase = static_cast<float>(rng.uniform()) * 6.2831853f;
        auto noise = smooth_noise();
        for (int t = 0; t < T; ++t)
            m.features(t, kChromaStart + i) =
                0.5f * (1.0f + std::sin(6.2831853f * freq * t / kFps + phase)) + 0.15f * noise[t];
    }

    for (int b : beats) m.features(b, kBeatChannel) = 1.0f;
    // peak: onset marks on beats and midpoints between consecutive beats
    for (int b : beats) m.features(b, kPeakChannel) = 1.0f;
    for (size_t k = 0; k + 1 < beats.size(); ++k) {
        int mid = (beats[k] + beats[k + 1]) / 2;
        if (mid < T) m.features(mid, kPeakChannel) = 1.0f;
    }
    // envelope: decaying pulse after each beat
    float env = 0.0f;
    for (int t = 0; t < T; ++t) {
        if (m.features(t, kBeatChannel) > 0.5f) env = 1.0f;
        m.features(t, kEnvelopeChannel) = env;
        env *= 0.78f;
    }
    return m;
}

namespace {

void write_rot_z(float* r6, float theta) {
    float c = std::cos(theta), s = std::sin(theta);
    r6[0] = c; r6[1] = s; r6[2] = 0;
    r6[3] = -s; r6[4] = c; r6[5] = 0;
}

void write_rot_x(float* r6, float theta) {
    float c = std::cos(theta), s = std::sin(theta);
    r6[0] = 1; r6[1] = 0; r6[2] = 0;
    r6[3] = 0; r6[4] = c; r6[5] = s;
}

}  // namespace

MotionSequence synth_motion(const MusicSequence& music, const Skeleton& skel, uint64_t seed) {
    int T = music.frames();
    MotionSequence out;
    out.channels = Tensor::zeros({T, skel.motion_dim()});

    // phase-lock the swing to the beat grid; constant-zero music falls back
    // to a default 120 bpm period
    std::vector<int> beats;
    for (int t = 0; t < T; ++t)
        if (music.features(t, kBeatChannel) > 0.5f) beats.push_back(t);
    float period = 15.0f;
    int b0 = 0;
    if (beats.size() >= 2) {
        period = static_cast<float>(beats[1] - beats[0]);
        b0 = beats[0];
    } else if (beats.size() == 1) {
        b0 = beats[0];
    }

    Rng rng(derive_seed(seed, 0xB0, static_cast<uint64_t>(music.genre)));
    float genre_amp = 0.55f + 0.05f * static_cast<float>(music.genre % 8);
    std::vector<float> amp(skel.joints, 0.0f);
    std::vector<int> axis(skel.joints, 0);
    for (int j : skel.upper_joints) {
        amp[j] = genre_amp * (0.25f + 0.15f * static_cast<float>(rng.uniform()));
        axis[j] = (music.genre + j) % 2;
    }

    const float pi = 3.14159265358979f;
    for (int t = 0; t < T; ++t) {
        // root pinned: feet stay planted, so contacts never slide
        out.channels(t, 0) = 0.0f;
        out.channels(t, 1) = skel.rest_root_height;
        out.channels(t, 2) = 0.0f;
        // Half-frame offset so the *interval* speed |theta(t+1) - theta(t)|,
        // which lives between frames, takes its strict minimum exactly at the
        // beat frame rather than tying across the two intervals around it.
        float phase = pi * (t - b0 - 0.5f) / period;
        for (int j = 0; j < skel.joints; ++j) {
            float* r6 = &out.channels.data[static_cast<size_t>(t) * skel.motion_dim() + 3 + 6 * j];
            if (amp[j] == 0.0f) {
                r6[0] = 1; r6[4] = 1;
            } else {
                float theta = amp[j] * std::cos(phase);
                if (axis[j] == 0) write_rot_z(r6, theta);
                else write_rot_x(r6, theta);
            }
        }
    }
    return out;
}

DatasetRecord synth_record(int T, double bpm, int genre, const Skeleton& skel, uint64_t seed,
                           std::string id) {
    DatasetRecord rec;
    rec.music = synth_music(T, bpm, genre, seed);
    rec.motion = synth_motion(rec.music, skel, seed);
    rec.id = std::move(id);
    return rec;
}

std::vector<DatasetRecord> window(const DatasetRecord& rec, int len, int stride) {
    if (len < 1 || stride < 1) throw std::invalid_argument("window: len and stride must be >= 1");
    int T = rec.music.frames();
    std::vector<DatasetRecord> out;
    for (int start = 0; start + len <= T; start += stride) {
        DatasetRecord w;
        w.music.genre = rec.music.genre;
        w.music.features = Tensor::zeros({len, rec.music.features.cols()});
        w.motion.channels = Tensor::zeros({len, rec.motion.channels.cols()});
        for (int t = 0; t < len; ++t) {
            std::copy_n(&rec.music.features.data[static_cast<size_t>(start + t) * rec.music.features.cols()],
                        rec.music.features.cols(),
                        &w.music.features.data[static_cast<size_t>(t) * w.music.features.cols()]);
            std::copy_n(&rec.motion.channels.data[static_cast<size_t>(start + t) * rec.motion.channels.cols()],
                        rec.motion.channels.cols(),
                        &w.motion.channels.data[static_cast<size_t>(t) * w.motion.channels.cols()]);
        }
        w.id = rec.id + "#" + std::to_string(start);
        out.push_back(std::move(w));
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'F', 'D', 'R', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError(DataError::Code::truncated, "fdr: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32_block(std::ostream& os, const Tensor& t) {
    static_assert(std::endian::native == std::endian::little, "fdr writer assumes little-endian host");
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * 4));
}

Tensor get_f32_block(std::istream& is, int rows, int cols) {
    Tensor t = Tensor::zeros({rows, cols});
    if (!is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.size() * 4)))
        throw DataError(DataError::Code::truncated, "fdr: truncated data block");
    return t;
}

}  // namespace

void save_record(const DatasetRecord& rec, const std::filesystem::path& path) {
    if (rec.music.frames() != rec.motion.frames())
        throw DataError(DataError::Code::alignment,
                        "fdr: music frames (" + std::to_string(rec.music.frames()) +
                            ") != motion frames (" + std::to_string(rec.motion.frames()) + ")");
    if (rec.music.features.cols() != kMusicDim)
        throw DataError(DataError::Code::dim_mismatch, "fdr: music feature dim must be 35");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError(DataError::Code::io, "fdr: cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(rec.music.frames()));
    put_u32(os, static_cast<uint32_t>(rec.music.features.cols()));
    put_u32(os, static_cast<uint32_t>(rec.motion.channels.cols()));
    put_u32(os, static_cast<uint32_t>(rec.music.genre));
    put_f32_block(os, rec.music.features);
    put_f32_block(os, rec.motion.channels);
    if (!os) throw DataError(DataError::Code::io, "fdr: write failed for " + path.string());
}

DatasetRecord load_record(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(DataError::Code::io, "fdr: cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4)) throw DataError(DataError::Code::truncated, "fdr: truncated magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw DataError(DataError::Code::magic_mismatch, "fdr: bad magic in " + path.string());
    uint32_t version = get_u32(is);
    if (version != kVersion)
        throw DataError(DataError::Code::bad_version, "fdr: unsupported version " + std::to_string(version));
    uint32_t T = get_u32(is);
    uint32_t music_dim = get_u32(is);
    uint32_t motion_dim = get_u32(is);
    uint32_t genre = get_u32(is);
    if (music_dim != kMusicDim || motion_dim < 9 || (motion_dim - 3) % 6 != 0)
        throw DataError(DataError::Code::dim_mismatch,
                        "fdr: bad dims music=" + std::to_string(music_dim) +
                            " motion=" + std::to_string(motion_dim));
    DatasetRecord rec;
    rec.music.genre = static_cast<int>(genre);
    rec.music.features = get_f32_block(is, static_cast<int>(T), static_cast<int>(music_dim));
    rec.motion.channels = get_f32_block(is, static_cast<int>(T), static_cast<int>(motion_dim));
    char extra;
    if (is.read(&extra, 1))
        throw DataError(DataError::Code::dim_mismatch, "fdr: trailing bytes in " + path.string());
    rec.id = path.stem().string();
    return rec;
}

void generate_dataset(const std::filesystem::path& dir, int n, int T, const Skeleton& skel, uint64_t seed) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw DataError(DataError::Code::io, "cannot write manifest in " + dir.string());
    for (int i = 0; i < n; ++i) {
        double bpm = 90.0 + 10.0 * (i % 5);  // beat periods of 15..20 frames
        int genre = i % kNumGenres;
        std::string name = "rec_" + std::to_string(i) + ".fdr";
        DatasetRecord rec = synth_record(T, bpm, genre, skel, derive_seed(seed, 0xD5, i), name);
        save_record(rec, dir / name);
        manifest << name << "\n";
    }
}

std::vector<std::string> read_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.txt");
    if (!is) throw DataError(DataError::Code::io, "missing manifest.txt in " + dir.string());
    std::vector<std::string> names;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) names.push_back(line);
    return names;
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& dir) {
    std::vector<DatasetRecord> out;
    for (const auto& name : read_manifest(dir)) out.push_back(load_record(dir / name));
    return out;
}

}  // namespace md
