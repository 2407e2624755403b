#include "md/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace md {

namespace {

constexpr char kMagic[4] = {'F', 'L', 'D', 'N'};
constexpr uint32_t kVersion = 1;

struct Writer {
    std::ofstream os;
    explicit Writer(const std::filesystem::path& p) : os(p, std::ios::binary) {
        if (!os) throw std::runtime_error("checkpoint: cannot write " + p.string());
    }
    void bytes(const void* p, size_t n) { os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void i32(int32_t v) { bytes(&v, 4); }
    void floats(const Tensor& t) { bytes(t.data.data(), t.data.size() * sizeof(float)); }
    void name(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream is;
    std::filesystem::path path;
    explicit Reader(const std::filesystem::path& p) : is(p, std::ios::binary), path(p) {
        if (!is) throw std::runtime_error("checkpoint: cannot open " + p.string());
    }
    void bytes(void* p, size_t n) {
        if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
            throw std::runtime_error("checkpoint: truncated file " + path.string());
    }
    uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
    uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
    uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
    int32_t i32() { int32_t v; bytes(&v, 4); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    void floats(Tensor& t) { bytes(t.data.data(), t.data.size() * sizeof(float)); }
    std::string name() {
        uint32_t n = u32();
        if (n > 4096) throw std::runtime_error("checkpoint: implausible name length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

void write_config(Writer& w, const NetworkConfig& c) {
    for (int v : {c.latent_dim, c.d_state, c.conv_kernel, c.expand, c.cond_layers, c.gen_blocks,
                  c.dt_rank, c.motion_dim, c.music_dim, c.genre_count})
        w.i32(v);
}

NetworkConfig read_config(Reader& r) {
    NetworkConfig c;
    for (int* f : {&c.latent_dim, &c.d_state, &c.conv_kernel, &c.expand, &c.cond_layers,
                   &c.gen_blocks, &c.dt_rank, &c.motion_dim, &c.music_dim, &c.genre_count})
        *f = r.i32();
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, int64_t step,
                     const AdanState* opt, const EmaState* ema) {
    size_t np = model.params.items.size();
    if (opt && opt->m.size() != np)
        throw std::invalid_argument("checkpoint: optimizer state size mismatch");
    if (ema && ema->shadow.size() != np)
        throw std::invalid_argument("checkpoint: ema shadow size mismatch");
    Writer w(path);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    write_config(w, model.cfg);
    w.u64(static_cast<uint64_t>(step));
    w.u32(static_cast<uint32_t>(np));
    for (const auto& [name, t] : model.params.items) {
        w.name(name);
        w.u32(static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) w.u32(static_cast<uint32_t>(d));
        w.floats(t);
    }
    w.u8(opt ? 1 : 0);
    if (opt) {
        w.u64(static_cast<uint64_t>(opt->step));
        for (size_t i = 0; i < np; ++i) {
            w.floats(opt->m[i]);
            w.floats(opt->v[i]);
            w.floats(opt->n[i]);
            w.floats(opt->g_prev[i]);
        }
    }
    w.u8(ema ? 1 : 0);
    if (ema) {
        w.f32(ema->decay);
        for (size_t i = 0; i < np; ++i) w.floats(ema->shadow[i]);
    }
    if (!w.os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    NetworkConfig cfg = read_config(r);
    cfg.validate();

    CheckpointData out;
    out.step = static_cast<int64_t>(r.u64());
    out.model.init(cfg, 0);  // weights overwritten below

    uint32_t n = r.u32();
    std::vector<std::string> unexpected, mismatched;
    std::vector<bool> filled(out.model.params.items.size(), false);
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = r.name();
        uint32_t ndim = r.u32();
        if (ndim > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        Tensor t = Tensor::uninit(shape);
        r.floats(t);
        if (!out.model.params.has(name)) {
            unexpected.push_back(name);
            continue;
        }
        Tensor& dst = out.model.params.get(name);
        if (dst.shape != shape) {
            mismatched.push_back(name);
            continue;
        }
        dst = std::move(t);
        size_t idx = 0;
        for (const auto& [k, v] : out.model.params.items) {
            if (k == name) filled[idx] = true;
            ++idx;
        }
    }
    std::vector<std::string> missing;
    {
        size_t idx = 0;
        for (const auto& [k, v] : out.model.params.items) {
            if (!filled[idx]) missing.push_back(k);
            ++idx;
        }
    }
    if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
        std::string msg = "checkpoint: parameter registry mismatch for config in " + path.string();
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (size_t i = 0; i < v.size() && i < 8; ++i) s += (i ? ", " : "") + v[i];
            if (v.size() > 8) s += ", ... (" + std::to_string(v.size()) + " total)";
            return s;
        };
        if (!missing.empty()) msg += "; missing: [" + join(missing) + "]";
        if (!unexpected.empty()) msg += "; unexpected: [" + join(unexpected) + "]";
        if (!mismatched.empty()) msg += "; shape mismatch: [" + join(mismatched) + "]";
        throw std::runtime_error(msg);
    }

    size_t np = out.model.params.items.size();
    if (r.u8()) {
        AdanState opt;
        opt.step = static_cast<int64_t>(r.u64());
        for (size_t i = 0; i < np; ++i) {
            const Tensor& p = out.model.params.items[i].second;
            Tensor m = Tensor::uninit(p.shape), v = Tensor::uninit(p.shape),
                   nn = Tensor::uninit(p.shape), gp = Tensor::uninit(p.shape);
            r.floats(m);
            r.floats(v);
            r.floats(nn);
            r.floats(gp);
            opt.m.push_back(std::move(m));
            opt.v.push_back(std::move(v));
            opt.n.push_back(std::move(nn));
            opt.g_prev.push_back(std::move(gp));
        }
        out.opt = std::move(opt);
    }
    if (r.u8()) {
        EmaState ema;
        ema.decay = r.f32();
        for (size_t i = 0; i < np; ++i) {
            Tensor s = Tensor::uninit(out.model.params.items[i].second.shape);
            r.floats(s);
            ema.shadow.push_back(std::move(s));
        }
        out.ema = std::move(ema);
    }
    return out;
}

}  // namespace md
