#pragma once

#include <cmath>
#include <type_traits>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace md {

// Allocator that leaves trivially-constructible elements uninitialised when a
// vector grows without an explicit value. Tensor::zeros/full still fill; the
// point is that Tensor::uninit skips a wasted memset for buffers whose every
// element is written immediately afterwards.
template <class T>
struct uninit_alloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = uninit_alloc<U>;
    };
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

// Dense row-major float tensor. Rank is usually 1 or 2 (rows = time frames).
struct Tensor {
    using Buf = std::vector<float, uninit_alloc<float>>;

    std::vector<int> shape;
    Buf data;

    Tensor() = default;
    Tensor(std::vector<int> s, const std::vector<float>& d)
        : shape(std::move(s)), data(d.begin(), d.end()) {}

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel(t.shape), 0.0f);
        return t;
    }
    // Allocated but not cleared; caller must write every element.
    static Tensor uninit(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.resize(numel(t.shape));
        return t;
    }
    static Tensor full(std::vector<int> s, float v) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel(t.shape), v);
        return t;
    }
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static int64_t numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    float& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    float operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }
    float& operator[](int64_t i) { return data[i]; }
    float operator[](int64_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// Deterministic RNG. splitmix64 is used to derive independent streams.
struct Rng {
    std::mt19937_64 gen;
    explicit Rng(uint64_t seed) : gen(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
    uint64_t bits() { return gen(); }

    Tensor normal_tensor(std::vector<int> s, float scale = 1.0f) {
        Tensor t = Tensor::uninit(std::move(s));
        for (auto& v : t.data) v = static_cast<float>(normal()) * scale;
        return t;
    }
    Tensor uniform_tensor(std::vector<int> s, float lo, float hi) {
        Tensor t = Tensor::uninit(std::move(s));
        for (auto& v : t.data) v = lo + static_cast<float>(uniform()) * (hi - lo);
        return t;
    }
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Seed for a (stream, index) pair so results do not depend on thread scheduling.
inline uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
    return splitmix64(base ^ splitmix64(stream * 0x100000001b3ull + index));
}

}  // namespace md
