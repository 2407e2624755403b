#pragma once

#include <deque>
#include <string>
#include <unordered_map>

#include "md/tensor.hpp"

namespace md {

// Named parameter tensors with stable addresses and deterministic iteration
// order (insertion order). Stability matters: the autodiff tape and the
// optimizer key parameters by their data pointers.
struct ParameterStore {
    std::deque<std::pair<std::string, Tensor>> items;

    Tensor& add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        items.emplace_back(name, std::move(init));
        index_.emplace(name, items.size() - 1);
        return items.back().second;
    }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return items[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return items[it->second].second;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : items) n += v.size();
        return n;
    }

  private:
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace md
