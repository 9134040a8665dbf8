// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "macl/autograd.hpp"
#include "macl/error.hpp"
#include "macl/rng.hpp"

namespace macl {

// Component tags used by checkpoints and transfer.
namespace tag {
inline constexpr const char* encoder = "encoder";
inline constexpr const char* encoder_aux = "encoder_aux";
inline constexpr const char* decoder_partial = "decoder_partial";
inline constexpr const char* proj_img_dom = "proj_img_dom";
inline constexpr const char* proj_img_aux = "proj_img_aux";
inline constexpr const char* proj_pix_aux = "proj_pix_aux";
inline constexpr const char* decoder = "decoder";
inline constexpr const char* seg_head = "seg_head";
} // namespace tag

template <typename T>
struct Param {
    std::string name;
    std::string tag;
    Var<T> var;
};

// Named, tagged parameters in insertion order (which is also the init order).
template <typename T>
class ParamStore {
public:
    Var<T>& add(const std::string& name, const std::string& tag, Tensor<T> init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
        index_[name] = params_.size();
        params_.push_back({name, tag, Var<T>(std::move(init), trainable)});
        return params_.back().var;
    }

    const Var<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return params_[it->second].var;
    }
    Var<T>& get(const std::string& name) { return const_cast<Var<T>&>(std::as_const(*this).get(name)); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Param<T>& entry(const std::string& name) const { return params_[index_.at(name)]; }

    std::vector<Param<T>>& entries() { return params_; }
    const std::vector<Param<T>>& entries() const { return params_; }

    std::size_t count(const std::string& tag_filter = {}) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (tag_filter.empty() || p.tag == tag_filter) n += p.var.value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    // FNV-1a over raw parameter bytes, in name order.
    std::uint64_t checksum(const std::string& tag_filter = {}) const {
        std::uint64_t h = 1469598103934665603ULL;
        std::map<std::string, const Param<T>*> sorted;
        for (const auto& p : params_)
            if (tag_filter.empty() || p.tag == tag_filter) sorted[p.name] = &p;
        for (const auto& [name, p] : sorted) {
            for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
            const auto* bytes = reinterpret_cast<const unsigned char*>(p->var.value().data());
            for (std::size_t i = 0; i < p->var.value().numel() * sizeof(T); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
        }
        return h;
    }

private:
    std::vector<Param<T>> params_;
    std::map<std::string, std::size_t> index_;
};

namespace init {

// He-uniform for weights feeding a leaky ReLU.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

} // namespace init

} // namespace macl
