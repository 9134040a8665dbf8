// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <unordered_map>

#include "macl/error.hpp"
#include "macl/params.hpp"

namespace macl {

// lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi step / total))
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
    if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be > 0");
    if (step > total_steps) throw ConfigError("cosine_lr: step beyond total_steps");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

template <typename T>
using ParamFilter = std::function<bool(const Param<T>&)>;

// Updates every trainable parameter that has a gradient and passes the filter.
template <typename T>
class Optimizer {
public:
    struct Settings {
        OptimizerKind kind = OptimizerKind::Sgd;
        double momentum = 0.9;
        double weight_decay = 0.0;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    explicit Optimizer(Settings s) : s_(s) {}

    void step(ParamStore<T>& ps, double lr, const ParamFilter<T>& filter = {}) {
        ++t_;
        for (auto& p : ps.entries()) {
            if (!p.var.requires_grad() || !p.var.has_grad()) continue;
            if (filter && !filter(p)) continue;
            auto& w = p.var.mutable_value();
            const auto& g = p.var.grad();
            if (s_.kind == OptimizerKind::Sgd) {
                auto& v = slot(m_, p.name, w.shape());
                for (std::size_t i = 0; i < w.numel(); ++i) {
                    const double gi = static_cast<double>(g[i]) + s_.weight_decay * static_cast<double>(w[i]);
                    v[i] = static_cast<T>(s_.momentum * static_cast<double>(v[i]) + gi);
                    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * static_cast<double>(v[i]));
                }
            } else {
                auto& m = slot(m_, p.name, w.shape());
                auto& v = slot(v_, p.name, w.shape());
                auto& tp = steps_[p.name];
                ++tp;
                const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(tp));
                const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(tp));
                for (std::size_t i = 0; i < w.numel(); ++i) {
                    const double gi = static_cast<double>(g[i]) + s_.weight_decay * static_cast<double>(w[i]);
                    const double mi = s_.beta1 * static_cast<double>(m[i]) + (1.0 - s_.beta1) * gi;
                    const double vi = s_.beta2 * static_cast<double>(v[i]) + (1.0 - s_.beta2) * gi * gi;
                    m[i] = static_cast<T>(mi);
                    v[i] = static_cast<T>(vi);
                    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + s_.eps));
                }
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    static Tensor<T>& slot(std::unordered_map<std::string, Tensor<T>>& m, const std::string& name, const Shape& shape) {
        auto it = m.find(name);
        if (it == m.end()) it = m.emplace(name, Tensor<T>(shape)).first;
        return it->second;
    }

    Settings s_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, Tensor<T>> m_, v_;
    std::unordered_map<std::string, std::size_t> steps_;
};

} // namespace macl
