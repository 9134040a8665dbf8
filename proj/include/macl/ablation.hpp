// SPDX-License-Identifier: Apache-2.0
//
// Ablation sweeps over component toggles, decoder depth, the dense-loss
// weight, encoder connection modes and stage count, plus paired comparisons.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "macl/pipeline.hpp"

namespace macl {

struct Variant {
    std::string name;
    bool pretrained = true;
    std::function<void(ExperimentConfig&)> apply;
};

namespace variants {

inline void decoder_blocks(ExperimentConfig& c, std::size_t n) {
    c.pretrain.model.decoder.blocks = n;
    c.pretrain.lambda = std::ldexp(1.0, -static_cast<int>(n));
}

inline Variant scratch() { return {"scratch", false, [](ExperimentConfig&) {}}; }

// Global loss only, no decoder, no downsampling.
inline Variant global_only() {
    return {"global-only", true, [](ExperimentConfig& c) {
                c.pretrain.weights.global = 1.0;
                c.pretrain.weights.dense = c.pretrain.weights.equivariant = 0.0;
                decoder_blocks(c, 0);
            }};
}

inline Variant full() { return {"macl", true, [](ExperimentConfig&) {}}; }

} // namespace variants

inline std::vector<Variant> baseline_sweep() { return {variants::scratch(), variants::global_only(), variants::full()}; }

// Lg | +decoder | +LER | +Ld; enabled terms keep the profile's weights.
inline std::vector<Variant> component_sweep() {
    auto terms = [](bool dense, bool equivariant) {
        return [=](ExperimentConfig& c) {
            if (!dense) c.pretrain.weights.dense = 0.0;
            if (!equivariant) c.pretrain.weights.equivariant = 0.0;
        };
    };
    return {variants::global_only(),
            {"+decoder", true, terms(false, false)},
            {"+LER", true, terms(false, true)},
            {"+Ld", true, terms(true, true)}};
}

inline std::vector<Variant> block_sweep(std::size_t max_blocks = 3) {
    std::vector<Variant> out;
    for (std::size_t n = 0; n <= max_blocks; ++n)
        out.push_back({"N=" + std::to_string(n), true, [n](ExperimentConfig& c) { variants::decoder_blocks(c, n); }});
    return out;
}

inline std::vector<Variant> dense_weight_sweep(std::vector<double> grid = {0.1, 0.3, 0.5, 0.7, 0.9}) {
    std::vector<Variant> out;
    for (double w : grid) {
        std::ostringstream name;
        name << "lambda2=" << w;
        out.push_back({name.str(), true, [w](ExperimentConfig& c) { c.pretrain.weights.dense = w; }});
    }
    return out;
}

inline std::vector<Variant> connection_sweep() {
    std::vector<Variant> out;
    for (auto m : {ConnectionMode::Shared, ConnectionMode::Independent, ConnectionMode::Ema})
        out.push_back({to_string(m), true, [m](ExperimentConfig& c) { c.pretrain.model.mode = m; }});
    return out;
}

inline std::vector<Variant> stage_sweep() {
    return {{"one-stage", true, [](ExperimentConfig& c) { c.pretrain.stages = 1; }},
            {"two-stage", true, [](ExperimentConfig& c) { c.pretrain.stages = 2; }}};
}

inline std::vector<Variant> sweep_by_name(const std::string& name) {
    if (name == "baseline") return baseline_sweep();
    if (name == "components") return component_sweep();
    if (name == "blocks") return block_sweep();
    if (name == "lambda2") return dense_weight_sweep();
    if (name == "modes") return connection_sweep();
    if (name == "stages") return stage_sweep();
    throw ConfigError("unknown sweep '" + name + "' (expected baseline|components|blocks|lambda2|modes|stages)");
}

struct AblationRow {
    std::string sweep;
    std::string variant;
    std::uint64_t seed = 0;
    ClassMetrics metrics; // foreground mean on the test split
    double seconds = 0.0;
};

using RowCallback = std::function<void(const AblationRow&)>;

inline AblationRow run_cell(const ExperimentConfig& base, const std::string& sweep, const Variant& v, std::uint64_t seed) {
    ExperimentConfig c = base;
    c.seed = seed;
    c.apply_seed();
    if (v.apply) v.apply(c);
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult r = run_experiment(c, v.pretrained);
    const auto t1 = std::chrono::steady_clock::now();
    return {sweep, v.name, seed, r.report.mean, std::chrono::duration<double>(t1 - t0).count()};
}

inline std::vector<AblationRow> run_sweep(const ExperimentConfig& base, const std::string& sweep, const std::vector<Variant>& vs,
                                          const std::vector<std::uint64_t>& seeds, const RowCallback& on_row = {}) {
    std::vector<AblationRow> rows;
    for (std::uint64_t s : seeds)
        for (const auto& v : vs) {
            rows.push_back(run_cell(base, sweep, v, s));
            if (on_row) on_row(rows.back());
        }
    return rows;
}

// Paired one-sided sign test of "a beats b"; ties are dropped.
struct SignTest {
    std::size_t wins = 0, losses = 0, ties = 0;
    double p_value = 1.0; // P(X >= wins) for X ~ Binomial(wins + losses, 1/2)
};

inline SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("sign test needs paired samples");
    SignTest t;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i]) ++t.wins;
        else if (a[i] < b[i]) ++t.losses;
        else ++t.ties;
    }
    const std::size_t n = t.wins + t.losses;
    double p = 0.0;
    for (std::size_t k = t.wins; k <= n; ++k) {
        double c = 1.0;
        for (std::size_t j = 0; j < k; ++j) c = c * static_cast<double>(n - j) / static_cast<double>(j + 1);
        p += c;
    }
    t.p_value = n == 0 ? 1.0 : p * std::ldexp(1.0, -static_cast<int>(n));
    return t;
}

// Per-seed DSC for one variant, ordered by seed as they appear in `rows`.
inline std::vector<double> dsc_by_seed(const std::vector<AblationRow>& rows, const std::string& variant) {
    std::vector<double> out;
    for (const auto& r : rows)
        if (r.variant == variant) out.push_back(r.metrics.dsc);
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline void write_ablation_csv_header(std::ostream& os) { os << "sweep,variant,seed,dsc,jc,hd95,asd,seconds\n"; }

inline void write_ablation_csv(std::ostream& os, const AblationRow& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.sweep.c_str(), r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.metrics.dsc, r.metrics.jc, r.metrics.hd95, r.metrics.asd, r.seconds);
    os << buf;
}

// Fixed-width summary: one line per variant with means over seeds.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::vector<std::string> order;
    for (const auto& r : rows)
        if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
    std::ostringstream os;
    os << std::left << std::setw(18) << "Variant" << std::right << std::setw(7) << "Seeds" << std::setw(10) << "DSC(%)"
       << std::setw(10) << "JC(%)" << std::setw(10) << "HD95" << std::setw(10) << "ASD" << '\n';
    os << std::string(65, '-') << '\n';
    for (const auto& v : order) {
        ClassMetrics m;
        std::size_t n = 0;
        for (const auto& r : rows)
            if (r.variant == v) {
                m.dsc += r.metrics.dsc;
                m.jc += r.metrics.jc;
                m.hd95 += r.metrics.hd95;
                m.asd += r.metrics.asd;
                ++n;
            }
        const double k = 1.0 / static_cast<double>(n);
        os << std::left << std::setw(18) << v << std::right << std::setw(7) << n << std::fixed << std::setprecision(2)
           << std::setw(10) << 100.0 * m.dsc * k << std::setw(10) << 100.0 * m.jc * k << std::setw(10) << m.hd95 * k
           << std::setw(10) << m.asd * k << '\n';
    }
    return os.str();
}

} // namespace macl
