// SPDX-License-Identifier: Apache-2.0
//
// Overlap and boundary-distance metrics on 2D binary masks, plus report
// aggregation (per-slice mean over foreground classes).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "macl/error.hpp"

namespace macl {

// Row-major H x W mask; nonzero entries are foreground.
struct MaskView {
    std::span<const std::uint8_t> data;
    std::size_t height = 0;
    std::size_t width = 0;

    bool at(std::size_t y, std::size_t x) const { return data[y * width + x] != 0; }
    bool empty() const {
        return std::none_of(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; });
    }
};

namespace detail {

inline void require_same(const MaskView& a, const MaskView& b, const char* op) {
    if (a.height != b.height || a.width != b.width || a.data.size() != a.height * a.width || b.data.size() != b.height * b.width)
        throw ShapeError(std::string(op) + ": mask shapes differ");
}

struct Overlap {
    std::size_t inter = 0, p = 0, g = 0;
};

inline Overlap overlap(const MaskView& pred, const MaskView& gt) {
    Overlap o;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        o.inter += a && b;
        o.p += a;
        o.g += b;
    }
    return o;
}

} // namespace detail

inline double dsc(const MaskView& pred, const MaskView& gt) {
    detail::require_same(pred, gt, "dsc");
    const auto o = detail::overlap(pred, gt);
    if (o.p + o.g == 0) return 1.0;
    return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.p + o.g);
}

inline double jc(const MaskView& pred, const MaskView& gt) {
    detail::require_same(pred, gt, "jc");
    const auto o = detail::overlap(pred, gt);
    const std::size_t uni = o.p + o.g - o.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.inter) / static_cast<double>(uni);
}

struct Point {
    std::size_t y, x;
};

// Foreground pixels with at least one 4-neighbour in the background (image border counts as background).
inline std::vector<Point> boundary_points(const MaskView& m) {
    std::vector<Point> pts;
    for (std::size_t y = 0; y < m.height; ++y)
        for (std::size_t x = 0; x < m.width; ++x) {
            if (!m.at(y, x)) continue;
            const bool edge = y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width || !m.at(y - 1, x) || !m.at(y + 1, x) ||
                              !m.at(y, x - 1) || !m.at(y, x + 1);
            if (edge) pts.push_back({y, x});
        }
    return pts;
}

// Distances from each point of `from` to the nearest point of `to`, scaled by spacing.
inline std::vector<double> directed_distances(const std::vector<Point>& from, const std::vector<Point>& to, double spacing) {
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dy = double(a.y) - double(b.y), dx = double(a.x) - double(b.x);
            best = std::min(best, dy * dy + dx * dx);
        }
        d.push_back(std::sqrt(best) * spacing);
    }
    return d;
}

// Linear-interpolation percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) throw ContractError("percentile of an empty set");
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct DistanceResult {
    double value = 0.0;
    bool sentinel = false; // one mask empty: value is the image diagonal
};

namespace detail {

inline double diagonal(const MaskView& m, double spacing) {
    return std::hypot(static_cast<double>(m.height), static_cast<double>(m.width)) * spacing;
}

inline std::vector<double> pooled_distances(const MaskView& pred, const MaskView& gt, double spacing) {
    const auto bp = boundary_points(pred), bg = boundary_points(gt);
    auto d = directed_distances(bp, bg, spacing);
    const auto back = directed_distances(bg, bp, spacing);
    d.insert(d.end(), back.begin(), back.end());
    return d;
}

template <typename F>
DistanceResult distance_metric(const MaskView& pred, const MaskView& gt, double spacing, const char* op, F reduce) {
    require_same(pred, gt, op);
    if (!(spacing > 0.0)) throw ConfigError(std::string(op) + ": spacing must be > 0");
    const bool pe = pred.empty(), ge = gt.empty();
    if (pe && ge) return {0.0, false};
    if (pe || ge) return {diagonal(gt, spacing), true};
    return {reduce(pooled_distances(pred, gt, spacing)), false};
}

} // namespace detail

inline DistanceResult hd95(const MaskView& pred, const MaskView& gt, double spacing = 1.0) {
    return detail::distance_metric(pred, gt, spacing, "hd95", [](std::vector<double> d) { return percentile(std::move(d), 95.0); });
}

inline DistanceResult hausdorff(const MaskView& pred, const MaskView& gt, double spacing = 1.0) {
    return detail::distance_metric(pred, gt, spacing, "hausdorff",
                                   [](std::vector<double> d) { return *std::max_element(d.begin(), d.end()); });
}

// Mean of each direction's mean boundary distance.
inline DistanceResult asd(const MaskView& pred, const MaskView& gt, double spacing = 1.0) {
    detail::require_same(pred, gt, "asd");
    if (!(spacing > 0.0)) throw ConfigError("asd: spacing must be > 0");
    const bool pe = pred.empty(), ge = gt.empty();
    if (pe && ge) return {0.0, false};
    if (pe || ge) return {detail::diagonal(gt, spacing), true};
    const auto bp = boundary_points(pred), bg = boundary_points(gt);
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return {0.5 * (mean(directed_distances(bp, bg, spacing)) + mean(directed_distances(bg, bp, spacing))), false};
}

// ---------------------------------------------------------------------------
// Reports

struct ClassMetrics {
    double dsc = 0, jc = 0, hd95 = 0, asd = 0;
    std::size_t sentinel_count = 0;   // slices where exactly one mask was empty
    std::size_t both_empty_count = 0; // slices scored by the both-empty convention
};

struct MetricsReport {
    std::map<int, ClassMetrics> per_class; // foreground classes 1..K
    ClassMetrics mean;                     // mean over foreground classes
    std::size_t n_samples = 0;
    std::string aggregation = "per-slice mean";
    nlohmann::json metadata = nlohmann::json::object(); // config hash, seed, checkpoint id
};

// Accumulates per-slice metrics for each foreground class of a K-class label map.
class MetricsAccumulator {
public:
    explicit MetricsAccumulator(std::size_t num_classes) : k_(num_classes) {
        if (num_classes < 2) throw ConfigError("metrics need at least 2 classes");
    }

    void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t H, std::size_t W, double spacing = 1.0) {
        if (pred.size() != H * W || gt.size() != H * W) throw ShapeError("metrics: label map size mismatch");
        std::vector<std::uint8_t> pm(H * W), gm(H * W);
        for (std::size_t c = 1; c < k_; ++c) {
            for (std::size_t i = 0; i < H * W; ++i) {
                pm[i] = pred[i] == c;
                gm[i] = gt[i] == c;
            }
            const MaskView p{pm, H, W}, g{gm, H, W};
            auto& acc = sums_[static_cast<int>(c)];
            acc.dsc += dsc(p, g);
            acc.jc += jc(p, g);
            const auto h = hd95(p, g, spacing), a = asd(p, g, spacing);
            acc.hd95 += h.value;
            acc.asd += a.value;
            acc.sentinel_count += h.sentinel;
            acc.both_empty_count += p.empty() && g.empty();
        }
        ++n_;
    }

    MetricsReport report() const {
        MetricsReport r;
        r.n_samples = n_;
        if (n_ == 0) return r;
        const double inv = 1.0 / static_cast<double>(n_);
        for (std::size_t c = 1; c < k_; ++c) {
            auto m = sums_.at(static_cast<int>(c));
            m.dsc *= inv;
            m.jc *= inv;
            m.hd95 *= inv;
            m.asd *= inv;
            r.per_class[static_cast<int>(c)] = m;
            r.mean.dsc += m.dsc;
            r.mean.jc += m.jc;
            r.mean.hd95 += m.hd95;
            r.mean.asd += m.asd;
            r.mean.sentinel_count += m.sentinel_count;
            r.mean.both_empty_count += m.both_empty_count;
        }
        const double fg = 1.0 / static_cast<double>(k_ - 1);
        r.mean.dsc *= fg;
        r.mean.jc *= fg;
        r.mean.hd95 *= fg;
        r.mean.asd *= fg;
        return r;
    }

private:
    std::size_t k_;
    std::size_t n_ = 0;
    std::map<int, ClassMetrics> sums_;
};

inline void to_json(nlohmann::json& j, const ClassMetrics& m) {
    j = {{"dsc", m.dsc}, {"jc", m.jc}, {"hd95", m.hd95}, {"asd", m.asd},
         {"sentinel_count", m.sentinel_count}, {"both_empty_count", m.both_empty_count}};
}
inline void from_json(const nlohmann::json& j, ClassMetrics& m) {
    m.dsc = j.at("dsc").get<double>();
    m.jc = j.at("jc").get<double>();
    m.hd95 = j.at("hd95").get<double>();
    m.asd = j.at("asd").get<double>();
    m.sentinel_count = j.value("sentinel_count", std::size_t{0});
    m.both_empty_count = j.value("both_empty_count", std::size_t{0});
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    nlohmann::json pc = nlohmann::json::object();
    for (const auto& [c, m] : r.per_class) pc[std::to_string(c)] = m;
    j = {{"per_class", pc}, {"mean", r.mean}, {"n_samples", r.n_samples}, {"aggregation", r.aggregation}, {"metadata", r.metadata}};
}
inline void from_json(const nlohmann::json& j, MetricsReport& r) {
    for (const auto& [k, v] : j.at("per_class").items()) r.per_class[std::stoi(k)] = v.get<ClassMetrics>();
    r.mean = j.at("mean").get<ClassMetrics>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.aggregation = j.value("aggregation", r.aggregation);
    r.metadata = j.value("metadata", nlohmann::json::object());
}

// One row per (class, metric); class "mean" holds the foreground average.
inline std::string report_csv(const MetricsReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "class,metric,value\n";
    auto rows = [&](const std::string& c, const ClassMetrics& m) {
        os << c << ",dsc," << m.dsc << '\n'
           << c << ",jc," << m.jc << '\n'
           << c << ",hd95," << m.hd95 << '\n'
           << c << ",asd," << m.asd << '\n'
           << c << ",sentinel_count," << m.sentinel_count << '\n';
    };
    for (const auto& [c, m] : r.per_class) rows(std::to_string(c), m);
    rows("mean", r.mean);
    return os.str();
}

} // namespace macl
