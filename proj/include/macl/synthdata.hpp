// SPDX-License-Identifier: Apache-2.0
//
// Synthetic volumetric data: organ-like ellipsoids whose in-slice geometry
// drifts smoothly with depth, so slices at similar normalized positions in
// different volumes look alike. Also owns slice sampling and the
// position-based positive-pair matrix.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "macl/error.hpp"
#include "macl/rng.hpp"
#include "macl/tensor.hpp"

namespace macl {

struct SynthConfig {
    std::size_t depth = 16;  // D
    std::size_t size = 64;   // H = W
    std::size_t classes = 2; // K foreground organs, label ids 1..K
    double noise = 0.1;      // Gaussian intensity noise sigma

    void validate() const {
        if (classes == 0) throw ConfigError("synth classes K must be >= 1");
        if (classes > 254) throw ConfigError("synth classes K must fit in uint8 labels");
        if (depth < 2) throw ConfigError("synth depth D must be >= 2");
        if (size < 8) throw ConfigError("synth size H must be >= 8");
        if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("synth noise must be in [0, 0.5]");
    }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"depth", c.depth}, {"size", c.size}, {"classes", c.classes}, {"noise", c.noise}};
}
inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    c.depth = j.value("depth", c.depth);
    c.size = j.value("size", c.size);
    c.classes = j.value("classes", c.classes);
    c.noise = j.value("noise", c.noise);
}

struct Volume {
    Tensor<float> voxels;        // D x H x W, intensities in [0, 1]
    Tensor<std::uint8_t> labels; // D x H x W, class ids 0..K
    std::string volume_id;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};

    std::size_t depth() const { return voxels.dim(0); }
    std::size_t height() const { return voxels.dim(1); }
    std::size_t width() const { return voxels.dim(2); }
};

// Geometry of one organ. Positions are normalized depth in [0, 1]; in-plane
// quantities are fractions of the slice size.
struct OrganGeometry {
    double z_center, z_half;        // extent along depth
    double cy, cx;                  // in-plane center at z_center
    double ry, rx;                  // in-plane semi-axes at z_center
    double drift_amp, drift_phase;  // sinusoidal center drift along depth
    float intensity;
};

struct PhantomGeometry {
    double body_ry, body_rx;
    std::vector<OrganGeometry> organs; // organ k has label k + 1
};

namespace detail {

inline double organ_section_scale(const OrganGeometry& o, double p) {
    const double t = (p - o.z_center) / o.z_half;
    return t * t < 1.0 ? std::sqrt(1.0 - t * t) : 0.0;
}

} // namespace detail

// Deterministic in (seed, cfg). Organ templates are shared by all volumes; the
// seed only jitters them, which is what makes cross-volume position pairing meaningful.
inline PhantomGeometry phantom_geometry(std::uint64_t seed, const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 17);
    PhantomGeometry g;
    g.body_ry = 0.42 + rng.uniform(-0.02, 0.02);
    g.body_rx = 0.46 + rng.uniform(-0.02, 0.02);
    const std::size_t K = cfg.classes;
    for (std::size_t k = 0; k < K; ++k) {
        const double a = 2.0 * std::numbers::pi * (static_cast<double>(k) + 0.25) / static_cast<double>(K);
        OrganGeometry o{};
        o.z_center = 0.25 + 0.5 * (static_cast<double>(k) + 0.5) / static_cast<double>(K) + rng.uniform(-0.04, 0.04);
        o.z_half = 0.45 + rng.uniform(-0.05, 0.05);
        o.cy = 0.5 + (K > 1 ? 0.18 * std::sin(a) : 0.0) + rng.uniform(-0.02, 0.02);
        o.cx = 0.5 + (K > 1 ? 0.18 * std::cos(a) : 0.0) + rng.uniform(-0.02, 0.02);
        o.ry = (K > 1 ? 0.13 : 0.2) * (1.0 + rng.uniform(-0.1, 0.1));
        o.rx = (K > 1 ? 0.16 : 0.24) * (1.0 + rng.uniform(-0.1, 0.1));
        o.drift_amp = 0.05 + rng.uniform(-0.01, 0.01);
        o.drift_phase = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(K) + rng.uniform(-0.3, 0.3);
        o.intensity = static_cast<float>(K > 1 ? 0.45 + 0.2 * static_cast<double>(k) / static_cast<double>(K - 1) : 0.45);
        g.organs.push_back(o);
    }
    return g;
}

// Label of the organ covering (p, y, x) in normalized coordinates, 0 when none.
// Later organs overwrite earlier ones where they overlap.
inline std::uint8_t organ_label_at(const PhantomGeometry& g, double p, double y, double x) {
    std::uint8_t label = 0;
    for (std::size_t k = 0; k < g.organs.size(); ++k) {
        const auto& o = g.organs[k];
        const double s = detail::organ_section_scale(o, p);
        if (s <= 0.0) continue;
        const double cy = o.cy + o.drift_amp * std::sin(2.0 * std::numbers::pi * p + o.drift_phase);
        const double cx = o.cx + o.drift_amp * std::cos(2.0 * std::numbers::pi * p + o.drift_phase);
        const double dy = (y - cy) / (o.ry * s), dx = (x - cx) / (o.rx * s);
        if (dy * dy + dx * dx <= 1.0) label = static_cast<std::uint8_t>(k + 1);
    }
    return label;
}

inline Volume generate_volume(std::uint64_t seed, const SynthConfig& cfg, std::string volume_id = {}) {
    cfg.validate();
    const auto geom = phantom_geometry(seed, cfg);
    const std::size_t D = cfg.depth, H = cfg.size;
    Volume v;
    v.voxels = Tensor<float>({D, H, H});
    v.labels = Tensor<std::uint8_t>({D, H, H});
    v.volume_id = volume_id.empty() ? "vol-" + std::to_string(seed) : std::move(volume_id);
    Rng noise(seed ^ 0xD1B54A32D192ED03ULL);
    constexpr float kBackground = 0.05f;
    constexpr float kBody = 0.2f;
    for (std::size_t z = 0; z < D; ++z) {
        const double p = static_cast<double>(z) / static_cast<double>(D - 1);
        for (std::size_t yy = 0; yy < H; ++yy) {
            const double y = (static_cast<double>(yy) + 0.5) / static_cast<double>(H);
            for (std::size_t xx = 0; xx < H; ++xx) {
                const double x = (static_cast<double>(xx) + 0.5) / static_cast<double>(H);
                const std::size_t idx = (z * H + yy) * H + xx;
                const double by = (y - 0.5) / geom.body_ry, bx = (x - 0.5) / geom.body_rx;
                float value = by * by + bx * bx <= 1.0 ? kBody : kBackground;
                const std::uint8_t lab = organ_label_at(geom, p, y, x);
                if (lab > 0) value = geom.organs[lab - 1].intensity;
                double noisy = value;
                if (cfg.noise > 0.0) noisy += cfg.noise * noise.normal();
                v.voxels[idx] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
                v.labels[idx] = lab;
            }
        }
    }
    return v;
}

// One 2D slice of a volume. Image and mask are views into the shared volume.
struct SliceSample {
    std::shared_ptr<const Volume> volume;
    std::size_t slice_index = 0;
    double position = 0.0; // slice_index / (D - 1)

    const std::string& volume_id() const { return volume->volume_id; }
    std::size_t size() const { return volume->height(); }
    std::span<const float> image() const {
        const std::size_t n = volume->height() * volume->width();
        return {volume->voxels.data() + slice_index * n, n};
    }
    std::span<const std::uint8_t> mask() const {
        const std::size_t n = volume->height() * volume->width();
        return {volume->labels.data() + slice_index * n, n};
    }
    Tensor<float> image_tensor() const {
        auto s = image();
        return Tensor<float>({volume->height(), volume->width()}, std::vector<float>(s.begin(), s.end()));
    }
};

inline std::vector<SliceSample> slice_volume(std::shared_ptr<const Volume> v) {
    const std::size_t D = v->depth();
    std::vector<SliceSample> out;
    out.reserve(D);
    for (std::size_t d = 0; d < D; ++d)
        out.push_back({v, d, static_cast<double>(d) / static_cast<double>(D - 1)});
    return out;
}

struct BatchSpec {
    std::vector<std::size_t> indices; // into the dataset
    std::vector<SliceSample> samples;
};

// n distinct samples drawn uniformly without replacement (partial Fisher-Yates).
inline BatchSpec sample_batch(std::span<const SliceSample> dataset, std::size_t n, Rng& rng) {
    if (n > dataset.size())
        throw SamplingError("requested " + std::to_string(n) + " samples from a dataset of " +
                            std::to_string(dataset.size()));
    std::vector<std::size_t> idx(dataset.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(dataset.size() - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    BatchSpec b;
    b.indices = idx;
    for (auto i : idx) b.samples.push_back(dataset[i]);
    return b;
}

struct RowMeta {
    std::string volume_id;
    double position = 0.0;
};

// Positive-pair structure over the 2N augmented rows; rows 2i and 2i+1 are
// the two augmentations of source slice i.
class PairLabelMatrix {
public:
    PairLabelMatrix() = default;
    PairLabelMatrix(std::size_t n, std::vector<std::uint8_t> positives, std::vector<RowMeta> meta)
        : n_(n), pos_(std::move(positives)), meta_(std::move(meta)) {}

    std::size_t size() const noexcept { return n_; }
    bool positive(std::size_t i, std::size_t j) const { return pos_[i * n_ + j] != 0; }
    std::size_t positive_count(std::size_t i) const {
        std::size_t c = 0;
        for (std::size_t j = 0; j < n_; ++j) c += pos_[i * n_ + j];
        return c;
    }
    const std::vector<RowMeta>& anchor_meta() const noexcept { return meta_; }

    // Reorders rows and columns: new row r is old row perm[r].
    PairLabelMatrix permuted(std::span<const std::size_t> perm) const {
        std::vector<std::uint8_t> p(n_ * n_);
        std::vector<RowMeta> m(n_);
        for (std::size_t r = 0; r < n_; ++r) {
            m[r] = meta_[perm[r]];
            for (std::size_t c = 0; c < n_; ++c) p[r * n_ + c] = pos_[perm[r] * n_ + perm[c]];
        }
        return {n_, std::move(p), std::move(m)};
    }

    static PairLabelMatrix siblings_only(std::size_t rows) {
        std::vector<std::uint8_t> p(rows * rows, 0);
        for (std::size_t i = 0; i < rows; ++i) p[i * rows + (i ^ 1)] = 1;
        return {rows, std::move(p), std::vector<RowMeta>(rows)};
    }

private:
    std::size_t n_ = 0;
    std::vector<std::uint8_t> pos_;
    std::vector<RowMeta> meta_;
};

inline PairLabelMatrix build_pair_labels(std::span<const RowMeta> rows, double theta_pos) {
    if (theta_pos < 0.0) throw ConfigError("theta_pos must be >= 0");
    const std::size_t n = rows.size();
    if (n < 2 || n % 2 != 0)
        throw ContractError("pair labels need an even number (>= 2) of augmented rows, got " + std::to_string(n));
    std::vector<std::uint8_t> p(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const bool sibling = i / 2 == j / 2;
            const bool close = std::abs(rows[i].position - rows[j].position) <= theta_pos;
            p[i * n + j] = (sibling || close) ? 1 : 0;
        }
    return {n, std::move(p), std::vector<RowMeta>(rows.begin(), rows.end())};
}

// Each source slice contributes two rows.
inline std::vector<RowMeta> rows_for_batch(const BatchSpec& b) {
    std::vector<RowMeta> rows;
    rows.reserve(2 * b.samples.size());
    for (const auto& s : b.samples) {
        rows.push_back({s.volume_id(), s.position});
        rows.push_back({s.volume_id(), s.position});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// On-disk dataset: manifest.json + little-endian raw grids per volume.

namespace detail {

template <typename T>
void write_raw_le(const std::filesystem::path& path, std::span<const T> data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    } else {
        for (const T& v : data) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            os.write(bytes.data(), sizeof(T));
        }
    }
    if (!os) throw IoError("short write to " + path.string());
}

template <typename T>
std::vector<T> read_raw_le(const std::filesystem::path& path, std::size_t count) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::vector<T> out(count);
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (is.gcount() != static_cast<std::streamsize>(count * sizeof(T)))
        throw IoError("truncated file " + path.string());
    if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
        for (auto& v : out) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            v = std::bit_cast<T>(bytes);
        }
    }
    return out;
}

} // namespace detail

struct VolumeRecord {
    std::string id;
    std::uint64_t seed = 0;
    SynthConfig cfg;
};

// Volume seeds for a dataset are derived from the dataset seed so a single
// --seed flag reproduces everything.
inline std::vector<VolumeRecord> plan_dataset(std::uint64_t seed, std::size_t volumes, const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    std::vector<VolumeRecord> out;
    for (std::size_t i = 0; i < volumes; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "vol%03zu", i);
        out.push_back({id, rng.next_u64() >> 1, cfg});
    }
    return out;
}

inline std::vector<std::shared_ptr<const Volume>> realize(std::span<const VolumeRecord> plan) {
    std::vector<std::shared_ptr<const Volume>> out;
    for (const auto& r : plan) out.push_back(std::make_shared<const Volume>(generate_volume(r.seed, r.cfg, r.id)));
    return out;
}

inline void save_dataset(const std::filesystem::path& dir, std::span<const VolumeRecord> plan) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "macl-synth-v1";
    manifest["volumes"] = nlohmann::json::array();
    for (const auto& r : plan) {
        const Volume v = generate_volume(r.seed, r.cfg, r.id);
        const std::string vox = r.id + ".voxels.f32", lab = r.id + ".labels.u8";
        detail::write_raw_le<float>(dir / vox, v.voxels.span());
        detail::write_raw_le<std::uint8_t>(dir / lab, v.labels.span());
        manifest["volumes"].push_back({{"id", r.id},
                                       {"shape", {v.depth(), v.height(), v.width()}},
                                       {"dtype", {{"voxels", "float32"}, {"labels", "uint8"}}},
                                       {"byte_order", "little"},
                                       {"seed", r.seed},
                                       {"cfg", r.cfg},
                                       {"voxels_file", vox},
                                       {"labels_file", lab}});
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << '\n';
}

inline std::vector<std::shared_ptr<const Volume>> load_dataset(const std::filesystem::path& dir,
                                                               std::vector<VolumeRecord>* plan_out = nullptr) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("missing manifest.json in " + dir.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad manifest: ") + e.what());
    }
    std::vector<std::shared_ptr<const Volume>> out;
    for (const auto& e : manifest.at("volumes")) {
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3) throw IoError("volume shape must be 3D");
        const std::size_t n = shape[0] * shape[1] * shape[2];
        auto v = std::make_shared<Volume>();
        v->volume_id = e.at("id").get<std::string>();
        v->voxels = Tensor<float>(shape, detail::read_raw_le<float>(dir / e.at("voxels_file").get<std::string>(), n));
        v->labels = Tensor<std::uint8_t>(shape, detail::read_raw_le<std::uint8_t>(dir / e.at("labels_file").get<std::string>(), n));
        if (plan_out) plan_out->push_back({v->volume_id, e.at("seed").get<std::uint64_t>(), e.at("cfg").get<SynthConfig>()});
        out.push_back(std::move(v));
    }
    return out;
}

inline std::vector<SliceSample> slice_all(std::span<const std::shared_ptr<const Volume>> vols) {
    std::vector<SliceSample> out;
    for (const auto& v : vols) {
        auto s = slice_volume(v);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

} // namespace macl
