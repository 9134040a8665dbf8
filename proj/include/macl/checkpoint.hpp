// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json (tensor index, config snapshot, loss
// breakdown, RNG state) plus params.f32, one little-endian float32 blob.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "macl/error.hpp"
#include "macl/losses.hpp"
#include "macl/params.hpp"
#include "macl/synthdata.hpp"

namespace macl {

inline constexpr const char* kCheckpointFormat = "macl-ckpt-v1";

struct NamedTensor {
    std::string name;
    std::string tag;
    Tensor<float> value;
};

struct Checkpoint {
    std::vector<NamedTensor> tensors; // insertion order of the source store
    nlohmann::json config;            // snapshot of the producing configuration
    LossBreakdown final_loss;
    std::string rng_state;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    // Same FNV-1a scheme as ParamStore::checksum.
    std::uint64_t checksum(const std::string& tag_filter = {}) const {
        ParamStore<float> ps;
        for (const auto& t : tensors) ps.add(t.name, t.tag, t.value, false);
        return ps.checksum(tag_filter);
    }
};

inline Checkpoint checkpoint_from(const ParamStore<float>& ps) {
    Checkpoint c;
    for (const auto& p : ps.entries()) c.tensors.push_back({p.name, p.tag, p.var.value()});
    return c;
}

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
    j = {{"total", b.total}, {"global", b.global}, {"dense", b.dense}, {"equivariant", b.equivariant}};
}
inline void from_json(const nlohmann::json& j, LossBreakdown& b) {
    b.total = j.at("total").get<double>();
    b.global = j.at("global").get<double>();
    b.dense = j.at("dense").get<double>();
    b.equivariant = j.at("equivariant").get<double>();
}

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c) {
    std::filesystem::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    std::vector<float> blob;
    for (const auto& t : c.tensors) {
        index.push_back({{"name", t.name},
                         {"tag", t.tag},
                         {"shape", t.value.shape()},
                         {"dtype", "float32"},
                         {"offset", blob.size() * sizeof(float)},
                         {"count", t.value.numel()}});
        blob.insert(blob.end(), t.value.vec().begin(), t.value.vec().end());
    }
    detail::write_raw_le(dir / "params.f32", std::span<const float>(blob));
    nlohmann::json m = {{"format", kCheckpointFormat},
                        {"byte_order", "little"},
                        {"blob", "params.f32"},
                        {"tensors", index},
                        {"config", c.config},
                        {"final_loss", c.final_loss},
                        {"rng_state", c.rng_state},
                        {"checksum", c.checksum()}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << m.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("missing checkpoint manifest in " + dir.string());
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad checkpoint manifest: ") + e.what());
    }
    if (m.value("format", "") != kCheckpointFormat) throw IoError("unsupported checkpoint format in " + dir.string());
    std::size_t total = 0;
    for (const auto& t : m.at("tensors")) total += t.at("count").get<std::size_t>();
    const auto blob = detail::read_raw_le<float>(dir / m.value("blob", "params.f32"), total);
    Checkpoint c;
    for (const auto& t : m.at("tensors")) {
        const auto off = t.at("offset").get<std::size_t>() / sizeof(float);
        const auto n = t.at("count").get<std::size_t>();
        if (off + n > blob.size()) throw IoError("checkpoint tensor " + t.at("name").get<std::string>() + " out of range");
        Tensor<float> v(t.at("shape").get<Shape>(), std::vector<float>(blob.begin() + off, blob.begin() + off + n));
        c.tensors.push_back({t.at("name").get<std::string>(), t.at("tag").get<std::string>(), std::move(v)});
    }
    c.config = m.value("config", nlohmann::json::object());
    c.final_loss = m.at("final_loss").get<LossBreakdown>();
    c.rng_state = m.value("rng_state", "");
    if (m.contains("checksum") && m.at("checksum").get<std::uint64_t>() != c.checksum())
        throw IoError("checkpoint checksum mismatch in " + dir.string());
    return c;
}

} // namespace macl
