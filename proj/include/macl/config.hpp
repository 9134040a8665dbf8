// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: named profiles, JSON file, MACL_ environment
// overrides and command-line overrides, applied in that order.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"
#include "macl/error.hpp"
#include "macl/synthdata.hpp"
#include "macl/train.hpp"

namespace macl {

struct DatasetConfig {
    std::size_t volumes = 12;
    std::size_t val_volumes = 1;
    std::size_t test_volumes = 3;

    void validate() const {
        if (val_volumes + test_volumes >= volumes) throw ConfigError("dataset needs at least one training volume");
    }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
    j = {{"volumes", c.volumes}, {"val_volumes", c.val_volumes}, {"test_volumes", c.test_volumes}};
}
inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
    c.volumes = j.value("volumes", c.volumes);
    c.val_volumes = j.value("val_volumes", c.val_volumes);
    c.test_volumes = j.value("test_volumes", c.test_volumes);
}

struct ExperimentConfig {
    std::string profile = "desk";
    std::uint64_t seed = 0;
    bool deterministic = true;
    SynthConfig synth;
    DatasetConfig dataset;
    PretrainConfig pretrain;
    FinetuneConfig finetune;

    // The single seed drives data generation, splits, pre-training and fine-tuning.
    void apply_seed() {
        pretrain.seed = seed;
        finetune.seed = seed;
    }

    SegSpec seg_spec() const {
        SegSpec s;
        s.encoder = pretrain.model.encoder;
        s.num_classes = synth.classes + 1;
        return s;
    }

    void validate() const {
        synth.validate();
        dataset.validate();
        pretrain.validate();
        finetune.validate();
        const std::size_t need = std::size_t{1} << (pretrain.model.encoder.levels - 1);
        const std::size_t dom = static_cast<std::size_t>(static_cast<double>(synth.size) * pretrain.lambda);
        if (synth.size % need != 0 || dom % need != 0)
            throw ConfigError("synth size " + std::to_string(synth.size) + " with lambda " + std::to_string(pretrain.lambda) +
                              " does not fit an encoder with " + std::to_string(pretrain.model.encoder.levels) + " levels");
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"profile", c.profile},   {"seed", c.seed},         {"deterministic", c.deterministic}, {"synth", c.synth},
         {"dataset", c.dataset},   {"pretrain", c.pretrain}, {"finetune", c.finetune}};
}
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    c.profile = j.value("profile", c.profile);
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<DatasetConfig>();
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
    if (j.contains("finetune")) c.finetune = j.at("finetune").get<FinetuneConfig>();
}

// Desk scale: 16x64x64 volumes, L=4, 16 base channels, N=2, 5 pre-training and 30 fine-tuning epochs,
// Adam at 3e-4 and loss weights {1, 0.5, 0.1}.
inline ExperimentConfig desk_profile() {
    ExperimentConfig c;
    c.profile = "desk";
    c.synth.classes = 2;
    c.pretrain.epochs = 5;
    c.pretrain.batch_size = 16;
    c.pretrain.optimizer = OptimizerKind::Adam;
    c.pretrain.lr0 = 3e-4;
    c.pretrain.lr_min = 0.0;
    c.pretrain.model.encoder.levels = 4;
    c.pretrain.model.encoder.base_channels = 16;
    c.pretrain.model.decoder.blocks = 2;
    c.pretrain.lambda = 0.25;
    c.pretrain.weights.equivariant = 0.1;
    c.finetune.epochs = 30;
    c.finetune.label_fraction = 0.1;
    return c;
}

// Full recipe: 100 pre-training epochs, batch 16, SGD from 0.1 decayed to 0, loss weights {1, 0.5, 1};
// fine-tuning 100 epochs.
inline ExperimentConfig paper_profile() {
    ExperimentConfig c = desk_profile();
    c.profile = "paper";
    c.pretrain.epochs = 100;
    c.pretrain.batch_size = 16;
    c.pretrain.optimizer = OptimizerKind::Sgd;
    c.pretrain.momentum = 0.9;
    c.pretrain.lr0 = 0.1;
    c.pretrain.lr_min = 0.0;
    c.finetune.epochs = 100;
    c.finetune.batch_size = 5;
    c.finetune.lr0 = 5e-4;
    c.finetune.lr_min = 5e-6;
    c.pretrain.weights = LossWeights{};
    return c;
}

inline ExperimentConfig profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw ConfigError("unknown profile '" + name + "' (expected desk|paper)");
}

inline constexpr const char* kEnvPrefix = "MACL_";

// MACL_SEED=3 sets /seed; MACL_PRETRAIN__LR0=0.01 sets /pretrain/lr0. Values parse as JSON when possible.
inline nlohmann::json env_overrides(const std::map<std::string, std::string>& env) {
    nlohmann::json patch = nlohmann::json::object();
    const std::string prefix = kEnvPrefix;
    for (const auto& [key, raw] : env) {
        if (key.rfind(prefix, 0) != 0 || key.size() == prefix.size()) continue;
        std::string path = key.substr(prefix.size());
        std::transform(path.begin(), path.end(), path.begin(), [](unsigned char ch) { return std::tolower(ch); });
        std::string pointer;
        for (std::size_t pos = 0;;) {
            const auto next = path.find("__", pos);
            pointer += "/" + path.substr(pos, next - pos);
            if (next == std::string::npos) break;
            pos = next + 2;
        }
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        patch[nlohmann::json::json_pointer(pointer)] = value;
    }
    return patch;
}

inline std::map<std::string, std::string> process_env(char** envp) {
    std::map<std::string, std::string> out;
    for (char** e = envp; e && *e; ++e) {
        const std::string kv = *e;
        const auto eq = kv.find('=');
        if (eq != std::string::npos) out[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return out;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
}

// Resolves file < env < flags on top of the selected profile's defaults.
// Every key in `given` must exist in `known`; objects are compared recursively.
inline void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& path = "") {
    if (!given.is_object() || !known.is_object()) return;
    for (const auto& [k, v] : given.items()) {
        if (!known.contains(k)) throw ConfigError("unknown config key " + path + "/" + k);
        reject_unknown_keys(v, known.at(k), path + "/" + k);
    }
}

inline ExperimentConfig resolve_config(const nlohmann::json& file, const nlohmann::json& env, const nlohmann::json& flags) {
    std::string profile = "desk";
    for (const auto* layer : {&file, &env, &flags})
        if (layer->is_object() && layer->contains("profile")) profile = layer->at("profile").get<std::string>();
    nlohmann::json merged = profile_by_name(profile);
    for (const auto* layer : {&file, &env, &flags})
        if (layer->is_object()) merged.merge_patch(*layer);
    merged["profile"] = profile;
    ExperimentConfig c;
    try {
        c = merged.get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    reject_unknown_keys(merged, nlohmann::json(c));
    c.apply_seed();
    c.validate();
    return c;
}

inline std::string content_hash(const nlohmann::json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace macl
