// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs: synthesize the dataset, optionally pre-train and transfer,
// fine-tune on the labeled subset and evaluate on the held-out test split.
#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "macl/config.hpp"
#include "macl/train.hpp"

namespace macl {

struct ExperimentData {
    std::vector<VolumeRecord> plan;
    VolumeList volumes;
    DataSplit split;
};

// Splits already materialized volumes (for example loaded from disk).
inline ExperimentData experiment_data_from(const ExperimentConfig& cfg, std::vector<VolumeRecord> plan, VolumeList volumes) {
    ExperimentData d;
    d.plan = std::move(plan);
    d.volumes = std::move(volumes);
    d.split = split_volumes(d.volumes, cfg.dataset.val_volumes, cfg.dataset.test_volumes, cfg.seed);
    return d;
}

inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
    auto plan = plan_dataset(cfg.seed, cfg.dataset.volumes, cfg.synth);
    const auto vols = realize(plan);
    return experiment_data_from(cfg, std::move(plan), VolumeList(vols.begin(), vols.end()));
}

struct RunResult {
    MetricsReport report; // test split
    std::optional<Checkpoint> checkpoint;
    std::vector<StepLog> pretrain_log;
    FinetuneResult finetune;
    std::map<std::string, std::string> provenance;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Fine-tunes from `init` and evaluates on the test split.
inline RunResult finetune_and_evaluate(const ExperimentConfig& cfg, const ExperimentData& data, TransferResult init) {
    const SegSpec seg = cfg.seg_spec();
    const auto labeled = slice_all(select_labeled_volumes(data.split.train, cfg.finetune.label_fraction, cfg.seed));
    const auto val = slice_all(data.split.val);
    const auto test = slice_all(data.split.test);
    RunResult r;
    r.provenance = std::move(init.provenance);
    r.finetune = finetune(std::move(init.params), seg, labeled, val, cfg.finetune);
    r.report = evaluate(r.finetune.params, seg, test);
    r.report.metadata = {{"config_hash", content_hash(nlohmann::json(cfg))},
                         {"seed", cfg.seed},
                         {"best_epoch", r.finetune.best_epoch},
                         {"labeled_slices", labeled.size()},
                         {"test_slices", test.size()}};
    return r;
}

// Pre-trains on the training split (or starts from scratch) then fine-tunes and evaluates.
inline RunResult run_experiment(const ExperimentConfig& cfg, const ExperimentData& data, bool pretrained,
                                std::ostream* pretrain_csv = nullptr) {
    cfg.validate();
    TransferResult init;
    std::optional<Checkpoint> ckpt;
    std::vector<StepLog> log;
    if (pretrained) {
        const auto train = slice_all(data.split.train);
        auto p = pretrain(cfg.pretrain, train, pretrain_csv);
        init = transfer(p.checkpoint, cfg.seg_spec(), cfg.seed);
        ckpt = std::move(p.checkpoint);
        log = std::move(p.log);
    } else {
        init = scratch_init(cfg.seg_spec(), cfg.seed);
    }
    RunResult r = finetune_and_evaluate(cfg, data, std::move(init));
    r.report.metadata["checkpoint_id"] = ckpt ? hex64(ckpt->checksum()) : "scratch";
    r.checkpoint = std::move(ckpt);
    r.pretrain_log = std::move(log);
    return r;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, bool pretrained, std::ostream* pretrain_csv = nullptr) {
    return run_experiment(cfg, make_experiment_data(cfg), pretrained, pretrain_csv);
}

} // namespace macl
