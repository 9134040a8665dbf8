// SPDX-License-Identifier: Apache-2.0
//
// Pre-training (one- or two-stage), checkpoint transfer into a segmentation
// network, supervised fine-tuning and evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "macl/augment.hpp"
#include "macl/checkpoint.hpp"
#include "macl/losses.hpp"
#include "macl/metrics.hpp"
#include "macl/model.hpp"
#include "macl/optim.hpp"
#include "macl/synthdata.hpp"

namespace macl {

// ---------------------------------------------------------------------------
// Configuration

struct PretrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 16; // source slices per step; 2x rows after augmentation
    double lr0 = 0.1;
    double lr_min = 0.0;
    OptimizerKind optimizer = OptimizerKind::Sgd;
    double momentum = 0.9;
    double weight_decay = 0.0;
    LossWeights weights;
    double theta_pos = 0.05;
    double lambda = 0.25;
    MaclSpec model;
    std::size_t stages = 1;
    std::uint64_t seed = 0;
    AugmentConfig augment;

    void validate() const {
        if (epochs == 0) throw ConfigError("pretrain epochs must be > 0");
        if (batch_size == 0) throw ConfigError("pretrain batch_size must be > 0");
        if (!(lr0 > lr_min) || lr_min < 0.0) throw ConfigError("pretrain requires lr0 > lr_min >= 0");
        if (theta_pos < 0.0) throw ConfigError("theta_pos must be >= 0");
        if (stages != 1 && stages != 2) throw ConfigError("stages must be 1 or 2");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
        weights.validate();
        model.validate();
        augment.var.validate();
        down_factor(lambda);
        check_alignment(lambda, model.decoder.blocks);
    }
};

struct FinetuneConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 5;
    double lr0 = 5e-4;
    double lr_min = 5e-6;
    double label_fraction = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0) throw ConfigError("finetune epochs must be > 0");
        if (batch_size == 0) throw ConfigError("finetune batch_size must be > 0");
        if (!(lr0 > lr_min) || lr_min < 0.0) throw ConfigError("finetune requires lr0 > lr_min >= 0");
        if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("label_fraction must be in (0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"lr0", c.lr0},
         {"lr_min", c.lr_min},       {"optimizer", to_string(c.optimizer)},
         {"momentum", c.momentum},   {"weight_decay", c.weight_decay},
         {"weights", c.weights},     {"theta_pos", c.theta_pos},   {"lambda", c.lambda},
         {"model", c.model},         {"stages", c.stages},         {"seed", c.seed},
         {"augment", c.augment}};
}
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.optimizer = parse_optimizer_kind(j.value("optimizer", to_string(c.optimizer)));
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
    c.theta_pos = j.value("theta_pos", c.theta_pos);
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("model")) c.model = j.at("model").get<MaclSpec>();
    c.stages = j.value("stages", c.stages);
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
    j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr0", c.lr0},
         {"lr_min", c.lr_min}, {"label_fraction", c.label_fraction}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.label_fraction = j.value("label_fraction", c.label_fraction);
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Data splits

using VolumeList = std::vector<std::shared_ptr<const Volume>>;

struct DataSplit {
    VolumeList train, val, test;
};

// Volume-level split, so no slice of a held-out volume is ever seen in training.
inline DataSplit split_volumes(const VolumeList& vols, std::size_t n_val, std::size_t n_test, std::uint64_t seed) {
    if (n_val + n_test >= vols.size())
        throw ConfigError("split needs at least one training volume (" + std::to_string(vols.size()) + " volumes, " +
                          std::to_string(n_val) + " val, " + std::to_string(n_test) + " test)");
    std::vector<std::size_t> order(vols.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed ^ 0x5157A11D5EEDULL);
    rng.shuffle(order.begin(), order.end());
    DataSplit s;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& dst = i < n_test ? s.test : (i < n_test + n_val ? s.val : s.train);
        dst.push_back(vols[order[i]]);
    }
    return s;
}

// Seeded subset of round(fraction * n) volumes, at least one.
inline VolumeList select_labeled_volumes(const VolumeList& train, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("label_fraction must be in (0, 1]");
    if (train.empty()) throw ConfigError("no training volumes to label");
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size()))));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed ^ 0x1ABE1ED0ULL);
    rng.shuffle(order.begin(), order.end());
    order.resize(n);
    std::sort(order.begin(), order.end());
    VolumeList out;
    for (auto i : order) out.push_back(train[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Pre-training

struct StepLog {
    std::size_t step = 0;
    std::size_t stage = 1;
    LossBreakdown loss;
    double lr = 0.0;
};

inline void write_step_csv_header(std::ostream& os) { os << "step,Lg,Ld,LER,total,lr\n"; }

inline void write_step_csv(std::ostream& os, const StepLog& s) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.loss.global, s.loss.dense, s.loss.equivariant,
                  s.loss.total, s.lr);
    os << buf;
}

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> log;
};

struct AugmentedBatch {
    Tensor<float> I, V; // [2N, 1, H, W]
    PairLabelMatrix labels;
    std::vector<std::size_t> slice_indices;
};

// Rows 2i and 2i+1 are the two augmentations of the i-th sampled slice.
inline AugmentedBatch make_augmented_batch(std::span<const SliceSample> data, std::size_t n, double theta_pos,
                                           const AugmentConfig& aug, Rng& rng) {
    const BatchSpec b = sample_batch(data, n, rng);
    const std::size_t H = data.front().volume->height(), W = data.front().volume->width();
    AugmentedBatch out;
    out.I = Tensor<float>({2 * n, 1, H, W});
    out.V = Tensor<float>({2 * n, 1, H, W});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = b.samples[i];
        if (s.volume->height() != H || s.volume->width() != W) throw ShapeError("pretraining slices must share one size");
        Rng r = rng.fork(i);
        const auto q = augment_quad(s.image_tensor(), r, aug);
        const std::size_t hw = H * W;
        std::copy(q.I1.vec().begin(), q.I1.vec().end(), out.I.data() + (2 * i) * hw);
        std::copy(q.I2.vec().begin(), q.I2.vec().end(), out.I.data() + (2 * i + 1) * hw);
        std::copy(q.V1.vec().begin(), q.V1.vec().end(), out.V.data() + (2 * i) * hw);
        std::copy(q.V2.vec().begin(), q.V2.vec().end(), out.V.data() + (2 * i + 1) * hw);
    }
    out.labels = build_pair_labels(rows_for_batch(b), theta_pos);
    out.slice_indices = b.indices;
    return out;
}

namespace detail {

inline bool has_tag(const std::string& t, std::initializer_list<const char*> tags) {
    for (const char* x : tags)
        if (t == x) return true;
    return false;
}

} // namespace detail

using StepObserver = std::function<void(const StepLog&, const ParamStore<float>&)>;

// Trains the pre-training network. `csv` (optional) receives one row per step;
// `observe` (optional) sees the parameters after every update.
inline PretrainResult pretrain(const PretrainConfig& cfg, std::span<const SliceSample> data, std::ostream* csv = nullptr,
                               const StepObserver& observe = {}) {
    cfg.validate();
    if (data.empty()) throw ConfigError("pretraining dataset is empty");
    MaclNet<float> net(cfg.model, cfg.seed);
    Optimizer<float> opt({cfg.optimizer, cfg.momentum, cfg.weight_decay});
    Rng master(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

    const std::size_t n = std::min(cfg.batch_size, data.size());
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.size() / n);

    struct Stage {
        std::size_t epochs;
        LossWeights weights;
        ParamFilter<float> filter;
    };
    std::vector<Stage> stages;
    if (cfg.stages == 1) {
        stages.push_back({cfg.epochs, cfg.weights, {}});
    } else {
        // stage one: encoder path with the global loss; stage two: decoder path with the dense loss
        const std::size_t first = std::max<std::size_t>(1, (cfg.epochs + 1) / 2);
        const std::size_t second = std::max<std::size_t>(1, cfg.epochs - first);
        LossWeights w1 = cfg.weights, w2 = cfg.weights;
        w1.dense = w1.equivariant = 0.0;
        if (w1.global == 0.0) w1.global = 1.0;
        w2.global = w2.equivariant = 0.0;
        if (w2.dense == 0.0) w2.dense = 1.0;
        stages.push_back({first, w1, [](const Param<float>& p) {
                              return detail::has_tag(p.tag, {tag::encoder, tag::encoder_aux, tag::proj_img_dom, tag::proj_img_aux});
                          }});
        stages.push_back({second, w2, [](const Param<float>& p) {
                              return detail::has_tag(p.tag, {tag::decoder_partial, tag::proj_pix_aux});
                          }});
    }

    PretrainResult res;
    if (csv) write_step_csv_header(*csv);
    std::size_t global_step = 0;
    for (std::size_t si = 0; si < stages.size(); ++si) {
        const auto& st = stages[si];
        const std::size_t total = st.epochs * steps_per_epoch;
        ForwardRequest req;
        req.global = st.weights.global > 0.0;
        req.pixel = st.weights.dense > 0.0;
        req.features = st.weights.equivariant > 0.0;
        if (!req.global && !req.pixel && !req.features) throw ConfigError("all loss weights are zero");
        for (std::size_t step = 0; step < total; ++step, ++global_step) {
            const double lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
            Rng step_rng = master.fork(global_step);
            const std::string batch_state = step_rng.state();
            StepLog entry;
            try {
                const auto batch = make_augmented_batch(data, n, cfg.theta_pos, cfg.augment, step_rng);
                net.params().zero_grad();
                const auto out = net.forward(batch.I, batch.V, cfg.lambda, req);
                const auto loss = multi_level_loss(out, batch.labels, st.weights);
                backward(loss.total);
                opt.step(net.params(), lr, st.filter);
                net.update_ema();
                entry = {global_step, si + 1, loss.breakdown, lr};
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at step " + std::to_string(global_step) + " (stage " +
                                   std::to_string(si + 1) + ", batch rng state " + batch_state + ")");
            }
            if (csv) write_step_csv(*csv, entry);
            if (observe) observe(entry, net.params());
            res.log.push_back(entry);
        }
    }
    net.params().zero_grad();
    res.checkpoint = checkpoint_from(net.params());
    res.checkpoint.config = cfg;
    res.checkpoint.final_loss = res.log.back().loss;
    res.checkpoint.rng_state = master.state();
    return res;
}

// ---------------------------------------------------------------------------
// Transfer

struct TransferResult {
    ParamStore<float> params;
    std::map<std::string, std::string> provenance; // tensor name -> "copied" | "fresh"
};

inline TransferResult scratch_init(const SegSpec& seg, std::uint64_t seed) {
    TransferResult r{build_segmentation<float>(seg, seed), {}};
    for (const auto& p : r.params.entries()) r.provenance[p.name] = "fresh";
    return r;
}

// Copies the encoder and the first N decoder blocks; the rest stays freshly initialized.
inline TransferResult transfer(const Checkpoint& ckpt, const SegSpec& seg, std::uint64_t seed) {
    const MaclSpec src = ckpt.config.at("model").get<MaclSpec>();
    TransferResult r = scratch_init(seg, seed);
    std::vector<std::string> prefixes{"encoder."};
    for (std::size_t b = 0; b < src.decoder.blocks; ++b) prefixes.push_back("decoder.block" + std::to_string(b) + ".");
    auto copied = [&](const std::string& name) {
        return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.rfind(p, 0) == 0; });
    };
    std::string diffs;
    for (const auto& p : r.params.entries()) {
        if (!copied(p.name)) continue;
        const NamedTensor* t = ckpt.find(p.name);
        if (!t)
            diffs += "\n  " + p.name + ": missing in checkpoint, model " + shape_str(p.var.value().shape());
        else if (t->value.shape() != p.var.value().shape())
            diffs += "\n  " + p.name + ": checkpoint " + shape_str(t->value.shape()) + " vs model " + shape_str(p.var.value().shape());
    }
    if (!(src.encoder == seg.encoder)) diffs = "\n  encoder spec differs" + diffs;
    if (!diffs.empty()) throw TransferError("checkpoint does not fit the segmentation model:" + diffs);
    for (auto& p : r.params.entries()) {
        if (!copied(p.name)) continue;
        p.var.mutable_value() = ckpt.find(p.name)->value;
        r.provenance[p.name] = "copied";
    }
    return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation

inline Tensor<float> stack_images(std::span<const SliceSample> s, std::span<const std::size_t> idx) {
    const std::size_t H = s.front().volume->height(), W = s.front().volume->width();
    Tensor<float> x({idx.size(), 1, H, W});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto img = s[idx[i]].image();
        std::copy(img.begin(), img.end(), x.data() + i * H * W);
    }
    return x;
}

// Argmax label maps, one per slice.
inline std::vector<std::vector<std::uint8_t>> predict(const ParamStore<float>& ps, const SegSpec& spec,
                                                      std::span<const SliceSample> slices, std::size_t chunk = 16) {
    NoGradGuard guard;
    std::vector<std::vector<std::uint8_t>> out;
    for (std::size_t start = 0; start < slices.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(slices.size(), start + chunk); ++i) idx.push_back(i);
        const auto logits = segmentation_forward(ps, spec, Var<float>(stack_images(slices, idx))).value();
        const std::size_t K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::vector<std::uint8_t> lab(HW);
            for (std::size_t p = 0; p < HW; ++p) {
                std::size_t best = 0;
                for (std::size_t k = 1; k < K; ++k)
                    if (logits[(b * K + k) * HW + p] > logits[(b * K + best) * HW + p]) best = k;
                lab[p] = static_cast<std::uint8_t>(best);
            }
            out.push_back(std::move(lab));
        }
    }
    return out;
}

inline MetricsReport evaluate(const ParamStore<float>& ps, const SegSpec& spec, std::span<const SliceSample> slices) {
    MetricsAccumulator acc(spec.num_classes);
    const auto preds = predict(ps, spec, slices);
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const auto& v = *slices[i].volume;
        acc.add(preds[i], slices[i].mask(), v.height(), v.width(), v.spacing[1]);
    }
    return acc.report();
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_dsc = 0.0;
};

struct FinetuneResult {
    ParamStore<float> params; // best on validation
    double best_val_dsc = -1.0;
    std::size_t best_epoch = 0;
    std::vector<EpochLog> history;
    std::vector<std::string> warnings;
};

inline FinetuneResult finetune(ParamStore<float> params, const SegSpec& spec, std::span<const SliceSample> labeled,
                               std::span<const SliceSample> val, const FinetuneConfig& cfg) {
    cfg.validate();
    if (labeled.empty()) throw ConfigError("fine-tuning needs labeled slices");
    FinetuneResult res;
    {
        std::vector<bool> seen(spec.num_classes, false);
        for (const auto& s : labeled)
            for (auto l : s.mask()) {
                if (l >= spec.num_classes) throw ConfigError("label " + std::to_string(l) + " exceeds num_classes");
                seen[l] = true;
            }
        if (std::count(seen.begin(), seen.end(), true) < 2)
            res.warnings.push_back("labeled data contains a single class; training proceeds");
    }
    Optimizer<float> opt({OptimizerKind::Adam});
    Rng rng(cfg.seed ^ 0xF17E7E57ULL);
    const std::size_t n = labeled.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = cfg.epochs * steps_per_epoch;
    const std::size_t HW = labeled.front().volume->height() * labeled.front().volume->width();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::size_t step = 0;
    auto snapshot = [](const ParamStore<float>& ps) {
        std::vector<Tensor<float>> v;
        for (const auto& p : ps.entries()) v.push_back(p.var.value());
        return v;
    };
    std::vector<Tensor<float>> best = snapshot(params);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
            std::vector<std::uint8_t> labels(idx.size() * HW);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const auto m = labeled[idx[i]].mask();
                std::copy(m.begin(), m.end(), labels.begin() + i * HW);
            }
            params.zero_grad();
            const auto loss = nn::cross_entropy(segmentation_forward(params, spec, Var<float>(stack_images(labeled, idx))), labels);
            if (!std::isfinite(loss.value()[0])) throw NumericError("fine-tuning loss is not finite at step " + std::to_string(step));
            backward(loss);
            opt.step(params, cosine_lr(step, total, cfg.lr0, cfg.lr_min));
            loss_sum += loss.value()[0];
        }
        EpochLog log{epoch, loss_sum / static_cast<double>(steps_per_epoch), 0.0};
        const bool last = epoch == cfg.epochs;
        if (!val.empty()) {
            log.val_dsc = evaluate(params, spec, val).mean.dsc;
            if (log.val_dsc > res.best_val_dsc) {
                res.best_val_dsc = log.val_dsc;
                res.best_epoch = epoch;
                best = snapshot(params);
            }
        } else if (last) {
            res.best_epoch = epoch;
            best = snapshot(params);
        }
        res.history.push_back(log);
    }
    params.zero_grad();
    for (std::size_t i = 0; i < best.size(); ++i) params.entries()[i].var.mutable_value() = best[i];
    res.params = std::move(params);
    return res;
}

} // namespace macl
