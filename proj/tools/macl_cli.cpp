// SPDX-License-Identifier: Apache-2.0
//
// macl: dataset generation, pre-training, fine-tuning, report comparison,
// ablation sweeps and self-test.
//
// Exit codes: 0 success, 1 other failure, 2 configuration / alignment error, 3 numeric abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "macl/macl.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace macl;

namespace {

struct CommonOptions {
    std::string config_path;
    std::string profile;
    std::string out = "macl_out";
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "JSON experiment config");
    cmd->add_option("--profile", o.profile, "Named defaults: desk | paper")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--seed", o.seed, "Seed for every random stream");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_flag("--deterministic", o.deterministic, "Single-threaded, bit-reproducible execution");
}

ExperimentConfig resolve(const CommonOptions& o) {
    const nlohmann::json file = o.config_path.empty() ? nlohmann::json::object() : read_json_file(o.config_path);
    nlohmann::json flags = nlohmann::json::object();
    if (!o.profile.empty()) flags["profile"] = o.profile;
    if (o.seed) flags["seed"] = *o.seed;
    if (o.deterministic) flags["deterministic"] = true;
    return resolve_config(file, env_overrides(process_env(environ)), flags);
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + p.string());
    os << s;
}

// Config snapshot and content hash beside every command's outputs.
void write_provenance(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg, nlohmann::json extra = {}) {
    fs::create_directories(dir);
    const nlohmann::json c = cfg;
    nlohmann::json p = {{"command", command}, {"config", c}, {"config_hash", content_hash(c)}};
    if (extra.is_object()) p.update(extra);
    write_text(dir / "provenance.json", p.dump(2) + "\n");
}

ExperimentData load_or_make(const ExperimentConfig& cfg, const std::string& data_dir) {
    if (data_dir.empty()) return make_experiment_data(cfg);
    std::vector<VolumeRecord> plan;
    const auto vols = load_dataset(data_dir, &plan);
    return experiment_data_from(cfg, std::move(plan), VolumeList(vols.begin(), vols.end()));
}

std::string report_table(const std::vector<std::pair<std::string, MetricsReport>>& reports) {
    std::ostringstream os;
    os << std::left << std::setw(28) << "Run" << std::right << std::setw(10) << "DSC(%)" << std::setw(10) << "JC(%)"
       << std::setw(10) << "HD95" << std::setw(10) << "ASD" << std::setw(8) << "N" << '\n'
       << std::string(76, '-') << '\n';
    for (const auto& [name, r] : reports)
        os << std::left << std::setw(28) << name << std::right << std::fixed << std::setprecision(2) << std::setw(10)
           << 100.0 * r.mean.dsc << std::setw(10) << 100.0 * r.mean.jc << std::setw(10) << r.mean.hd95 << std::setw(10)
           << r.mean.asd << std::setw(8) << r.n_samples << '\n';
    return os.str();
}

int cmd_gen(const CommonOptions& o) {
    const auto cfg = resolve(o);
    const fs::path out = o.out;
    const auto plan = plan_dataset(cfg.seed, cfg.dataset.volumes, cfg.synth);
    save_dataset(out, plan);
    write_provenance(out, "gen", cfg);
    std::cout << "wrote " << plan.size() << " volumes to " << out << '\n';
    return 0;
}

int cmd_pretrain(const CommonOptions& o, const std::string& data_dir) {
    const auto cfg = resolve(o);
    const fs::path out = o.out;
    fs::create_directories(out);
    const auto data = load_or_make(cfg, data_dir);
    const auto train = slice_all(data.split.train);
    std::ofstream csv(out / "pretrain_loss.csv");
    if (!csv) throw IoError("cannot write " + (out / "pretrain_loss.csv").string());
    const auto r = pretrain(cfg.pretrain, train, &csv);
    save_checkpoint(out / "checkpoint", r.checkpoint);
    char sum[17];
    std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(r.checkpoint.checksum()));
    write_provenance(out, "pretrain", cfg, {{"checkpoint_checksum", sum}, {"train_slices", train.size()}});
    std::cout << "pretrained " << r.log.size() << " steps on " << train.size() << " slices; final loss " << r.checkpoint.final_loss.total
              << "; checkpoint " << (out / "checkpoint").string() << " (" << sum << ")\n";
    return 0;
}

int cmd_finetune(const CommonOptions& o, const std::string& init, const std::string& data_dir) {
    const auto cfg = resolve(o);
    const fs::path out = o.out;
    fs::create_directories(out);
    const auto data = load_or_make(cfg, data_dir);
    TransferResult start;
    std::string source = "scratch";
    if (init == "scratch") {
        start = scratch_init(cfg.seg_spec(), cfg.seed);
    } else {
        const auto ckpt = load_checkpoint(init);
        start = transfer(ckpt, cfg.seg_spec(), cfg.seed);
        char sum[17];
        std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(ckpt.checksum()));
        source = sum;
    }
    auto provenance = start.provenance;
    RunResult r = finetune_and_evaluate(cfg, data, std::move(start));
    r.report.metadata["checkpoint_id"] = source;

    Checkpoint model = checkpoint_from(r.finetune.params);
    model.config = cfg;
    save_checkpoint(out / "model", model);
    write_text(out / "report.json", nlohmann::json(r.report).dump(2) + "\n");
    write_text(out / "report.csv", report_csv(r.report));
    std::ostringstream hist;
    hist << "epoch,train_loss,val_dsc\n";
    for (const auto& e : r.finetune.history) hist << e.epoch << ',' << e.train_loss << ',' << e.val_dsc << '\n';
    write_text(out / "finetune_history.csv", hist.str());
    write_provenance(out, "finetune", cfg, {{"init", init}, {"transfer", provenance}});
    for (const auto& w : r.finetune.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << report_table({{init == "scratch" ? "scratch" : "pretrained", r.report}});
    return 0;
}

int cmd_compare(const std::vector<std::string>& reports, const std::string& csv_path) {
    std::vector<std::pair<std::string, MetricsReport>> rows;
    for (const auto& p : reports) {
        const fs::path path = fs::is_directory(p) ? fs::path(p) / "report.json" : fs::path(p);
        rows.emplace_back(fs::path(p).filename().string(), read_json_file(path).get<MetricsReport>());
    }
    std::cout << report_table(rows);
    if (!csv_path.empty()) {
        std::ostringstream os;
        os << "run,dsc,jc,hd95,asd,n_samples\n";
        os.precision(9);
        for (const auto& [name, r] : rows)
            os << name << ',' << r.mean.dsc << ',' << r.mean.jc << ',' << r.mean.hd95 << ',' << r.mean.asd << ',' << r.n_samples << '\n';
        write_text(csv_path, os.str());
    }
    return 0;
}

int cmd_ablate(const CommonOptions& o, const std::vector<std::string>& sweeps, std::size_t n_seeds) {
    const auto cfg = resolve(o);
    const fs::path out = o.out;
    fs::create_directories(out);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + i);
    std::ofstream csv(out / "ablation.csv");
    if (!csv) throw IoError("cannot write " + (out / "ablation.csv").string());
    write_ablation_csv_header(csv);
    std::ostringstream tables;
    for (const auto& name : sweeps) {
        const auto vs = sweep_by_name(name);
        const auto rows = run_sweep(cfg, name, vs, seeds, [&](const AblationRow& r) {
            write_ablation_csv(csv, r);
            csv.flush();
            std::cerr << name << " " << r.variant << " seed " << r.seed << ": dsc " << r.metrics.dsc << " (" << std::fixed
                      << std::setprecision(1) << r.seconds << "s)\n"
                      << std::defaultfloat;
        });
        tables << "== " << name << '\n' << ablation_table(rows);
        if (vs.size() > 1) {
            const auto ref = dsc_by_seed(rows, vs.front().name);
            for (std::size_t i = 1; i < vs.size(); ++i) {
                const auto t = sign_test(dsc_by_seed(rows, vs[i].name), ref);
                tables << "  " << vs[i].name << " vs " << vs.front().name << ": " << t.wins << " wins, " << t.losses << " losses, "
                       << t.ties << " ties, one-sided sign test p = " << t.p_value << '\n';
            }
        }
    }
    write_text(out / "ablation_table.txt", tables.str());
    write_provenance(out, "ablate", cfg, {{"sweeps", sweeps}, {"seeds", seeds}});
    std::cout << tables.str();
    return 0;
}

int cmd_selftest(bool quick) {
    selftest::Options opt;
    if (quick) {
        opt.oracle_instances = 100;
        opt.gradient_instances = 10;
    }
    const bool ok = selftest::run_all(opt, std::cout);
    std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-level asymmetric contrastive pre-training for segmentation"};
    app.require_subcommand(1);

    CommonOptions gen_o, pre_o, ft_o, abl_o;
    std::string pre_data, ft_data, ft_init, compare_csv;
    std::vector<std::string> compare_reports, sweeps{"baseline"};
    std::size_t n_seeds = 5;
    bool quick = false;

    auto* gen = app.add_subcommand("gen", "Write a synthetic dataset (manifest + raw volumes)");
    add_common(gen, gen_o);

    auto* pre = app.add_subcommand("pretrain", "Pre-train on the training split; writes checkpoint/ and pretrain_loss.csv");
    add_common(pre, pre_o);
    pre->add_option("--data", pre_data, "Dataset directory from `gen` (default: synthesize from the config)");

    auto* ft = app.add_subcommand("finetune", "Fine-tune from a checkpoint or from scratch and evaluate on the test split");
    add_common(ft, ft_o);
    ft->add_option("init", ft_init, "Checkpoint directory or \"scratch\"")->required();
    ft->add_option("--data", ft_data, "Dataset directory from `gen` (default: synthesize from the config)");

    auto* cmp = app.add_subcommand("compare", "Tabulate report.json files (or run directories)");
    cmp->add_option("reports", compare_reports, "report.json paths or finetune output directories")->required();
    cmp->add_option("--csv", compare_csv, "Also write the comparison as CSV");

    auto* abl = app.add_subcommand("ablate", "Run ablation sweeps over seeds; writes ablation.csv and ablation_table.txt");
    add_common(abl, abl_o);
    abl->add_option("--sweeps", sweeps, "baseline | components | blocks | lambda2 | modes | stages")->delimiter(',');
    abl->add_option("--seeds", n_seeds, "Seeds per cell (seed, seed+1, ...)")->check(CLI::PositiveNumber);

    auto* st = app.add_subcommand("selftest", "Oracle, gradient, alignment, reduction and metric checks");
    st->add_flag("--quick", quick, "Fewer random instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen(gen_o);
        if (*pre) return cmd_pretrain(pre_o, pre_data);
        if (*ft) return cmd_finetune(ft_o, ft_init, ft_data);
        if (*cmp) return cmd_compare(compare_reports, compare_csv);
        if (*abl) return cmd_ablate(abl_o, sweeps, n_seeds);
        if (*st) return cmd_selftest(quick);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const AlignmentError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 1;
    }
    return 0;
}
