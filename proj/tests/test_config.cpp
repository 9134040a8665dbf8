#include <catch_amalgamated.hpp>

#include "macl/config.hpp"
#include "macl/ablation.hpp"

using namespace macl;
using nlohmann::json;

TEST_CASE("profiles carry the desk and paper recipes") {
    const auto d = desk_profile();
    CHECK(d.synth.size == 64);
    CHECK(d.pretrain.model.encoder.levels == 4);
    CHECK(d.pretrain.model.decoder.blocks == 2);
    CHECK(d.pretrain.lambda == 0.25);
    CHECK(d.pretrain.epochs == 5);
    CHECK(d.finetune.epochs == 30);
    CHECK(d.finetune.label_fraction == 0.1);
    const auto p = paper_profile();
    CHECK(p.pretrain.epochs == 100);
    CHECK(p.pretrain.optimizer == OptimizerKind::Sgd);
    CHECK(p.pretrain.lr0 == 0.1);
    CHECK(p.pretrain.momentum == 0.9);
    CHECK(p.pretrain.weights.global == 1.0);
    CHECK(p.pretrain.weights.dense == 0.5);
    CHECK(p.pretrain.weights.equivariant == 1.0);
    CHECK(p.pretrain.weights.tau == 0.1);
    CHECK(p.finetune.epochs == 100);
    CHECK(p.finetune.batch_size == 5);
    CHECK(p.finetune.lr0 == 5e-4);
    CHECK(p.finetune.lr_min == 5e-6);
    CHECK_THROWS_AS(profile_by_name("gpu"), ConfigError);
}

TEST_CASE("environment keys map to json pointers") {
    const auto patch = env_overrides({{"MACL_SEED", "7"},
                                      {"MACL_PRETRAIN__LR0", "0.01"},
                                      {"MACL_PRETRAIN__MODEL__NORM", "instance"},
                                      {"HOME", "/root"},
                                      {"MACL_", "x"}});
    CHECK(patch.at("seed") == 7);
    CHECK(patch.at("pretrain").at("lr0") == 0.01);
    CHECK(patch.at("pretrain").at("model").at("norm") == "instance");
    CHECK(patch.size() == 2);
}

TEST_CASE("precedence is profile < file < env < flags") {
    const json file = {{"seed", 1}, {"pretrain", {{"epochs", 2}, {"lr0", 0.5}}}};
    const json env = env_overrides({{"MACL_SEED", "2"}, {"MACL_PRETRAIN__EPOCHS", "3"}});
    const json flags = {{"seed", 3}};
    const auto c = resolve_config(file, env, flags);
    CHECK(c.seed == 3);
    CHECK(c.pretrain.epochs == 3);
    CHECK(c.pretrain.lr0 == 0.5);
    CHECK(c.pretrain.seed == 3);
    CHECK(c.finetune.seed == 3);
    CHECK(c.finetune.epochs == desk_profile().finetune.epochs);

    const auto p = resolve_config(json::object(), json::object(), {{"profile", "paper"}});
    CHECK(p.profile == "paper");
    CHECK(p.pretrain.epochs == 100);
    const auto q = resolve_config({{"profile", "paper"}}, json::object(), {{"profile", "desk"}});
    CHECK(q.pretrain.epochs == 5);
}

TEST_CASE("invalid configurations are rejected") {
    const json none = json::object();
    CHECK_THROWS_AS(resolve_config({{"pretrain", {{"lambda", 0.5}}}}, none, none), Error);
    CHECK_THROWS_AS(resolve_config({{"pretrain", {{"weights", {{"tau", 0.0}}}}}}, none, none), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"pretrain", {{"weights", {{"equivariant", 0.0}}}}}}, none, none), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"pretran", {{"epochs", 1}}}}, none, none), ConfigError);
    CHECK_THROWS_AS(resolve_config(none, env_overrides({{"MACL_FINETUNE__EPOCH", "3"}}), none), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"pretrain", {{"epochs", "many"}}}}, none, none), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"dataset", {{"volumes", 4}}}}, none, none), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"synth", {{"size", 60}}}}, none, none), ConfigError);
}

TEST_CASE("config json round trip and content hash") {
    auto c = desk_profile();
    c.seed = 11;
    c.apply_seed();
    c.pretrain.weights.dense = 0.3;
    const json j = c;
    const auto back = j.get<ExperimentConfig>();
    CHECK(json(back) == j);
    CHECK(content_hash(j) == content_hash(json(back)));
    CHECK(content_hash(j).size() == 16);
    auto d = c;
    d.seed = 12;
    CHECK(content_hash(json(d)) != content_hash(j));
}

TEST_CASE("ablation variants edit the expected fields") {
    const auto base = desk_profile();
    auto g = base;
    variants::global_only().apply(g);
    CHECK(g.pretrain.weights.dense == 0.0);
    CHECK(g.pretrain.weights.equivariant == 0.0);
    CHECK(g.pretrain.model.decoder.blocks == 0);
    CHECK(g.pretrain.lambda == 1.0);
    g.validate();

    const auto comps = component_sweep();
    REQUIRE(comps.size() == 4);
    auto dec = base, ler = base, full = base;
    comps[1].apply(dec);
    comps[2].apply(ler);
    comps[3].apply(full);
    CHECK(dec.pretrain.weights.dense == 0.0);
    CHECK(dec.pretrain.weights.equivariant == 0.0);
    CHECK(dec.pretrain.model.decoder.blocks == base.pretrain.model.decoder.blocks);
    CHECK(ler.pretrain.weights.equivariant == base.pretrain.weights.equivariant);
    CHECK(ler.pretrain.weights.dense == 0.0);
    CHECK(json(full) == json(base));

    for (const auto& v : block_sweep()) {
        auto c = base;
        v.apply(c);
        CHECK(c.pretrain.lambda == 1.0 / static_cast<double>(std::size_t{1} << c.pretrain.model.decoder.blocks));
        c.validate();
    }
    CHECK_THROWS_AS(sweep_by_name("everything"), ConfigError);
}

TEST_CASE("sign test is the one-sided exact binomial over non-tied pairs") {
    const auto a = sign_test({0.9, 0.8, 0.7, 0.6, 0.5}, {0.1, 0.1, 0.1, 0.1, 0.1});
    CHECK(a.wins == 5);
    CHECK(a.p_value == 1.0 / 32.0);
    const auto b = sign_test({0.9, 0.8, 0.7, 0.6, 0.1}, {0.1, 0.1, 0.1, 0.1, 0.5});
    CHECK(b.wins == 4);
    CHECK(b.losses == 1);
    CHECK(b.p_value == 6.0 / 32.0);
    const auto c = sign_test({0.5, 0.6}, {0.5, 0.1});
    CHECK(c.ties == 1);
    CHECK(c.p_value == 0.5);
    CHECK_THROWS(sign_test({0.1}, {0.1, 0.2}));
}
