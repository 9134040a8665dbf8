#include <catch_amalgamated.hpp>

#include <fstream>
#include <numeric>
#include <sstream>

#include "macl/losses.hpp"
#include "macl/oracle.hpp"
#include "support.hpp"

using namespace macl;
using namespace macl::testing;
using Catch::Approx;

TEST_CASE("sim examples", "[losses]") {
    const std::vector<double> u{0.3, -1.2, 2.0}, neg{-0.3, 1.2, -2.0};
    const std::vector<double> e1{1, 0, 0}, e2{0, 1, 0};
    CHECK(sim<double>(u, u) == Approx(1.0).margin(1e-12));
    CHECK(sim<double>(e1, e2) == 0.0);
    CHECK(sim<double>(u, neg) == Approx(-1.0).margin(1e-12));
    const std::vector<double> zero{0, 0, 0};
    CHECK(std::isfinite(sim<double>(zero, u)));
}

TEST_CASE("global loss hand cases", "[losses]") {
    SECTION("identical vectors with a single sibling give zero") {
        Tensor<double> z({2, 3}, std::vector<double>{1, 2, 3, 1, 2, 3});
        const auto labels = PairLabelMatrix::siblings_only(2);
        CHECK(global_contrastive_loss(z, z, labels, 0.1).loss == Approx(0.0).margin(1e-12));
        CHECK(oracle::global_loss_bruteforce(z, z, labels, 0.1) == Approx(0.0).margin(1e-12));
    }
    SECTION("e1/e2 configuration") {
        const auto z = e1e2_rows();
        const auto labels = PairLabelMatrix::siblings_only(4);
        CHECK(std::abs(global_contrastive_loss(z, z, labels, 1.0).loss - hand_case_value()) < 1e-6);
        CHECK(std::abs(oracle::global_loss_bruteforce(z, z, labels, 1.0) - hand_case_value()) < 1e-6);
        CHECK(hand_case_value() == Approx(2.20576).margin(1e-5));
        const auto zf = z.cast<float>();
        CHECK(std::abs(global_contrastive_loss(zf, zf, labels, 1.0).loss - hand_case_value()) < 1e-6);
    }
    SECTION("dense e1/e2 configuration at S=2") {
        const auto z = broadcast_rows(e1e2_rows(), 2);
        const auto labels = PairLabelMatrix::siblings_only(4);
        CHECK(std::abs(dense_contrastive_loss(z, z, labels, 1.0).loss - hand_case_value()) < 1e-6);
        CHECK(std::abs(oracle::dense_loss_bruteforce(z, z, labels, 1.0) - hand_case_value()) < 1e-6);
    }
    SECTION("lower temperature drives a dominant positive towards zero") {
        Tensor<double> z({4, 2}, std::vector<double>{1, 0.05, 1, -0.05, 0.05, 1, -0.05, 1});
        const auto labels = PairLabelMatrix::siblings_only(4);
        double prev = std::numeric_limits<double>::infinity();
        for (double tau : {1.0, 0.5, 0.1}) {
            const double v = oracle::global_loss_bruteforce(z, z, labels, tau);
            CHECK(v < prev);
            CHECK(global_contrastive_loss(z, z, labels, tau).loss == Approx(v).epsilon(1e-10));
            prev = v;
        }
    }
}

TEST_CASE("loss errors", "[losses]") {
    Tensor<double> z({4, 2}, 1.0);
    std::vector<std::uint8_t> none(16, 0);
    const PairLabelMatrix empty(4, none, std::vector<RowMeta>(4));
    CHECK_THROWS_AS(global_contrastive_loss(z, z, empty, 0.1), ContractError);
    CHECK_THROWS_AS(dense_contrastive_loss(broadcast_rows(z, 2), broadcast_rows(z, 2), empty, 0.1), ContractError);
    const auto labels = PairLabelMatrix::siblings_only(4);
    CHECK_THROWS_AS(global_contrastive_loss(z, Tensor<double>({4, 3}), labels, 0.1), ShapeError);
    CHECK_THROWS_AS(dense_contrastive_loss(broadcast_rows(z, 2), broadcast_rows(z, 3), labels, 0.1), ShapeError);
    auto bad = z;
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(global_contrastive_loss(bad, z, labels, 0.1), NumericError);
    CHECK_THROWS_AS(global_contrastive_loss(z, z, labels, 0.0), ConfigError);
    CHECK_THROWS_AS(equivariant_regularization(Tensor<double>({1, 1, 3, 3}), Tensor<double>({1, 1, 4, 4}), 0.5), ShapeError);
    CHECK_THROWS_AS(oracle::global_loss_bruteforce(z, z, empty, 0.1), ContractError);
}

TEST_CASE("vectorized losses match the brute-force oracle", "[losses][oracle]") {
    Rng rng(2024);
    const double taus[] = {0.1, 0.5, 1.0};
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t M = 2 * (1 + rng.below(4)), C = 1 + rng.below(8), S = 1 + rng.below(4);
        const double tau = taus[rng.below(3)];
        const auto labels = random_labels(M, rng);
        const auto a = random_tensor<double>({M, C}, rng), b = random_tensor<double>({M, C}, rng);
        CHECK(rel_err(global_contrastive_loss(a, b, labels, tau).loss, oracle::global_loss_bruteforce(a, b, labels, tau)) < 1e-10);
        const auto da = random_tensor<double>({M, C, S, S}, rng), db = random_tensor<double>({M, C, S, S}, rng);
        CHECK(rel_err(dense_contrastive_loss(da, db, labels, tau).loss, oracle::dense_loss_bruteforce(da, db, labels, tau)) < 1e-10);
        const auto fa = a.cast<float>(), fb = b.cast<float>();
        const double ref = oracle::global_loss_bruteforce(fa.cast<double>(), fb.cast<double>(), labels, tau);
        CHECK(rel_err(global_contrastive_loss(fa, fb, labels, tau).loss, ref) < 1e-5);
    }
}

TEST_CASE("reduction identities", "[losses]") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t M = 2 * (1 + rng.below(4)), C = 1 + rng.below(8);
        const auto labels = random_labels(M, rng);
        const auto a = random_tensor<double>({M, C}, rng), b = random_tensor<double>({M, C}, rng);
        const double g = global_contrastive_loss(a, b, labels, 0.1).loss;
        const double d = dense_contrastive_loss(a.reshaped({M, C, 1, 1}), b.reshaped({M, C, 1, 1}), labels, 0.1).loss;
        CHECK(std::abs(g - d) < 1e-7);
        // constant fields: every location contributes the same term
        CHECK(rel_err(dense_contrastive_loss(broadcast_rows(a, 3), broadcast_rows(b, 3), labels, 0.1).loss, g) < 1e-10);
        const auto mean = global_contrastive_loss(a, b, labels, 0.1, false, Reduction::Mean).loss;
        CHECK(mean == Approx(g / double(M)).epsilon(1e-12));
    }
}

TEST_CASE("scale invariance and permutation equivariance", "[losses][property]") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t M = 2 * (1 + rng.below(4)), C = 1 + rng.below(8), S = 1 + rng.below(3);
        const auto labels = random_labels(M, rng);
        auto a = random_tensor<double>({M, C}, rng);
        const auto b = random_tensor<double>({M, C}, rng);
        const double base = global_contrastive_loss(a, b, labels, 0.5).loss;
        const std::size_t r = rng.below(M);
        const double c = rng.uniform(0.1, 10.0);
        for (std::size_t k = 0; k < C; ++k) a.at(r, k) *= c;
        CHECK(std::abs(global_contrastive_loss(a, b, labels, 0.5).loss - base) < 1e-6);

        std::vector<std::size_t> perm(M);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        const auto pl = labels.permuted(perm);
        Tensor<double> pa({M, C}), pb({M, C});
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < C; ++k) {
                pa.at(i, k) = a.at(perm[i], k);
                pb.at(i, k) = b.at(perm[i], k);
            }
        CHECK(std::abs(global_contrastive_loss(pa, pb, pl, 0.5).loss - global_contrastive_loss(a, b, labels, 0.5).loss) < 1e-6);

        const auto da = random_tensor<double>({M, C, S, S}, rng), db = random_tensor<double>({M, C, S, S}, rng);
        Tensor<double> pda(da.shape()), pdb(db.shape());
        const std::size_t blk = C * S * S;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < blk; ++k) {
                pda[i * blk + k] = da[perm[i] * blk + k];
                pdb[i * blk + k] = db[perm[i] * blk + k];
            }
        CHECK(std::abs(dense_contrastive_loss(pda, pdb, pl, 0.5).loss - dense_contrastive_loss(da, db, labels, 0.5).loss) < 1e-6);
    }
}

TEST_CASE("equivariant regularization examples", "[losses]") {
    Rng rng(7);
    const auto yt = random_tensor<double>({2, 3, 8, 8}, rng);
    const auto y = down(yt, 0.25);
    CHECK(equivariant_regularization(y, yt, 0.25).loss == 0.0);
    CHECK(equivariant_regularization(Tensor<double>({1, 2, 2, 2}), Tensor<double>({1, 2, 4, 4}, 1.0), 0.5).loss == 1.0);
    const auto other = random_tensor<double>({2, 3, 2, 2}, rng);
    const double base = equivariant_regularization(other, yt, 0.25).loss;
    auto so = other, sy = yt;
    so *= -3.0;
    sy *= -3.0;
    CHECK(equivariant_regularization(so, sy, 0.25).loss == Approx(3.0 * base).epsilon(1e-12));
    CHECK(oracle::equivariant_bruteforce(other, yt, 4) == Approx(base).epsilon(1e-12));
}

TEST_CASE("finite difference checker basics", "[oracle]") {
    Rng rng(8);
    const auto x = random_tensor<double>({5}, rng);
    const auto g = oracle::finite_diff_gradient(
        [](const Tensor<double>& t) {
            double s = 0;
            for (auto v : t.vec()) s += v * v;
            return s;
        },
        x);
    for (std::size_t i = 0; i < 5; ++i) CHECK(g[i] == Approx(2 * x[i]).margin(1e-9));
    const auto z = oracle::finite_diff_gradient([](const Tensor<double>&) { return 3.0; }, x);
    for (auto v : z.vec()) CHECK(v == 0.0);
    CHECK_THROWS_AS(oracle::finite_diff_gradient([](const Tensor<double>&) { return std::nan(""); }, x), NumericError);
}

TEST_CASE("analytic loss gradients match finite differences", "[losses][gradient]") {
    Rng rng(9);
    const double taus[] = {0.1, 0.5, 1.0};
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t M = 2 * (1 + rng.below(3)), C = 1 + rng.below(5), S = 1 + rng.below(3);
        const double tau = taus[rng.below(3)];
        const auto labels = random_labels(M, rng);
        const auto a = random_tensor<double>({M, C}, rng), b = random_tensor<double>({M, C}, rng);
        const auto r = global_contrastive_loss(a, b, labels, tau);
        const auto ga = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::global_loss_bruteforce(t, b, labels, tau); }, a);
        const auto gb = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::global_loss_bruteforce(a, t, labels, tau); }, b);
        CHECK(oracle::max_relative_error(r.d_anchor, ga, kGradFloor) < 1e-3);
        CHECK(oracle::max_relative_error(r.d_candidate, gb, kGradFloor) < 1e-3);

        const auto da = random_tensor<double>({M, C, S, S}, rng), db = random_tensor<double>({M, C, S, S}, rng);
        const auto rd = dense_contrastive_loss(da, db, labels, tau);
        const auto gda = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::dense_loss_bruteforce(t, db, labels, tau); }, da);
        const auto gdb = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::dense_loss_bruteforce(da, t, labels, tau); }, db);
        CHECK(oracle::max_relative_error(rd.d_anchor, gda, kGradFloor) < 1e-3);
        CHECK(oracle::max_relative_error(rd.d_candidate, gdb, kGradFloor) < 1e-3);
    }
}

TEST_CASE("equivariant gradient matches finite differences", "[losses][gradient]") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto inst = random_ler_instance(rng);
        const std::size_t f = down_factor(inst.lambda);
        const auto r = equivariant_regularization(inst.Y, inst.Yt, inst.lambda);
        const auto gy = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::equivariant_bruteforce(t, inst.Yt, f); }, inst.Y);
        const auto gt = oracle::finite_diff_gradient([&](const Tensor<double>& t) { return oracle::equivariant_bruteforce(inst.Y, t, f); }, inst.Yt);
        CHECK(oracle::max_relative_error(r.d_anchor, gy, kGradFloor) < 1e-3);
        CHECK(oracle::max_relative_error(r.d_candidate, gt, kGradFloor) < 1e-3);
    }
}

TEST_CASE("multi_level_loss combines components", "[losses]") {
    Rng rng(10);
    const std::size_t M = 4;
    const auto labels = random_labels(M, rng);
    BranchOutputs<double> out;
    out.Zg = Var<double>(random_tensor<double>({M, 6}, rng), true);
    out.Zg_aux = Var<double>(random_tensor<double>({M, 6}, rng), true);
    out.Zl = Var<double>(random_tensor<double>({M, 3, 2, 2}, rng), true);
    out.Zl_aux = Var<double>(random_tensor<double>({M, 3, 2, 2}, rng), true);
    out.Y = Var<double>(random_tensor<double>({M, 3, 2, 2}, rng), true);
    out.Yt = Var<double>(random_tensor<double>({M, 3, 4, 4}, rng), true);
    out.lambda = 0.5;

    const LossWeights w;
    CHECK(w.global == 1.0);
    CHECK(w.dense == 0.5);
    CHECK(w.equivariant == 1.0);
    CHECK(w.tau == 0.1);
    const auto full = multi_level_loss(out, labels, w);
    const auto& b = full.breakdown;
    CHECK(std::abs(b.total - (b.global + 0.5 * b.dense + b.equivariant)) < 1e-12);
    CHECK(full.total.value()[0] == Approx(b.total).epsilon(1e-12));

    LossWeights only_g{1.0, 0.0, 0.0, 0.1};
    const auto g = multi_level_loss(out, labels, only_g);
    CHECK(g.breakdown.total == g.breakdown.global);
    CHECK(g.total.value()[0] == global_contrastive_loss(out.Zg.value(), out.Zg_aux.value(), labels, 0.1).loss);

    LossWeights zero{0.0, 0.0, 0.0, 0.1};
    CHECK(multi_level_loss(out, labels, zero).breakdown.total == 0.0);

    LossWeights neg{-1.0, 0.5, 1.0, 0.1};
    CHECK_THROWS_AS(multi_level_loss(out, labels, neg), ConfigError);

    backward(full.total);
    CHECK(out.Zg.has_grad());
    CHECK(out.Yt.has_grad());
}

TEST_CASE("oracle module does not reference the losses module", "[oracle]") {
    std::ifstream in(std::string(MACL_SOURCE_DIR) + "/include/macl/oracle.hpp");
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    CHECK(text.find("#include \"macl/losses.hpp\"") == std::string::npos);
    CHECK(text.find("contrastive_core") == std::string::npos);
    CHECK(text.find("global_contrastive_loss") == std::string::npos);
}
