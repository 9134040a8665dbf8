// SPDX-License-Identifier: Apache-2.0
//
// Self-contained verification suites: vectorized losses against brute-force
// enumeration, analytic against finite-difference gradients, branch alignment,
// reduction identities and metric hand cases.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "macl/losses.hpp"
#include "macl/metrics.hpp"
#include "macl/model.hpp"
#include "macl/oracle.hpp"
#include "macl/rng.hpp"

namespace macl::selftest {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

struct Options {
    std::size_t oracle_instances = 1000;
    std::size_t gradient_instances = 50; // per loss
    std::uint64_t seed = 20240611;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(-1.0, 1.0);
    return t;
}

inline PairLabelMatrix random_labels(std::size_t rows, Rng& rng) {
    std::vector<RowMeta> meta;
    for (std::size_t i = 0; i < rows / 2; ++i) {
        const RowMeta m{"v" + std::to_string(rng.below(3)), rng.uniform()};
        meta.push_back(m);
        meta.push_back(m);
    }
    return build_pair_labels(meta, rng.uniform(0.0, 0.3));
}

// Rescales every feature vector (axis 1) shorter than `min_norm` up to that length, keeping
// finite differences clear of the normalization singularity at the origin.
inline void keep_from_origin(Tensor<double>& t, double min_norm = 0.05) {
    const std::size_t M = t.dim(0), C = t.dim(1), P = t.numel() / (M * C);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t p = 0; p < P; ++p) {
            double n2 = 0.0;
            for (std::size_t c = 0; c < C; ++c) n2 += t[(m * C + c) * P + p] * t[(m * C + c) * P + p];
            const double n = std::sqrt(n2);
            if (n >= min_norm) continue;
            for (std::size_t c = 0; c < C; ++c) {
                auto& v = t[(m * C + c) * P + p];
                v = n > 0.0 ? v * min_norm / n : (c == 0 ? min_norm : 0.0);
            }
        }
}

inline double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

template <typename F>
CheckResult timed(const std::string& name, F body) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{name, false, {}, 0.0};
    try {
        body(r);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

} // namespace detail

inline constexpr double kGradientFloor = 1e-6;

// Four rows e1, e1, e2, e2 with sibling positives at tau = 1.
inline double hand_case_expected() { return 4.0 * std::log(1.0 + 2.0 / std::exp(1.0)); }

inline CheckResult loss_oracle_equivalence(const Options& o) {
    return detail::timed("loss oracle equivalence", [&](CheckResult& r) {
        Rng rng(o.seed);
        const double taus[] = {0.1, 0.5, 1.0};
        double worst_g = 0.0, worst_d = 0.0;
        for (std::size_t t = 0; t < o.oracle_instances; ++t) {
            const std::size_t M = 2 * (1 + rng.below(4)), C = 1 + rng.below(8), S = 1 + rng.below(4);
            const double tau = taus[rng.below(3)];
            const auto labels = detail::random_labels(M, rng);
            const auto a = detail::random_tensor({M, C}, rng).cast<float>(), b = detail::random_tensor({M, C}, rng).cast<float>();
            worst_g = std::max(worst_g, detail::rel(global_contrastive_loss(a, b, labels, tau).loss,
                                                    oracle::global_loss_bruteforce(a.cast<double>(), b.cast<double>(), labels, tau)));
            const auto da = detail::random_tensor({M, C, S, S}, rng).cast<float>();
            const auto db = detail::random_tensor({M, C, S, S}, rng).cast<float>();
            worst_d = std::max(worst_d, detail::rel(dense_contrastive_loss(da, db, labels, tau).loss,
                                                    oracle::dense_loss_bruteforce(da.cast<double>(), db.cast<double>(), labels, tau)));
        }
        Tensor<float> z({4, 2});
        z.at(0, 0) = z.at(1, 0) = z.at(2, 1) = z.at(3, 1) = 1.0f;
        const double hand = global_contrastive_loss(z, z, PairLabelMatrix::siblings_only(4), 1.0).loss;
        const double hand_err = std::abs(hand - hand_case_expected());
        r.pass = worst_g < 1e-5 && worst_d < 1e-5 && hand_err < 1e-6;
        r.detail = std::to_string(o.oracle_instances) + " instances (float32): max rel err Lg " + detail::fmt(worst_g) + ", Ld " +
                   detail::fmt(worst_d) + " (tol 1e-5); hand case " + std::to_string(hand) + " err " + detail::fmt(hand_err) +
                   " (tol 1e-6)";
    });
}

inline CheckResult gradient_checks(const Options& o) {
    return detail::timed("gradient checks", [&](CheckResult& r) {
        Rng rng(o.seed + 1);
        const double taus[] = {0.1, 0.5, 1.0};
        double worst_g = 0.0, worst_d = 0.0, worst_e = 0.0;
        using oracle::finite_diff_gradient;
        using oracle::max_relative_error;
        for (std::size_t t = 0; t < o.gradient_instances; ++t) {
            const std::size_t M = 2 * (1 + rng.below(3)), C = 1 + rng.below(5), S = 1 + rng.below(3);
            const double tau = taus[rng.below(3)];
            const auto labels = detail::random_labels(M, rng);
            auto a = detail::random_tensor({M, C}, rng), b = detail::random_tensor({M, C}, rng);
            detail::keep_from_origin(a);
            detail::keep_from_origin(b);
            const auto g = global_contrastive_loss(a, b, labels, tau);
            const auto ga = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::global_loss_bruteforce(x, b, labels, tau); }, a);
            const auto gb = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::global_loss_bruteforce(a, x, labels, tau); }, b);
            worst_g = std::max({worst_g, max_relative_error(g.d_anchor, ga, kGradientFloor), max_relative_error(g.d_candidate, gb, kGradientFloor)});

            auto da = detail::random_tensor({M, C, S, S}, rng), db = detail::random_tensor({M, C, S, S}, rng);
            detail::keep_from_origin(da);
            detail::keep_from_origin(db);
            const auto d = dense_contrastive_loss(da, db, labels, tau);
            const auto gda = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::dense_loss_bruteforce(x, db, labels, tau); }, da);
            const auto gdb = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::dense_loss_bruteforce(da, x, labels, tau); }, db);
            worst_d = std::max({worst_d, max_relative_error(d.d_anchor, gda, kGradientFloor), max_relative_error(d.d_candidate, gdb, kGradientFloor)});

            // residuals kept at least 1e-2 away from the kink of |.|
            const std::size_t f = std::size_t{1} << rng.below(3);
            const std::size_t B = 1 + rng.below(3), K = 1 + rng.below(4), Sy = 1 + rng.below(3);
            auto Y = detail::random_tensor({B, K, Sy, Sy}, rng);
            const auto Yt = detail::random_tensor({B, K, Sy * f, Sy * f}, rng);
            const double lambda = 1.0 / static_cast<double>(f);
            const auto dn = down(Yt, lambda);
            for (std::size_t i = 0; i < dn.numel(); ++i)
                if (std::abs(Y[i] - dn[i]) < 1e-2) Y[i] = dn[i] + (Y[i] >= dn[i] ? 1e-2 : -1e-2);
            const auto e = equivariant_regularization(Y, Yt, lambda);
            const auto gy = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::equivariant_bruteforce(x, Yt, f); }, Y);
            const auto gt = finite_diff_gradient([&](const Tensor<double>& x) { return oracle::equivariant_bruteforce(Y, x, f); }, Yt);
            worst_e = std::max({worst_e, max_relative_error(e.d_anchor, gy, kGradientFloor), max_relative_error(e.d_candidate, gt, kGradientFloor)});
        }
        r.pass = worst_g < 1e-3 && worst_d < 1e-3 && worst_e < 1e-3;
        r.detail = std::to_string(o.gradient_instances) + " instances per loss (float64, eps 1e-4): max rel err Lg " +
                   detail::fmt(worst_g) + ", Ld " + detail::fmt(worst_d) + ", LER " + detail::fmt(worst_e) + " (tol 1e-3)";
    });
}

inline CheckResult alignment_grid(const Options&) {
    return detail::timed("alignment invariant", [&](CheckResult& r) {
        std::size_t cases = 0;
        std::string failures;
        for (std::size_t L = 2; L <= 5; ++L)
            for (std::size_t N = 0; N <= std::min<std::size_t>(2, L - 1); ++N) {
                MaclSpec s;
                s.encoder.levels = L;
                s.encoder.base_channels = 2;
                s.decoder.blocks = N;
                s.proj_dim = 4;
                s.pixel_channels = 2;
                const double lambda = std::ldexp(1.0, -static_cast<int>(N));
                const MaclNet<float> net(s, L * 10 + N);
                const std::size_t H = (std::size_t{1} << (L - 1)) << N;
                const Tensor<float> I({2, 1, H, H}, 0.5f);
                ForwardRequest req;
                req.global = false;
                const auto out = net.forward(I, I, lambda, req);
                auto sp = [](const Shape& sh) { return Shape{sh[sh.size() - 2], sh[sh.size() - 1]}; };
                const bool ok = sp(out.Zl.shape()) == sp(out.Zl_aux.shape()) &&
                                sp(out.Y.shape()) == sp(down(out.Yt.value(), lambda).shape());
                if (!ok) failures += " (L=" + std::to_string(L) + ",N=" + std::to_string(N) + ")";
                ++cases;
            }
        r.pass = failures.empty();
        r.detail = std::to_string(cases) + " (L, N) pairs, exact spatial equality" + (failures.empty() ? "" : "; failed:" + failures);
    });
}

inline CheckResult reduction_identities(const Options& o) {
    return detail::timed("reduction identities", [&](CheckResult& r) {
        Rng rng(o.seed + 2);
        double worst_s1 = 0.0;
        bool weights_exact = true;
        double worst_ler = 0.0;
        for (int t = 0; t < 100; ++t) {
            const std::size_t M = 2 * (1 + rng.below(4)), C = 1 + rng.below(8);
            const auto labels = detail::random_labels(M, rng);
            const auto a = detail::random_tensor({M, C}, rng), b = detail::random_tensor({M, C}, rng);
            const double g = global_contrastive_loss(a, b, labels, 0.1).loss;
            const double d = dense_contrastive_loss(a.reshaped({M, C, 1, 1}), b.reshaped({M, C, 1, 1}), labels, 0.1).loss;
            worst_s1 = std::max(worst_s1, std::abs(g - d));

            BranchOutputs<double> out;
            out.Zg = Var<double>(a);
            out.Zg_aux = Var<double>(b);
            out.Zl = Var<double>(detail::random_tensor({M, 2, 2, 2}, rng));
            out.Zl_aux = Var<double>(detail::random_tensor({M, 2, 2, 2}, rng));
            const auto Yt = detail::random_tensor({M, 2, 4, 4}, rng);
            out.Y = Var<double>(down(Yt, 0.5));
            out.Yt = Var<double>(Yt);
            out.lambda = 0.5;
            const auto ml = multi_level_loss(out, labels, LossWeights{1.0, 0.0, 0.0, 0.1});
            weights_exact = weights_exact && ml.total.value()[0] == g && ml.breakdown.total == ml.breakdown.global;
            worst_ler = std::max(worst_ler, equivariant_regularization(out.Y.value(), Yt, 0.5).loss);
        }
        r.pass = worst_s1 < 1e-7 && weights_exact && worst_ler == 0.0;
        r.detail = "Ld(S=1) vs Lg max abs diff " + detail::fmt(worst_s1) + " (tol 1e-7); weights (1,0,0) exact: " +
                   (weights_exact ? "yes" : "no") + "; LER at Y = down(Yt): " + detail::fmt(worst_ler);
    });
}

inline CheckResult metric_hand_cases(const Options& o) {
    return detail::timed("metric hand cases", [&](CheckResult& r) {
        std::vector<std::uint8_t> g(16, 0), p(16, 0);
        g[0] = g[1] = g[4] = g[5] = 1;
        p[0] = p[1] = 1;
        const double subset = dsc({p, 4, 4}, {g, 4, 4});
        const bool subset_ok = std::abs(subset - 0.6667) <= 1e-4;

        Rng rng(o.seed + 3);
        double worst_id = 0.0;
        for (int t = 0; t < 100; ++t) {
            std::vector<std::uint8_t> a(120), b(120);
            const double pa = rng.uniform(0.05, 0.6), pb = rng.uniform(0.05, 0.6);
            for (auto& v : a) v = rng.uniform() < pa;
            for (auto& v : b) v = rng.uniform() < pb;
            const MaskView A{a, 10, 12}, B{b, 10, 12};
            const double d = dsc(A, B);
            worst_id = std::max(worst_id, std::abs(jc(A, B) - d / (2.0 - d)));
        }

        // 22x22 square and the same square shifted one pixel right
        const std::size_t H = 40;
        std::vector<std::uint8_t> sq(H * H, 0), sh(H * H, 0);
        for (std::size_t y = 8; y < 30; ++y)
            for (std::size_t x = 8; x < 30; ++x) {
                sq[y * H + x] = 1;
                sh[y * H + x + 1] = 1;
            }
        const MaskView G{sq, H, H}, P{sh, H, H};
        const double h = hd95(P, G).value;
        // enumeration: every boundary pixel of one mask against every boundary pixel of the other
        auto edge = [&](const std::vector<std::uint8_t>& m) {
            std::vector<std::pair<double, double>> e;
            auto at = [&](long y, long x) { return y >= 0 && x >= 0 && y < long(H) && x < long(H) && m[std::size_t(y) * H + std::size_t(x)]; };
            for (long y = 0; y < long(H); ++y)
                for (long x = 0; x < long(H); ++x)
                    if (at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))) e.emplace_back(y, x);
            return e;
        };
        auto mean_directed = [](const auto& from, const auto& to) {
            double s = 0.0;
            for (const auto& [ya, xa] : from) {
                double best = 1e300;
                for (const auto& [yb, xb] : to) best = std::min(best, std::hypot(ya - yb, xa - xb));
                s += best;
            }
            return s / static_cast<double>(from.size());
        };
        const auto ep = edge(sh), eg = edge(sq);
        const double asd_ref = 0.5 * (mean_directed(ep, eg) + mean_directed(eg, ep));
        const double asd_err = std::abs(asd(P, G).value - asd_ref);
        r.pass = subset_ok && worst_id <= 1e-9 && std::abs(h - 1.0) <= 1e-12 && asd_err <= 1e-6;
        r.detail = "dsc subset " + std::to_string(subset) + "; jc identity max err " + detail::fmt(worst_id) +
                   " over 100 pairs; shifted-square hd95 " + std::to_string(h) + ", asd err vs enumeration " + detail::fmt(asd_err);
    });
}

using Suite = std::function<CheckResult(const Options&)>;

inline std::vector<std::pair<std::string, Suite>> core_suites() {
    return {{"oracle", loss_oracle_equivalence},
            {"gradients", gradient_checks},
            {"alignment", alignment_grid},
            {"reductions", reduction_identities},
            {"metrics", metric_hand_cases}};
}

inline void print_result(std::ostream& os, const CheckResult& r) {
    char t[32];
    std::snprintf(t, sizeof t, "%.2fs", r.seconds);
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << " [" << t << "]\n";
}

// Runs every core suite; returns true when all pass.
inline bool run_all(const Options& o, std::ostream& os) {
    bool ok = true;
    for (const auto& [key, suite] : core_suites()) {
        const auto r = suite(o);
        print_result(os, r);
        ok = ok && r.pass;
    }
    return ok;
}

} // namespace macl::selftest
