// Shared helpers for the unit and acceptance tests.
#pragma once

#include <cmath>
#include <vector>

#include "macl/losses.hpp"
#include "macl/oracle.hpp"
#include "macl/rng.hpp"
#include "macl/synthdata.hpp"

namespace macl::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Random pair labels for `rows` rows (even), with random slice positions.
inline PairLabelMatrix random_labels(std::size_t rows, Rng& rng) {
    std::vector<RowMeta> meta;
    for (std::size_t i = 0; i < rows / 2; ++i) {
        RowMeta m{"v" + std::to_string(rng.below(3)), rng.uniform()};
        meta.push_back(m);
        meta.push_back(m);
    }
    return build_pair_labels(meta, rng.uniform(0.0, 0.3));
}

// The two-slice e1/e2 configuration: rows 0,1 are e1, rows 2,3 are e2.
inline Tensor<double> e1e2_rows(std::size_t C = 2) {
    Tensor<double> t({4, C});
    t.at(0, 0) = t.at(1, 0) = 1.0;
    t.at(2, 1) = t.at(3, 1) = 1.0;
    return t;
}

// Gradient entries smaller than this are compared in absolute terms.
inline constexpr double kGradFloor = 1e-6;

inline double hand_case_value() { return 4.0 * std::log(1.0 + 2.0 / std::exp(1.0)); }

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

// Dense [M, C, S, S] tensor whose every location holds row r of `rows`.
inline Tensor<double> broadcast_rows(const Tensor<double>& rows, std::size_t S) {
    const std::size_t M = rows.dim(0), C = rows.dim(1);
    Tensor<double> t({M, C, S, S});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S * S; ++s) t[(i * C + c) * S * S + s] = rows.at(i, c);
    return t;
}

// Y, Yt pair for the L1 regularizer whose residuals stay clear of the kink at 0.
struct LerInstance {
    Tensor<double> Y, Yt;
    double lambda;
};

inline LerInstance random_ler_instance(Rng& rng) {
    const std::size_t f = std::size_t{1} << rng.below(3);
    const std::size_t B = 1 + rng.below(3), C = 1 + rng.below(4), S = 1 + rng.below(3);
    LerInstance inst{random_tensor<double>({B, C, S, S}, rng), random_tensor<double>({B, C, S * f, S * f}, rng), 1.0 / double(f)};
    const auto d = down(inst.Yt, inst.lambda);
    for (std::size_t i = 0; i < d.numel(); ++i)
        if (std::abs(inst.Y[i] - d[i]) < 1e-2) inst.Y[i] = d[i] + (inst.Y[i] >= d[i] ? 1e-2 : -1e-2);
    return inst;
}

} // namespace macl::testing
