// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used to check the vectorized losses.
// Nothing here may include or call into losses.hpp; the test suite checks that.
#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "macl/error.hpp"
#include "macl/synthdata.hpp"
#include "macl/tensor.hpp"

namespace macl::oracle {

inline double cosine(const double* u, const double* v, std::size_t n) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    return dot / ((std::sqrt(nu) + 1e-8) * (std::sqrt(nv) + 1e-8));
}

namespace detail {

inline void check(const PairLabelMatrix& labels, std::size_t rows) {
    if (rows < 2) throw ContractError("oracle needs at least 2 rows");
    if (labels.size() != rows) throw ShapeError("oracle: label matrix size mismatch");
    for (std::size_t i = 0; i < rows; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < rows; ++j) any = any || labels.positive(i, j);
        if (!any) throw ContractError("oracle: empty positive set");
    }
}

// Vector of row r of a [rows, C] matrix, or of location s of a [rows, C, S, S] map.
inline std::vector<double> row_vec(const Tensor<double>& t, std::size_t r, std::size_t s) {
    const std::size_t C = t.dim(1);
    const std::size_t HW = t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
    std::vector<double> v(C);
    for (std::size_t c = 0; c < C; ++c) v[c] = t[(r * C + c) * HW + s];
    return v;
}

} // namespace detail

// Sum over anchors i of -(1/|P_i|) sum_{j in P_i} log( exp(sim(a_i,b_j)/tau) / sum_{k != i} exp(sim(a_i,b_k)/tau) ).
inline double global_loss_bruteforce(const Tensor<double>& Zg, const Tensor<double>& Zt, const PairLabelMatrix& labels, double tau) {
    const std::size_t M = Zg.dim(0), C = Zg.dim(1);
    detail::check(labels, M);
    double loss = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
        const auto a = detail::row_vec(Zg, i, 0);
        std::size_t npos = 0;
        double acc = 0.0;
        for (std::size_t j = 0; j < M; ++j) {
            if (!labels.positive(i, j)) continue;
            ++npos;
            const auto bj = detail::row_vec(Zt, j, 0);
            const double num = std::exp(cosine(a.data(), bj.data(), C) / tau);
            double den = 0.0;
            for (std::size_t k = 0; k < M; ++k) {
                if (k == i) continue;
                const auto bk = detail::row_vec(Zt, k, 0);
                den += std::exp(cosine(a.data(), bk.data(), C) / tau);
            }
            acc += std::log(num / den);
        }
        loss += -acc / static_cast<double>(npos);
    }
    return loss;
}

inline double dense_loss_bruteforce(const Tensor<double>& Zl, const Tensor<double>& Zt, const PairLabelMatrix& labels, double tau) {
    const std::size_t M = Zl.dim(0), C = Zl.dim(1), S2 = Zl.dim(2) * Zl.dim(3);
    detail::check(labels, M);
    double loss = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
        std::size_t npos = 0;
        double acc = 0.0;
        for (std::size_t j = 0; j < M; ++j) {
            if (!labels.positive(i, j)) continue;
            ++npos;
            double loc = 0.0;
            for (std::size_t s = 0; s < S2; ++s) {
                const auto a = detail::row_vec(Zl, i, s);
                const auto bj = detail::row_vec(Zt, j, s);
                const double num = std::exp(cosine(a.data(), bj.data(), C) / tau);
                double den = 0.0;
                for (std::size_t k = 0; k < M; ++k) {
                    if (k == i) continue;
                    const auto bk = detail::row_vec(Zt, k, s);
                    den += std::exp(cosine(a.data(), bk.data(), C) / tau);
                }
                loc += std::log(num / den);
            }
            acc += loc / static_cast<double>(S2);
        }
        loss += -acc / static_cast<double>(npos);
    }
    return loss;
}

// Mean |Y - avgpool_f(Yt)| computed element by element.
inline double equivariant_bruteforce(const Tensor<double>& Y, const Tensor<double>& Yt, std::size_t factor) {
    const std::size_t B = Yt.dim(0), C = Yt.dim(1), H = Yt.dim(2), W = Yt.dim(3);
    if (Y.shape() != Shape{B, C, H / factor, W / factor}) throw ShapeError("oracle equivariant: shape mismatch");
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H / factor; ++y)
                for (std::size_t x = 0; x < W / factor; ++x) {
                    double m = 0.0;
                    for (std::size_t dy = 0; dy < factor; ++dy)
                        for (std::size_t dx = 0; dx < factor; ++dx) m += Yt.at(b, c, y * factor + dy, x * factor + dx);
                    m /= static_cast<double>(factor * factor);
                    acc += std::abs(Y.at(b, c, y, x) - m);
                }
    return acc / static_cast<double>(Y.numel());
}

// Central differences, one coordinate at a time.
inline Tensor<double> finite_diff_gradient(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                           double eps = 1e-4) {
    Tensor<double> g(x.shape());
    Tensor<double> probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_gradient: f is not finite near coordinate " + std::to_string(i));
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-8) {
    a.require_same_shape(b, "max_relative_error");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        m = std::max(m, d / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
    }
    return m;
}

} // namespace macl::oracle
