// SPDX-License-Identifier: Apache-2.0
//
// Multi-level contrastive objective:
//   global (image-level) InfoNCE with position-based positive sets,
//   dense (pixel-level) InfoNCE averaged over spatial locations,
//   equivariant L1 regularization between encoder features,
// combined as total = w_g * Lg + w_d * Ld + w_er * LER.
//
// Similarities are cross-branch: anchors come from the dominant branch,
// candidates from the auxiliary branch. Each anchor i excludes k = i from its
// denominator. Values are sums over anchors unless Reduction::Mean is asked for.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "json.hpp"
#include "macl/autograd.hpp"
#include "macl/branch_outputs.hpp"
#include "macl/nn.hpp"
#include "macl/synthdata.hpp"
#include "macl/tensor.hpp"

namespace macl {

struct LossWeights {
    double global = 1.0;  // lambda_1
    double dense = 0.5;   // lambda_2
    double equivariant = 1.0; // lambda_3
    double tau = 0.1;

    void validate() const {
        if (!(tau > 0.0)) throw ConfigError("temperature tau must be > 0");
        if (global < 0.0 || dense < 0.0 || equivariant < 0.0) throw ConfigError("loss weights must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda1", w.global}, {"lambda2", w.dense}, {"lambda3", w.equivariant}, {"tau", w.tau}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
    w.global = j.value("lambda1", w.global);
    w.dense = j.value("lambda2", w.dense);
    w.equivariant = j.value("lambda3", w.equivariant);
    w.tau = j.value("tau", w.tau);
}

struct LossBreakdown {
    double total = 0.0, global = 0.0, dense = 0.0, equivariant = 0.0;
};

enum class Reduction { Sum, Mean };

inline constexpr double kNormEps = 1e-8;

template <typename T>
T sim(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) throw ShapeError("sim: vector lengths differ");
    T dot{0}, nu{0}, nv{0};
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    return dot / ((std::sqrt(nu) + T(kNormEps)) * (std::sqrt(nv) + T(kNormEps)));
}

template <typename T>
struct ContrastiveResult {
    T loss{0};
    Tensor<T> d_anchor;    // dLoss / dAnchors, same shape as the anchor input
    Tensor<T> d_candidate; // dLoss / dCandidates
};

namespace detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_labels(const PairLabelMatrix& labels, std::size_t rows) {
    if (rows < 2) throw ContractError("contrastive loss needs at least 2 rows, got " + std::to_string(rows));
    if (labels.size() != rows)
        throw ShapeError("pair label matrix has " + std::to_string(labels.size()) + " rows, projections have " + std::to_string(rows));
    for (std::size_t i = 0; i < rows; ++i)
        if (labels.positive_count(i) == 0) throw ContractError("row " + std::to_string(i) + " has an empty positive set");
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
    for (const T v : t.vec())
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

// Row-normalizes M (rows x C); returns the normalized matrix and per-row raw norms.
template <typename T>
Mat<T> normalize_rows(const Mat<T>& m, Eigen::Matrix<T, Eigen::Dynamic, 1>& raw_norm) {
    raw_norm = m.rowwise().norm();
    Mat<T> out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) /= raw_norm(i) + T(kNormEps);
    return out;
}

// Backprop through u = a / (|a| + eps).
template <typename T>
Mat<T> normalize_backward(const Mat<T>& a, const Eigen::Matrix<T, Eigen::Dynamic, 1>& raw_norm, const Mat<T>& g) {
    Mat<T> out(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const T r = raw_norm(i), n = r + T(kNormEps);
        out.row(i) = g.row(i) / n;
        if (r > T(0)) out.row(i) -= a.row(i) * (a.row(i).dot(g.row(i)) / (n * n * r));
    }
    return out;
}

// InfoNCE over one set of row vectors. Adds `weight * loss` and its gradients.
template <typename T>
T contrastive_core(const Mat<T>& A, const Mat<T>& B, const PairLabelMatrix& labels, T tau, T weight,
                   Mat<T>* dA, Mat<T>* dB) {
    const Eigen::Index M = A.rows();
    Eigen::Matrix<T, Eigen::Dynamic, 1> na, nb;
    const Mat<T> Ah = normalize_rows(A, na);
    const Mat<T> Bh = normalize_rows(B, nb);
    const Mat<T> logits = (Ah * Bh.transpose()) / tau;
    Mat<T> dlogits = Mat<T>::Zero(M, M);
    T total{0};
    for (Eigen::Index i = 0; i < M; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index k = 0; k < M; ++k)
            if (k != i) mx = std::max(mx, logits(i, k));
        T z{0};
        for (Eigen::Index k = 0; k < M; ++k)
            if (k != i) z += std::exp(logits(i, k) - mx);
        const T lse = mx + std::log(z);
        const T npos = static_cast<T>(labels.positive_count(static_cast<std::size_t>(i)));
        T pos_sum{0};
        for (Eigen::Index j = 0; j < M; ++j)
            if (labels.positive(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) pos_sum += logits(i, j);
        total += lse - pos_sum / npos;
        if (dA || dB) {
            for (Eigen::Index k = 0; k < M; ++k) {
                if (k == i) continue;
                T d = std::exp(logits(i, k) - mx) / z;
                if (labels.positive(static_cast<std::size_t>(i), static_cast<std::size_t>(k))) d -= T(1) / npos;
                dlogits(i, k) = weight * d / tau;
            }
        }
    }
    if (dA) *dA += normalize_backward(A, na, Mat<T>(dlogits * Bh));
    if (dB) *dB += normalize_backward(B, nb, Mat<T>(dlogits.transpose() * Ah));
    return weight * total;
}

} // namespace detail

// Image-level loss; Zg and Zt are [2N, C] (dominant anchors, auxiliary candidates).
template <typename T>
ContrastiveResult<T> global_contrastive_loss(const Tensor<T>& Zg, const Tensor<T>& Zt, const PairLabelMatrix& labels,
                                             double tau, bool with_grad = true, Reduction red = Reduction::Sum) {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (Zg.rank() != 2) throw ShapeError("global loss expects [2N, C], got " + shape_str(Zg.shape()));
    Zg.require_same_shape(Zt, "global_contrastive_loss");
    const std::size_t M = Zg.dim(0), C = Zg.dim(1);
    detail::check_labels(labels, M);
    detail::check_finite(Zg, "dominant image projection");
    detail::check_finite(Zt, "auxiliary image projection");
    using Mat = detail::Mat<T>;
    const Mat A = Eigen::Map<const Mat>(Zg.data(), M, C);
    const Mat B = Eigen::Map<const Mat>(Zt.data(), M, C);
    const T weight = red == Reduction::Mean ? T(1) / static_cast<T>(M) : T(1);
    Mat dA = Mat::Zero(M, C), dB = Mat::Zero(M, C);
    ContrastiveResult<T> r;
    r.loss = detail::contrastive_core<T>(A, B, labels, static_cast<T>(tau), weight, with_grad ? &dA : nullptr,
                                         with_grad ? &dB : nullptr);
    if (!std::isfinite(r.loss)) throw NumericError("global contrastive loss is not finite");
    if (with_grad) {
        r.d_anchor = Tensor<T>(Zg.shape(), std::vector<T>(dA.data(), dA.data() + dA.size()));
        r.d_candidate = Tensor<T>(Zt.shape(), std::vector<T>(dB.data(), dB.data() + dB.size()));
    }
    return r;
}

// Pixel-level loss; Zl and Zt are [2N, C, S, S]. Location s of anchor i is
// contrasted only against location s of the candidates.
template <typename T>
ContrastiveResult<T> dense_contrastive_loss(const Tensor<T>& Zl, const Tensor<T>& Zt, const PairLabelMatrix& labels,
                                            double tau, bool with_grad = true, Reduction red = Reduction::Sum) {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (Zl.rank() != 4) throw ShapeError("dense loss expects [2N, C, S, S], got " + shape_str(Zl.shape()));
    Zl.require_same_shape(Zt, "dense_contrastive_loss");
    const std::size_t M = Zl.dim(0), C = Zl.dim(1), HW = Zl.dim(2) * Zl.dim(3);
    detail::check_labels(labels, M);
    detail::check_finite(Zl, "dominant pixel projection");
    detail::check_finite(Zt, "auxiliary pixel projection");
    using Mat = detail::Mat<T>;
    T weight = T(1) / static_cast<T>(HW);
    if (red == Reduction::Mean) weight /= static_cast<T>(M);
    ContrastiveResult<T> r;
    if (with_grad) {
        r.d_anchor = Tensor<T>(Zl.shape());
        r.d_candidate = Tensor<T>(Zt.shape());
    }
    Mat A(M, C), B(M, C), dA(M, C), dB(M, C);
    for (std::size_t s = 0; s < HW; ++s) {
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                A(i, c) = Zl[(i * C + c) * HW + s];
                B(i, c) = Zt[(i * C + c) * HW + s];
            }
        dA.setZero();
        dB.setZero();
        r.loss += detail::contrastive_core<T>(A, B, labels, static_cast<T>(tau), weight, with_grad ? &dA : nullptr,
                                              with_grad ? &dB : nullptr);
        if (with_grad)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    r.d_anchor[(i * C + c) * HW + s] = dA(i, c);
                    r.d_candidate[(i * C + c) * HW + s] = dB(i, c);
                }
    }
    if (!std::isfinite(r.loss)) throw NumericError("dense contrastive loss is not finite");
    return r;
}

// Mean absolute difference between Y and down(Yt, lambda).
template <typename T>
ContrastiveResult<T> equivariant_regularization(const Tensor<T>& Y, const Tensor<T>& Yt, double lambda, bool with_grad = true) {
    const Tensor<T> dYt = down(Yt, lambda);
    if (Y.shape() != dYt.shape())
        throw ShapeError("equivariant regularization: Y " + shape_str(Y.shape()) + " vs down(Yt) " + shape_str(dYt.shape()));
    const std::size_t n = Y.numel();
    ContrastiveResult<T> r;
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(Y[i] - dYt[i]);
    r.loss = acc / static_cast<T>(n);
    if (with_grad) {
        Tensor<T> gY(Y.shape());
        Tensor<T> gDown(Y.shape());
        const T inv = T(1) / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T d = Y[i] - dYt[i];
            const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            gY[i] = sgn * inv;
            gDown[i] = -sgn * inv;
        }
        // adjoint of average pooling: spread each pooled gradient over its f x f block
        const std::size_t f = down_factor(lambda);
        Tensor<T> gYt(Yt.shape());
        const Shape& s = Yt.shape();
        const std::size_t H = s[s.size() - 2], W = s[s.size() - 1], oh = H / f, ow = W / f, planes = Yt.numel() / (H * W);
        const T pinv = T(1) / static_cast<T>(f * f);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    gYt[p * H * W + y * W + x] = gDown[p * oh * ow + (y / f) * ow + x / f] * pinv;
        r.d_anchor = std::move(gY);
        r.d_candidate = std::move(gYt);
    }
    return r;
}

// Loss values only, from already-computed branch outputs.
template <typename T>
LossBreakdown combine_losses(T lg, T ld, T ler, const LossWeights& w) {
    LossBreakdown b;
    b.global = static_cast<double>(lg);
    b.dense = static_cast<double>(ld);
    b.equivariant = static_cast<double>(ler);
    b.total = w.global * b.global + w.dense * b.dense + w.equivariant * b.equivariant;
    return b;
}

// ---------------------------------------------------------------------------
// Autograd wrappers.

namespace detail {

template <typename T>
Var<T> pair_loss_node(const Var<T>& a, const Var<T>& b, ContrastiveResult<T> r) {
    return make_result<T>(Tensor<T>::scalar(r.loss), {a, b},
                          [a, b, ga = std::move(r.d_anchor), gb = std::move(r.d_candidate)](Node<T>& n) mutable {
        const T s = n.grad[0];
        if (a.requires_grad()) {
            auto& g = a.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * ga[i];
        }
        if (b.requires_grad()) {
            auto& g = b.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * gb[i];
        }
    });
}

} // namespace detail

template <typename T>
Var<T> global_contrastive_loss(const Var<T>& Zg, const Var<T>& Zt, const PairLabelMatrix& labels, double tau) {
    const bool need = Zg.requires_grad() || Zt.requires_grad();
    return detail::pair_loss_node(Zg, Zt, global_contrastive_loss(Zg.value(), Zt.value(), labels, tau, need));
}

template <typename T>
Var<T> dense_contrastive_loss(const Var<T>& Zl, const Var<T>& Zt, const PairLabelMatrix& labels, double tau) {
    const bool need = Zl.requires_grad() || Zt.requires_grad();
    return detail::pair_loss_node(Zl, Zt, dense_contrastive_loss(Zl.value(), Zt.value(), labels, tau, need));
}

template <typename T>
Var<T> equivariant_regularization(const Var<T>& Y, const Var<T>& Yt, double lambda) {
    const bool need = Y.requires_grad() || Yt.requires_grad();
    return detail::pair_loss_node(Y, Yt, equivariant_regularization(Y.value(), Yt.value(), lambda, need));
}

template <typename T>
struct MultiLevelLoss {
    Var<T> total;
    LossBreakdown breakdown;
};

// total = w_g * Lg + w_d * Ld + w_er * LER. Components whose outputs were not
// computed (a branch skipped because its weight is zero) contribute 0.
template <typename T>
MultiLevelLoss<T> multi_level_loss(const BranchOutputs<T>& out, const PairLabelMatrix& labels, const LossWeights& w) {
    w.validate();
    std::vector<std::pair<T, Var<T>>> terms;
    T lg{0}, ld{0}, ler{0};
    if (out.has_global()) {
        auto v = global_contrastive_loss(out.Zg, out.Zg_aux, labels, w.tau);
        lg = v.value()[0];
        terms.emplace_back(static_cast<T>(w.global), v);
    }
    if (out.has_pixel()) {
        auto v = dense_contrastive_loss(out.Zl, out.Zl_aux, labels, w.tau);
        ld = v.value()[0];
        terms.emplace_back(static_cast<T>(w.dense), v);
    }
    if (out.has_features()) {
        auto v = equivariant_regularization(out.Y, out.Yt, out.lambda);
        ler = v.value()[0];
        terms.emplace_back(static_cast<T>(w.equivariant), v);
    }
    if (terms.empty()) throw ContractError("multi_level_loss: no branch outputs");
    MultiLevelLoss<T> r;
    r.total = nn::weighted_sum<T>(terms);
    r.breakdown = combine_losses(lg, ld, ler, w);
    if (!std::isfinite(r.breakdown.total)) throw NumericError("multi-level loss is not finite");
    return r;
}

} // namespace macl
