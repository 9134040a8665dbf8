// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops used by the encoder/decoder networks. Layouts are
// NCHW for feature maps and [B, C] for vectors. Convolutions lower to GEMM via
// im2col and Eigen.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "macl/augment.hpp"
#include "macl/autograd.hpp"

namespace macl::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
    if (s.size() != r) throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

// col is [C*k*k, H*W] for one sample, stride 1, zero padding `pad`.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t pad, T* col) {
    const std::size_t HW = H * W;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * HW;
                const long oy = static_cast<long>(ky) - static_cast<long>(pad);
                const long ox = static_cast<long>(kx) - static_cast<long>(pad);
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + oy;
                    T* r = row + y * W;
                    if (sy < 0 || sy >= static_cast<long>(H)) {
                        std::fill(r, r + W, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + static_cast<std::size_t>(sy)) * W;
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        const long sx = static_cast<long>(xx) + ox;
                        r[xx] = (sx < 0 || sx >= static_cast<long>(W)) ? T(0) : src[sx];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t pad, T* dx) {
    const std::size_t HW = H * W;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * HW;
                const long oy = static_cast<long>(ky) - static_cast<long>(pad);
                const long ox = static_cast<long>(kx) - static_cast<long>(pad);
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + oy;
                    if (sy < 0 || sy >= static_cast<long>(H)) continue;
                    T* dst = dx + (c * H + static_cast<std::size_t>(sy)) * W;
                    const T* r = row + y * W;
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        const long sx = static_cast<long>(xx) + ox;
                        if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += r[xx];
                    }
                }
            }
}

} // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    a.value().require_same_shape(b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        if (a.requires_grad()) a.grad_buffer() += n.grad;
        if (b.requires_grad()) b.grad_buffer() += n.grad;
    });
}

// Sum of weighted scalars; zero weights still keep the term in the graph.
template <typename T>
Var<T> weighted_sum(std::span<const std::pair<T, Var<T>>> terms) {
    T total{0};
    std::vector<Var<T>> parents;
    for (const auto& [w, v] : terms) {
        if (v.value().numel() != 1) throw ShapeError("weighted_sum expects scalars");
        total += w * v.value()[0];
        parents.push_back(v);
    }
    std::vector<std::pair<T, Var<T>>> owned(terms.begin(), terms.end());
    return make_result<T>(Tensor<T>::scalar(total), parents, [owned](Node<T>& n) mutable {
        for (auto& [w, v] : owned)
            if (v.requires_grad()) v.grad_buffer()[0] += w * n.grad[0];
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::require_rank(x.shape(), 4, "conv2d input");
    detail::require_rank(w.shape(), 4, "conv2d weight");
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Ci || w.dim(3) != k || k % 2 == 0)
        throw ShapeError("conv2d weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    if (b.value().numel() != Co) throw ShapeError("conv2d bias size mismatch");
    const std::size_t pad = k / 2, HW = H * W, K = Ci * k * k;
    Tensor<T> out({B, Co, H, W});
    std::vector<T> col(K * HW);
    CMatMap<T> Wm(w.value().data(), Co, K);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.value().data(), Co);
    for (std::size_t n = 0; n < B; ++n) {
        const T* xn = x.value().data() + n * Ci * HW;
        if (k == 1) {
            MatMap<T>(out.data() + n * Co * HW, Co, HW).noalias() = Wm * CMatMap<T>(xn, Ci, HW);
        } else {
            detail::im2col(xn, Ci, H, W, k, pad, col.data());
            MatMap<T>(out.data() + n * Co * HW, Co, HW).noalias() = Wm * CMatMap<T>(col.data(), K, HW);
        }
        MatMap<T>(out.data() + n * Co * HW, Co, HW).colwise() += bias;
    }
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, B, Ci, H, W, Co, k, pad, HW, K](Node<T>& node) mutable {
        std::vector<T> col(K * HW), dcol(K * HW);
        CMatMap<T> Wm(w.value().data(), Co, K);
        for (std::size_t n = 0; n < B; ++n) {
            CMatMap<T> g(node.grad.data() + n * Co * HW, Co, HW);
            const T* xn = x.value().data() + n * Ci * HW;
            if (b.requires_grad()) {
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(b.grad_buffer().data(), Co);
                db += g.rowwise().sum();
            }
            if (w.requires_grad()) {
                MatMap<T> dW(w.grad_buffer().data(), Co, K);
                if (k == 1) dW.noalias() += g * CMatMap<T>(xn, Ci, HW).transpose();
                else {
                    detail::im2col(xn, Ci, H, W, k, pad, col.data());
                    dW.noalias() += g * CMatMap<T>(col.data(), K, HW).transpose();
                }
            }
            if (x.requires_grad()) {
                T* dx = x.grad_buffer().data() + n * Ci * HW;
                if (k == 1) {
                    MatMap<T>(dx, Ci, HW).noalias() += Wm.transpose() * g;
                } else {
                    MatMap<T>(dcol.data(), K, HW).noalias() = Wm.transpose() * g;
                    detail::col2im_add(dcol.data(), Ci, H, W, k, pad, dx);
                }
            }
        }
    });
}

// 2x2 stride-2 transposed convolution; w is [Ci, Co, 2, 2].
template <typename T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::require_rank(x.shape(), 4, "conv_transpose2x2 input");
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (w.shape() != Shape{Ci, w.dim(1), 2, 2}) throw ShapeError("conv_transpose2x2 weight shape " + shape_str(w.shape()));
    const std::size_t Co = w.dim(1), HW = H * W;
    if (b.value().numel() != Co) throw ShapeError("conv_transpose2x2 bias size mismatch");
    // Wt: [Co*4, Ci], row (co*4 + dy*2 + dx)
    RowMat<T> Wt = CMatMap<T>(w.value().data(), Ci, Co * 4).transpose();
    Tensor<T> out({B, Co, 2 * H, 2 * W});
    RowMat<T> tmp(Co * 4, HW);
    for (std::size_t n = 0; n < B; ++n) {
        tmp.noalias() = Wt * CMatMap<T>(x.value().data() + n * Ci * HW, Ci, HW);
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t q = 0; q < 4; ++q) {
                const std::size_t dy = q / 2, dx = q % 2;
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t xx = 0; xx < W; ++xx)
                        out.at(n, co, 2 * y + dy, 2 * xx + dx) = tmp(co * 4 + q, y * W + xx) + b.value()[co];
            }
    }
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, B, Ci, H, W, Co, HW, Wt](Node<T>& node) mutable {
        RowMat<T> g(Co * 4, HW);
        RowMat<T> dWt = RowMat<T>::Zero(Co * 4, Ci);
        for (std::size_t n = 0; n < B; ++n) {
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t q = 0; q < 4; ++q) {
                    const std::size_t dy = q / 2, dx = q % 2;
                    for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t xx = 0; xx < W; ++xx)
                            g(co * 4 + q, y * W + xx) = node.grad.at(n, co, 2 * y + dy, 2 * xx + dx);
                }
            CMatMap<T> xn(x.value().data() + n * Ci * HW, Ci, HW);
            if (w.requires_grad()) dWt.noalias() += g * xn.transpose();
            if (x.requires_grad()) MatMap<T>(x.grad_buffer().data() + n * Ci * HW, Ci, HW).noalias() += Wt.transpose() * g;
            if (b.requires_grad())
                for (std::size_t co = 0; co < Co; ++co) b.grad_buffer()[co] += g.block(co * 4, 0, 4, HW).sum();
        }
        if (w.requires_grad()) MatMap<T>(w.grad_buffer().data(), Ci, Co * 4) += dWt.transpose();
    });
}

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
    detail::require_rank(x.shape(), 4, "max_pool2");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw ShapeError("max_pool2 needs even spatial size, got " + shape_str(x.shape()));
    const std::size_t oh = H / 2, ow = W / 2;
    Tensor<T> out({B, C, oh, ow});
    std::vector<std::uint32_t> arg(out.numel());
    const auto& xv = x.value();
    for (std::size_t p = 0; p < B * C; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                std::size_t best = p * H * W + (2 * y) * W + 2 * xx;
                for (std::size_t d = 1; d < 4; ++d) {
                    const std::size_t idx = p * H * W + (2 * y + d / 2) * W + 2 * xx + d % 2;
                    if (xv[idx] > xv[best]) best = idx;
                }
                const std::size_t o = p * oh * ow + y * ow + xx;
                out[o] = xv[best];
                arg[o] = static_cast<std::uint32_t>(best);
            }
    return make_result<T>(std::move(out), {x}, [x, arg = std::move(arg)](Node<T>& n) mutable {
        auto& g = x.grad_buffer();
        for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += n.grad[o];
    });
}

// Average pooling with factor 1/lambda; the differentiable counterpart of down().
template <typename T>
Var<T> avg_down(const Var<T>& x, double lambda) {
    Tensor<T> out = down(x.value(), lambda);
    const std::size_t f = down_factor(lambda);
    return make_result<T>(std::move(out), {x}, [x, f](Node<T>& n) mutable {
        auto& g = x.grad_buffer();
        const Shape& s = x.shape();
        const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
        const std::size_t oh = H / f, ow = W / f, planes = g.numel() / (H * W);
        const T inv = T(1) / static_cast<T>(f * f);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx)
                    g[p * H * W + y * W + xx] += n.grad[p * oh * ow + (y / f) * ow + xx / f] * inv;
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    detail::require_rank(a.shape(), 4, "concat a");
    detail::require_rank(b.shape(), 4, "concat b");
    const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    if (b.dim(0) != B || b.dim(2) != H || b.dim(3) != W)
        throw ShapeError("concat_channels " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t HW = H * W;
    Tensor<T> out({B, Ca + Cb, H, W});
    for (std::size_t n = 0; n < B; ++n) {
        std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
        std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + n * (Ca + Cb) * HW + Ca * HW);
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](Node<T>& node) mutable {
        for (std::size_t n = 0; n < B; ++n) {
            const T* g = node.grad.data() + n * (Ca + Cb) * HW;
            if (a.requires_grad()) {
                T* d = a.grad_buffer().data() + n * Ca * HW;
                for (std::size_t i = 0; i < Ca * HW; ++i) d[i] += g[i];
            }
            if (b.requires_grad()) {
                T* d = b.grad_buffer().data() + n * Cb * HW;
                for (std::size_t i = 0; i < Cb * HW; ++i) d[i] += g[Ca * HW + i];
            }
        }
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01)) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = v > T(0) ? v : slope * v;
    return make_result<T>(std::move(out), {x}, [x, slope](Node<T>& n) mutable {
        auto& g = x.grad_buffer();
        const auto& xv = x.value();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += xv[i] > T(0) ? n.grad[i] : slope * n.grad[i];
    });
}

// Per-sample normalization over groups of channels (and H x W), per-channel affine.
// groups == C is instance normalization; groups == 1 is layer normalization.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups, T eps = T(1e-5)) {
    detail::require_rank(x.shape(), 4, "group_norm");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.value().numel() != C || beta.value().numel() != C) throw ShapeError("group_norm affine size mismatch");
    if (groups == 0 || C % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
    const std::size_t cpg = C / groups, M = cpg * HW;
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(B * groups);
    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (n * C + g * cpg) * HW;
            const T* src = x.value().data() + base;
            T mean{0};
            for (std::size_t i = 0; i < M; ++i) mean += src[i];
            mean /= static_cast<T>(M);
            T var{0};
            for (std::size_t i = 0; i < M; ++i) var += (src[i] - mean) * (src[i] - mean);
            var /= static_cast<T>(M);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[n * groups + g] = is;
            for (std::size_t i = 0; i < M; ++i) {
                const std::size_t c = g * cpg + i / HW;
                xhat[base + i] = (src[i] - mean) * is;
                out[base + i] = gamma.value()[c] * xhat[base + i] + beta.value()[c];
            }
        }
    return make_result<T>(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, HW, groups, cpg,
                           M](Node<T>& node) mutable {
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t g = 0; g < groups; ++g) {
                const std::size_t base = (n * C + g * cpg) * HW;
                const T* gr = node.grad.data() + base;
                const T* xh = xhat.data() + base;
                T sg{0}, sgx{0};
                for (std::size_t i = 0; i < M; ++i) {
                    const std::size_t c = g * cpg + i / HW;
                    if (gamma.requires_grad()) gamma.grad_buffer()[c] += gr[i] * xh[i];
                    if (beta.requires_grad()) beta.grad_buffer()[c] += gr[i];
                    const T gh = gr[i] * gamma.value()[c];
                    sg += gh;
                    sgx += gh * xh[i];
                }
                if (x.requires_grad()) {
                    T* dx = x.grad_buffer().data() + base;
                    const T k = inv_std[n * groups + g] / static_cast<T>(M);
                    for (std::size_t i = 0; i < M; ++i) {
                        const T gh = gr[i] * gamma.value()[g * cpg + i / HW];
                        dx[i] += k * (static_cast<T>(M) * gh - sg - xh[i] * sgx);
                    }
                }
            }
    });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    return group_norm(x, gamma, beta, x.value().rank() == 4 ? x.dim(1) : 1, eps);
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    detail::require_rank(x.shape(), 4, "global_avg_pool");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> out({B, C});
    for (std::size_t p = 0; p < B * C; ++p) {
        T s{0};
        for (std::size_t i = 0; i < HW; ++i) s += x.value()[p * HW + i];
        out[p] = s / static_cast<T>(HW);
    }
    return make_result<T>(std::move(out), {x}, [x, B, C, HW](Node<T>& n) mutable {
        auto& g = x.grad_buffer();
        for (std::size_t p = 0; p < B * C; ++p) {
            const T v = n.grad[p] / static_cast<T>(HW);
            for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] += v;
        }
    });
}

// y = x W^T + b with x [B, Ci], W [Co, Ci].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::require_rank(x.shape(), 2, "linear input");
    const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
    if (w.shape() != Shape{Co, Ci} || b.value().numel() != Co)
        throw ShapeError("linear weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    Tensor<T> out({B, Co});
    MatMap<T> O(out.data(), B, Co);
    O.noalias() = CMatMap<T>(x.value().data(), B, Ci) * CMatMap<T>(w.value().data(), Co, Ci).transpose();
    O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), Co);
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, B, Ci, Co](Node<T>& n) mutable {
        CMatMap<T> g(n.grad.data(), B, Co);
        if (x.requires_grad()) MatMap<T>(x.grad_buffer().data(), B, Ci).noalias() += g * CMatMap<T>(w.value().data(), Co, Ci);
        if (w.requires_grad()) MatMap<T>(w.grad_buffer().data(), Co, Ci).noalias() += g.transpose() * CMatMap<T>(x.value().data(), B, Ci);
        if (b.requires_grad())
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.grad_buffer().data(), Co) += g.colwise().sum();
    });
}

// Mean per-pixel cross-entropy; logits [B, K, H, W], labels B*H*W class ids.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> labels) {
    detail::require_rank(logits.shape(), 4, "cross_entropy");
    const std::size_t B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    if (labels.size() != B * HW) throw ShapeError("cross_entropy label count mismatch");
    Tensor<T> prob(logits.shape());
    double total = 0.0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            T m = logits.value()[(n * K) * HW + i];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, logits.value()[(n * K + k) * HW + i]);
            T z{0};
            for (std::size_t k = 0; k < K; ++k) {
                const T e = std::exp(logits.value()[(n * K + k) * HW + i] - m);
                prob[(n * K + k) * HW + i] = e;
                z += e;
            }
            for (std::size_t k = 0; k < K; ++k) prob[(n * K + k) * HW + i] /= z;
            const std::uint8_t lab = labels[n * HW + i];
            if (lab >= K) throw ShapeError("label id exceeds class count");
            total -= static_cast<double>(logits.value()[(n * K + lab) * HW + i] - m - std::log(z));
        }
    const T count = static_cast<T>(B * HW);
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(total) / count), {logits},
                          [logits, prob = std::move(prob), lab = std::move(lab), B, K, HW, count](Node<T>& n) mutable {
        auto& g = logits.grad_buffer();
        const T s = n.grad[0] / count;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    const std::size_t idx = (b * K + k) * HW + i;
                    g[idx] += s * (prob[idx] - (lab[b * HW + i] == k ? T(1) : T(0)));
                }
    });
}

} // namespace macl::nn
