// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over Tensor<T>. Each op
// returns a Var holding its value and a closure that pushes the output
// gradient into its parents. Graphs are rebuilt every forward pass.
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "macl/tensor.hpp"

namespace macl {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    void zero_grad() { node_->grad = Tensor<T>(); }
    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

    // Identity of the underlying node, used for parameter sharing checks.
    bool same_node(const Var& o) const { return node_ == o.node_; }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables graph recording for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Builds a result node. The backward closure is kept only when some parent needs gradients.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool needs = false;
    if (grad_mode())
        for (const auto& p : parents) needs = needs || p.requires_grad();
    n->requires_grad = needs;
    if (needs) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(fn);
    }
    return Var<T>::from_node(std::move(n));
}

template <typename T>
Var<T> detach(const Var<T>& v) {
    return Var<T>(v.value(), false);
}

// Runs backpropagation from a scalar root; gradients accumulate into leaves.
template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    if (root.value().numel() != 1) throw ShapeError("backward root must be a scalar");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
            // interior gradients are no longer needed
            if (!n->parents.empty()) n->grad = Tensor<T>();
        }
    }
}

} // namespace macl
