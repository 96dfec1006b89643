// Reverse-mode autodiff tape. Nodes are created in execution order
// (define-by-run); each node stores its parents and a closure that scatters
// the node's gradient into them. backward() walks the reachable subgraph in
// reverse creation order, which is a valid reverse topological order by
// construction.

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "atrc/tensor.hpp"

namespace atrc {

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward_op;  // null for leaves

    bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }

    void ensure_grad() {
        if (!has_grad()) grad = TensorT<T>(value.shape());
    }
};

template <typename T>
using VarT = std::shared_ptr<NodeT<T>>;

using Var = VarT<float>;

namespace detail {
inline std::atomic<std::uint64_t> node_counter{1};
}

template <typename T>
VarT<T> make_leaf(TensorT<T> value, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
    return n;
}

template <typename T>
VarT<T> constant(TensorT<T> value) {
    return make_leaf(std::move(value), false);
}

template <typename T>
VarT<T> make_node(TensorT<T> value, std::vector<VarT<T>> parents,
                  std::function<void(NodeT<T>&)> backward_op) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    n->seq = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
    for (auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_op = std::move(backward_op);
    }
    return n;
}

// Accumulates `delta` into the node's grad buffer if it participates in
// differentiation. No-op otherwise.
template <typename T>
void accumulate(NodeT<T>& node, const T* delta, std::size_t len) {
    if (!node.requires_grad) return;
    node.ensure_grad();
    if (len != node.grad.size()) fail("accumulate", "gradient length mismatch");
    T* g = node.grad.data();
    for (std::size_t i = 0; i < len; ++i) g[i] += delta[i];
}

template <typename T>
void accumulate(NodeT<T>& node, const TensorT<T>& delta) {
    accumulate(node, delta.data(), delta.size());
}

// Runs reverse-mode differentiation from a scalar root. Grad buffers of all
// reachable differentiable nodes are zeroed first, so repeated backward
// calls do not accumulate across invocations.
template <typename T>
void backward(const VarT<T>& root) {
    if (!root) fail("backward", "null root");
    if (root->value.size() != 1) fail("backward", "root must be scalar, got " + shape_str(root->value.shape()));
    if (!root->requires_grad) return;

    // Collect the reachable differentiable subgraph.
    std::vector<NodeT<T>*> nodes;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<NodeT<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        NodeT<T>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (auto& p : n->parents) {
            if (p && p->requires_grad && seen.insert(p.get()).second)
                stack.push_back(p.get());
        }
    }

    for (NodeT<T>* n : nodes) {
        n->ensure_grad();
        n->grad.fill(T(0));
    }
    root->grad[0] = T(1);

    std::sort(nodes.begin(), nodes.end(),
              [](const NodeT<T>* a, const NodeT<T>* b) { return a->seq > b->seq; });
    for (NodeT<T>* n : nodes) {
        if (n->backward_op) n->backward_op(*n);
    }
}

}  // namespace atrc
