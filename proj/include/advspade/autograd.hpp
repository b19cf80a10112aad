#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "advspade/tensor.hpp"

namespace advspade {

/// Graph recording switch. Frozen evaluation paths turn it off to skip
/// building backward closures.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::vector<char> tracked;  // per input: required grad when this node was built
    std::function<void(Node&)> backward_fn;

    [[nodiscard]] bool tracks(std::size_t i) const { return i < tracked.size() && tracked[i]; }

    Tensor<T>& grad_buffer() {
        if (grad.empty() && value.numel() != 0) grad = Tensor<T>(value.shape());
        return grad;
    }
    void accumulate(const Tensor<T>& g) {
        if (grad.empty()) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

/// Reverse-mode differentiable tensor handle. Copies share the same node.
template <typename T>
class Var {
public:
    using NodePtr = std::shared_ptr<Node<T>>;

    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
    [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() const { return node_->value; }
    [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) const { node_->requires_grad = on; }
    [[nodiscard]] const Tensor<T>& grad() const { return node_->grad_buffer(); }
    void zero_grad() const { node_->grad = Tensor<T>(); }
    [[nodiscard]] const NodePtr& node() const { return node_; }
    [[nodiscard]] const std::string& op() const { return node_->op; }

    /// Constant view of the same value with no history.
    [[nodiscard]] Var detach() const { return Var(node_->value, false); }

    /// Backpropagate from this node. Non-scalar roots need an explicit seed.
    void backward() const {
        if (value().numel() != 1) {
            throw ShapeError("backward() without seed requires a scalar, got " + shape().str());
        }
        backward(Tensor<T>(shape(), T(1)));
    }

    void backward(const Tensor<T>& seed) const {
        seed.require_same(value());
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order;
        topological_order(order);
        node_->accumulate(seed);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>& n = **it;
            if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
        }
        // Interior gradients are transient; leaves keep theirs for the optimizer.
        for (Node<T>* n : order) {
            if (n->backward_fn) n->grad = Tensor<T>();
        }
    }

private:
    void topological_order(std::vector<Node<T>*>& order) const {
        std::unordered_set<Node<T>*> visited;
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->inputs.size()) {
                const std::size_t i = next++;
                Node<T>* child = n->inputs[i].get();
                if (n->tracks(i) && visited.insert(child).second) {
                    stack.emplace_back(child, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    NodePtr node_;
};

/// Build an op result. When no input needs gradients (or recording is off)
/// the closure is dropped and the result is a constant leaf.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::string op,
                   std::function<void(Node<T>&)> backward_fn) {
    bool needs = false;
    if (grad_mode_flag()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = std::move(op);
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) {
            node->inputs.push_back(in.node());
            node->tracked.push_back(in.requires_grad() ? 1 : 0);
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

}  // namespace advspade
