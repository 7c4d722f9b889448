#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chybrid/error.hpp"

namespace chybrid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// One value in the computation graph. Leaves are created by the user;
/// interior nodes by ops, which record their inputs and a backward closure
/// only when some input requires a gradient.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

/// Dense row-major tensor of doubles with optional gradient tracking.
/// Copies are shallow: two Tensor objects may refer to the same node.
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
    }

    static Tensor from_node(std::shared_ptr<Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    /// Direct write access. Only meaningful for leaves (parameters, inputs).
    std::span<double> data_mut() { return node_->data; }
    double at(std::size_t i) const { return node_->data.at(i); }

    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> grad_mut() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    const std::string& op() const { return node_->op; }
    const std::shared_ptr<Node>& node() const { return node_; }

    /// Same values, no history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

  private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

namespace detail {

/// Builds the result of an op. The backward closure is retained only if
/// some input participates in differentiation.
inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(const Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = std::string(op);
    bool track = false;
    if (grad_mode_flag())
        for (const auto& in : inputs) track = track || in.requires_grad();
    if (track) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(node));
}

inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                          const std::vector<Tensor>& inputs,
                          std::function<void(const Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = std::string(op);
    bool track = false;
    if (grad_mode_flag())
        for (const auto& in : inputs) track = track || in.requires_grad();
    if (track) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(node));
}

}  // namespace detail

/// Nodes reachable from `root` that require gradients, inputs before users.
inline std::vector<Node*> topological_order(const Tensor& root) {
    std::vector<Node*> order;
    if (!root.defined() || !root.requires_grad()) return order;
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS; deep LSTM unrolls would overflow recursion.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

/// Accumulates d(loss)/d(t) into the grad of every tensor `loss` depends on.
/// Gradients add to whatever is already stored; clear them between steps.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward() requires a scalar loss");
    if (!loss.requires_grad()) return;
    const auto order = topological_order(loss);
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

/// Throws NumericError naming `what` if any entry is NaN or infinite.
inline void assert_finite(const Tensor& t, std::string_view what = "tensor") {
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i]))
            throw NumericError(std::string(what) + " has non-finite value " + std::to_string(d[i]) +
                               " at flat index " + std::to_string(i));
    }
}

}  // namespace chybrid
