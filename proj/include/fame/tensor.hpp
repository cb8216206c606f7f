#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fame/error.hpp"

namespace fame {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles that records the operations producing it,
/// so that `backward` can propagate gradients to every leaf that requires them.
///
/// A Tensor is a shared handle: copies alias the same storage. Use `clone` for
/// an independent leaf copy.
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty unless requires_grad
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        // Reads this node's grad and accumulates into the parents' grads.
        std::function<void(Node&)> backward_fn;

        double* grad_data() {
            if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
            return grad.data();
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double fill, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, fill), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        validate_shape(shape);
        if (values.size() != shape_numel(shape)) {
            throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        if (requires_grad) node->grad.assign(node->value.size(), 0.0);
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<double> values() { return node_->value; }
    std::span<const double> values() const { return node_->value; }
    double& at(std::size_t i) { return node_->value.at(i); }
    double at(std::size_t i) const { return node_->value.at(i); }

    /// Gradient accumulator; all zeros for a tensor that has not been reached.
    std::span<double> grad() {
        node_->grad_data();
        return node_->grad;
    }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
        }
        return node_->value[0];
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Independent leaf holding a copy of the values.
    Tensor clone(bool requires_grad) const {
        return from(shape(), node_->value, requires_grad);
    }

    /// Same storage viewed without graph history.
    Tensor detach() const { return from(shape(), node_->value, false); }

    Node& node() { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    /// Internal: result of an operation. `backward_fn` receives the result node.
    static Tensor make_result(Shape shape, std::vector<double> values,
                              std::vector<Tensor> inputs,
                              std::function<void(Node&)> backward_fn) {
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        for (auto& in : inputs) {
            if (in.requires_grad()) node->requires_grad = true;
        }
        if (node->requires_grad) {
            node->parents.reserve(inputs.size());
            for (auto& in : inputs) node->parents.push_back(in.node_);
            node->backward_fn = std::move(backward_fn);
        }
        return Tensor(std::move(node));
    }

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
    }

    std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Each reachable node is visited once
/// in reverse topological order; leaves accumulate (sum) into their grads.
inline void backward(Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    using NodePtr = Tensor::Node*;
    std::vector<NodePtr> order;
    std::unordered_set<NodePtr> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodePtr parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior nodes start from zero each sweep; leaves keep accumulating.
    for (NodePtr n : order) {
        if (n->backward_fn) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    loss.node().grad_data()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodePtr n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace fame
