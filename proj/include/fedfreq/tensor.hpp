// Dense double-precision tensor with reverse-mode automatic differentiation.
//
// Tensors are cheap handles onto a shared node. Every op in ops.hpp produces
// a fresh node whose backward closure scatters the node's gradient into its
// parents; backward() runs the closures in reverse topological order. Nodes
// are treated as immutable once an op has written them, so a forward graph
// can be dropped by releasing the loss tensor.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedfreq/error.hpp"

namespace fedfreq {

enum class Mode { train, eval };

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t size() const { return int64_t(values.size()); }

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad;
    }
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto node = std::make_shared<TensorNode>();
        node->values.assign(size_t(shape_numel(shape)), 0.0);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.node_->values) v = value;
        return t;
    }

    static Tensor of(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false) {
        if (shape_numel(shape) != int64_t(values.size()))
            throw DimensionError("value count does not match shape");
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return of({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int ndim() const { return int(node_->shape.size()); }
    int dim(int i) const { return node_->shape[size_t(i)]; }
    int64_t size() const { return node_->size(); }

    std::span<double> data() { return node_->values; }
    std::span<const double> data() const { return node_->values; }
    double item() const {
        if (size() != 1) throw DimensionError("item() on non-scalar tensor");
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const {
        if (node_->grad.empty()) throw Error("tensor has no gradient; run backward first");
        return node_->grad;
    }

    // True when the two handles share one node (used by pass-through ops).
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Deep copy of values only; the copy is a detached leaf.
    Tensor clone(bool requires_grad = false) const {
        return of(node_->shape, node_->values, requires_grad);
    }

    std::shared_ptr<TensorNode> node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

// Builds the output node of an op. `parents` lists every input whose gradient
// the closure populates; the node only participates in backward when at least
// one parent requires grad.
inline Tensor make_op_node(std::vector<int> shape, std::vector<Tensor> parents,
                           std::function<void(TensorNode&)> backward_fn) {
    Tensor out = Tensor::zeros(std::move(shape));
    bool track = false;
    for (const Tensor& p : parents)
        if (p.defined() && p.node()->requires_grad) track = true;
    if (track) {
        auto node = out.node();
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents)
            if (p.defined()) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return out;
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate into the grad
// buffers of every node with requires_grad reachable from `loss`.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw DimensionError("backward() expects a scalar loss");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS: children complete before parents, so the
    // reversed order is a valid topological order for the backward sweep.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && visited.insert(p).second)
                stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace fedfreq
