#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "raunet/errors.hpp"
#include "raunet/meter.hpp"

namespace raunet {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace autograd {

// Reverse-mode recording is on by default; NoGradGuard switches it off for
// inference so no graph is retained.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Monotone per-thread op counter. Creation order is tape order: an op's
// output always carries a larger id than all of its inputs, so walking ids
// in decreasing order is a reverse topological traversal.
inline std::int64_t next_tape_id() {
    thread_local std::int64_t counter = 0;
    return ++counter;
}

}  // namespace autograd

class NoGradGuard {
public:
    NoGradGuard() : prev_(autograd::grad_mode()) { autograd::grad_mode() = false; }
    ~NoGradGuard() { autograd::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <typename S>
struct Node {
    Shape shape;
    MVec<S> data;
    MVec<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::int64_t tape_id = 0;

    // Edges to producing inputs plus the pull-back closure. Present only on
    // outputs recorded while grad mode was on.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

}  // namespace detail

// Dense N-d array with optional gradient tracking. Copying a Tensor copies
// the handle; the underlying buffer is shared and treated as immutable once
// it has been consumed by an op (grad accumulation is the one exception).
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(shape_numel(t.node_->shape), value);
        t.node_->requires_grad = requires_grad;
        t.node_->tape_id = autograd::next_tape_id();
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t = zeros(std::move(shape), requires_grad);
        std::copy(values.begin(), values.end(), t.node_->data.begin());
        return t;
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return filled({1}, value, requires_grad);
    }

    static Tensor eye(int n) {
        Tensor t = zeros({n, n});
        for (int i = 0; i < n; ++i) t.node_->data[static_cast<std::size_t>(i) * n + i] = S(1);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return node_->data.size(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    std::span<const S> data() const { return {node_->data.data(), node_->data.size()}; }
    // Mutation is only legal before the tensor is consumed by an op.
    std::span<S> mutable_data() { return {node_->data.data(), node_->data.size()}; }

    S item() const {
        if (numel() != 1)
            throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    S at(std::initializer_list<int> idx) const {
        std::size_t off = 0;
        std::size_t axis = 0;
        for (int i : idx) {
            off = off * static_cast<std::size_t>(node_->shape[axis]) + static_cast<std::size_t>(i);
            ++axis;
        }
        return node_->data[off];
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const S> grad_data() const { return {node_->grad.data(), node_->grad.size()}; }

    Tensor grad() const {
        if (!has_grad())
            throw Error("tensor has no gradient; call backward() on a loss that reaches it");
        Tensor g = zeros(node_->shape);
        std::copy(node_->grad.begin(), node_->grad.end(), g.node_->data.begin());
        return g;
    }

    void zero_grad() {
        if (node_) node_->grad.clear();
    }

    detail::Node<S>* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node<S>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node<S>> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

namespace detail {

// Create an op output. `backward` pulls the output's grad into the parents'
// grads; it is recorded only when grad mode is on and some input needs it.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<Tensor<S>> inputs,
                  std::function<void(Node<S>&)> backward) {
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    bool track = false;
    for (const auto& in : inputs) track = track || in.requires_grad();
    if (track && autograd::grad_mode()) {
        auto* node = out.node();
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return out;
}

}  // namespace detail

// Run reverse-mode accumulation from a scalar loss. Every requires_grad
// tensor reachable through the recorded graph ends up with a populated
// (possibly zero) grad; grads accumulate with += across fan-out.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() expects a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));

    using NodeT = detail::Node<S>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<NodeT*> stack{loss.node()};
    seen.insert(loss.node());
    while (!stack.empty()) {
        NodeT* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // Decreasing tape id == reverse topological order; every op runs once.
    std::sort(order.begin(), order.end(),
              [](const NodeT* a, const NodeT* b) { return a->tape_id > b->tape_id; });
    loss.node()->ensure_grad();
    loss.node()->grad[0] = S(1);
    for (NodeT* n : order) {
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (NodeT* n : order) {
        if (n->requires_grad) n->ensure_grad();
    }
}

}  // namespace raunet
