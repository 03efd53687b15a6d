#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pfm/tensor.hpp"

namespace pfm {

/// Persistent learnable buffer. Gradients accumulate across tapes until
/// zero_grad() is called, which is what gradient accumulation relies on.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;  // empty until a backward pass touches it

    Parameter() = default;
    explicit Parameter(Shape shape) : value(std::move(shape)) {}
    explicit Parameter(Tensor<T> v) : value(std::move(v)) {}

    bool has_grad() const { return grad.size() != 0; }

    void ensure_grad() {
        if (!has_grad()) grad = Tensor<T>(value.shape());
    }

    void zero_grad() {
        if (has_grad()) grad.fill(T(0));
    }
};

template <typename T>
class Tape;

/// Lightweight handle to a node on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    i64 id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const;
    const Shape& shape() const;
    bool requires_grad() const;
    bool has_grad() const;
    const Tensor<T>& grad() const;
};

/// Dynamically recorded operation tape for one forward pass. Node ids are
/// creation-ordered, so every input id is smaller than its consumer's id and
/// a reverse sweep is a valid topological order for backprop.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape<T>&)>;

    struct Node {
        const char* op = "";
        std::vector<i64> inputs;
        Tensor<T> value;
        Tensor<T> grad;  // empty until needed
        bool needs_grad = false;
        Parameter<T>* param = nullptr;
        BackFn back;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    i64 size() const { return static_cast<i64>(nodes_.size()); }

    Node& node(i64 id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(i64 id) const { return nodes_[static_cast<std::size_t>(id)]; }

    const Tensor<T>& value(i64 id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Leaf holding external data (an input image, a constant).
    Var<T> input(Tensor<T> v, bool requires_grad = false) {
        Node n;
        n.op = "leaf";
        n.value = std::move(v);
        n.needs_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var<T>{this, size() - 1};
    }

    Var<T> constant(Tensor<T> v) { return input(std::move(v), false); }

    /// Leaf bound to a persistent Parameter. Registering the same parameter
    /// twice on one tape returns the same node so fan-out gradients sum.
    Var<T> param(Parameter<T>& p) {
        auto it = param_ids_.find(&p);
        if (it != param_ids_.end()) return Var<T>{this, it->second};
        Node n;
        n.op = "param";
        n.value = p.value;  // copy; the tape owns its forward values
        n.needs_grad = true;
        n.param = &p;
        nodes_.push_back(std::move(n));
        i64 id = size() - 1;
        param_ids_.emplace(&p, id);
        return Var<T>{this, id};
    }

    /// Registers one recorded operation. The value must already be computed;
    /// `back` propagates the node's grad into its inputs' grad buffers.
    Var<T> record(const char* op, std::vector<i64> inputs, Tensor<T> value, BackFn back) {
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        for (i64 in : n.inputs) {
            if (in < 0 || in >= size()) throw std::logic_error("record: input id out of range");
            if (node(in).needs_grad) n.needs_grad = true;
        }
        n.value = std::move(value);
        if (n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{this, size() - 1};
    }

    /// Zero-initialized grad buffer for a node, created on first touch.
    Tensor<T>& grad_buf(i64 id) {
        Node& n = node(id);
        if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    bool has_grad(i64 id) const { return node(id).grad.size() != 0; }

    /// Reverse-mode sweep from a scalar root. Populates node grads and
    /// accumulates into bound Parameters' grad buffers.
    void backward(Var<T> root) {
        if (root.tape != this) throw std::invalid_argument("backward: variable from another tape");
        Node& r = node(root.id);
        if (r.value.size() != 1) {
            throw std::invalid_argument("backward requires a scalar root, got shape " +
                                        shape_str(r.value.shape()));
        }
        if (!r.needs_grad) return;  // nothing reachable requires grad
        grad_buf(root.id).fill(T(1));
        for (i64 id = root.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.back) n.back(*this);
            if (n.param != nullptr) {
                n.param->ensure_grad();
                T* dst = n.param->grad.data();
                const T* src = n.grad.data();
                for (i64 i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
            }
        }
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T>*, i64> param_ids_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->node(id).value;
}

template <typename T>
const Shape& Var<T>::shape() const {
    return tape->node(id).value.shape();
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape->node(id).needs_grad;
}

template <typename T>
bool Var<T>::has_grad() const {
    return tape->has_grad(id);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
    if (!has_grad()) {
        throw std::runtime_error(std::string("no gradient present for node of op '") +
                                 tape->node(id).op + "'");
    }
    return tape->node(id).grad;
}

}  // namespace pfm
