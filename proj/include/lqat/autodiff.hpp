// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation whose inputs require gradients, together
// with a closure holding the values its backward rule needs. backward() walks
// the nodes once, in reverse insertion order, so gradient accumulation has a
// single fixed order and runs are bit-reproducible. Operations on inputs that
// do not require gradients are still evaluated through the tape (which owns
// their values) but record no backward rule.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lqat/tensor.hpp"

namespace lqat {

enum class OpKind : std::uint8_t {
    Leaf,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    EmbedLookup,
    Softmax,
    RmsNorm,
    Silu,
    ElementwiseMul,
    Rope,
    Transpose,
    Reshape,
    Slice,
    Concat,
    CrossEntropyMean,
    SoftCrossEntropy,
    Log,
    Exp,
    Sum,
    Mean,
    FakeQuant,
    FakeQuantLearnable,
};

const char* op_name(OpKind kind);

/// Trainable tensor: value plus a zero-initialized gradient of the same shape.
template <typename T>
class Parameter {
public:
    Parameter() = default;
    explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.data().begin(), grad.data().end(), T{0}); }

    Tensor<T> value;
    Tensor<T> grad;
};

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

template <typename T>
class Tape {
public:
    // Receives the tape, the node's own id (its value is tape.value(self)) and
    // the gradient flowing into it.
    using BackwardFn = std::function<void(Tape&, std::size_t self, const Tensor<T>& grad_out)>;

    struct Options {
        // Reject NaN/Inf outputs with a NumericError naming the op.
        bool check_finite = true;
    };

    Tape() = default;
    explicit Tape(Options options) : options_(options) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    // Constant that refers to caller-owned storage; it must outlive the tape.
    Var<T> constant_ref(const Tensor<T>& value);
    Var<T> variable(Tensor<T> value);
    // Leaf bound to a Parameter; backward() adds into param.grad.
    Var<T> parameter(Parameter<T>& param);

    // Appends an op node. The backward rule is kept only if some input
    // requires gradients.
    Var<T> record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward);

    void backward(Var<T> loss);

    const Tensor<T>& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    OpKind kind(std::size_t id) const { return nodes_[id].kind; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
    std::size_t size() const { return nodes_.size(); }
    const Options& options() const { return options_; }

    // Gradient of a node after backward(); zeros if nothing flowed into it.
    Tensor<T> grad(Var<T> v) const;

    // Accumulation buffer for a node during backward (zero-filled on first use).
    Tensor<T>& grad_buffer(std::size_t id);

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<std::size_t> inputs;
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
    };

    Var<T> push(Node node);

    Options options_{};
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape->requires_grad(id);
}

// ---------------------------------------------------------------------------
// Operation catalogue. All functions evaluate eagerly and record on the tape
// of their first argument. Broadcasting is limited to a one-element operand
// (scalar times tensor) and a vector along the last dimension (bias style).

enum class Trans : bool { No = false, Yes = true };

// [m,k] x [k,n] -> [m,n], or batched [b,m,k] x [b,k,n] -> [b,m,n].
// With Trans::Yes the right operand is stored [n,k] (resp. [b,n,k]).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, Trans trans_b = Trans::No);

// Same shape, or b is a vector matching a's last dimension.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// Product where b has one element, or b is a vector matching a's last dimension.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);

template <typename T>
Var<T> elementwise_mul(Var<T> a, Var<T> b);

// table [vocab, dim], ids -> [ids.size(), dim]
template <typename T>
Var<T> embed_lookup(Var<T> table, std::span<const Token> ids);

// Softmax over the last dimension. With `causal`, the input is viewed as
// [..., rows, cols] and row r may only attend to columns c <= r + offset.
template <typename T>
Var<T> softmax_lastdim(Var<T> x, bool causal = false, std::size_t offset = 0);

// x / sqrt(mean(x^2) + eps) * gain over the last dimension.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps);

template <typename T>
Var<T> silu(Var<T> x);

// Rotary embedding on x viewed as [..., seq, heads, head_dim]; pairs
// (2i, 2i+1) of position p rotate by p * base^(-2i/head_dim).
template <typename T>
Var<T> rope_rotate(Var<T> x, std::size_t position_offset, T base);

template <typename T>
Var<T> transpose(Var<T> x, std::vector<std::size_t> perm);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t start, std::size_t length);

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);

// Mean over rows of -log softmax(logits)[target]. logits [n, c].
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, std::span<const Token> targets);

// Mean over rows of -sum_c softmax(teacher)_c * log softmax(logits)_c.
// The teacher logits are a constant [n, c].
template <typename T>
Var<T> soft_cross_entropy_mean(Var<T> logits, const Tensor<T>& teacher_logits);

template <typename T>
Var<T> log(Var<T> x);

template <typename T>
Var<T> exp(Var<T> x);

template <typename T>
Var<T> sum(Var<T> x);

template <typename T>
Var<T> mean(Var<T> x);

// Max over elements of |analytic - central difference| / max(1, |analytic|).
template <typename T>
T grad_check(const std::function<Var<T>(Var<T>)>& f, const Tensor<T>& x, T eps = T(1e-5));

}  // namespace lqat
