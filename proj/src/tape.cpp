// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "lqat/autodiff.hpp"

namespace lqat {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Param: return "parameter";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::EmbedLookup: return "embed_lookup";
        case OpKind::Softmax: return "softmax_lastdim";
        case OpKind::RmsNorm: return "rms_norm";
        case OpKind::Silu: return "silu";
        case OpKind::ElementwiseMul: return "elementwise_mul";
        case OpKind::Rope: return "rope_rotate";
        case OpKind::Transpose: return "transpose";
        case OpKind::Reshape: return "reshape";
        case OpKind::Slice: return "slice";
        case OpKind::Concat: return "concat";
        case OpKind::CrossEntropyMean: return "cross_entropy_mean";
        case OpKind::SoftCrossEntropy: return "soft_cross_entropy_mean";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::FakeQuant: return "fake_quant";
        case OpKind::FakeQuantLearnable: return "fake_quant_learnable";
    }
    return "unknown";
}

template <typename T>
Var<T> Tape<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.owned = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::constant_ref(const Tensor<T>& value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.external = &value;
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.owned = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
    Node n;
    n.kind = OpKind::Param;
    n.external = &param.value;
    n.requires_grad = true;
    n.param = &param;
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
    if (options_.check_finite && !value.all_finite()) {
        throw NumericError(std::string("non-finite output in op ") + op_name(kind));
    }
    bool needs = false;
    for (std::size_t id : inputs) needs = needs || nodes_.at(id).requires_grad;
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.owned = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    return push(std::move(n));
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
    Tensor<T>& g = grads_.at(id);
    if (g.empty()) g = Tensor<T>(value(id).shape());
    return g;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Tensor<T>(value(v.id).shape());
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    const Tensor<T>& lv = value(loss.id);
    if (lv.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " + to_string(lv.shape()));
    }
    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[loss.id] = Tensor<T>(lv.shape(), T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || grads_[id].empty()) continue;
        if (n.param != nullptr) {
            T* dst = n.param->grad.ptr();
            const T* src = grads_[id].ptr();
            for (std::size_t i = 0; i < grads_[id].size(); ++i) dst[i] += src[i];
        } else if (n.backward) {
            // Inputs always precede the node, so grads_[id] is not aliased.
            n.backward(*this, id, grads_[id]);
        }
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace lqat
