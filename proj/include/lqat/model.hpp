// SPDX-License-Identifier: Apache-2.0
//
// LLaMA-style decoder-only transformer with fake-quantization hooks.
//
// Every fully-connected layer (Q, K, V, O, GLU gate/up/down and the output
// head) fake-quantizes its weight per output channel and its input per token.
// Keys (after RoPE) and values are fake-quantized per token before attention.
// The embedding table, norms, attention probabilities and residual stream stay
// in full precision.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lqat/autodiff.hpp"
#include "lqat/kernels.hpp"
#include "lqat/quant.hpp"
#include "lqat/tensor.hpp"

namespace lqat {

struct ModelConfig {
    std::size_t vocab_size = 96;
    std::size_t dim = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t ffn_hidden = 344;
    std::size_t max_seq_len = 256;
    double rope_base = 10000.0;
    double rms_eps = 1e-5;

    void validate() const;
    std::size_t head_dim() const { return dim / n_heads; }
    // The last vocabulary id is the end-of-sequence token.
    Token eos() const { return static_cast<Token>(vocab_size - 1); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct QuantizedLinear {
    Parameter<T> weight;  // [out, in]
    // Inputs are divided channelwise by smoothing->scales before quantization.
    std::optional<SmoothingParams<T>> smoothing;
    // Learned activation step (and zero point for asymmetric specs), used when
    // the activation spec has learnable clipping.
    std::optional<Parameter<T>> act_step;
    std::optional<Parameter<T>> act_zero_point;

    std::size_t out_features() const { return weight.value.dim(0); }
    std::size_t in_features() const { return weight.value.dim(1); }
};

template <typename T>
struct LayerWeights {
    Parameter<T> attention_norm;
    QuantizedLinear<T> wq, wk, wv, wo;
    Parameter<T> ffn_norm;
    QuantizedLinear<T> w_gate, w_up, w_down;
};

/// Intermediate values exposed for attention/hidden-state distillation and
/// for activation calibration.
template <typename T>
struct ForwardTrace {
    std::vector<Var<T>> attention;  // per layer, [heads, seq, seq]
    std::vector<Var<T>> hidden;     // per layer, block output [seq, dim]
    // When non-empty (one entry per linear, in linears() order), receives the
    // running channelwise max |input| of every linear layer.
    std::vector<std::vector<T>> input_absmax;

    // Straight-through surrogate for gradient checking. Record stores q(x) - x
    // at every MinMax fake-quant site; Replay substitutes x + stored residual,
    // a smooth function whose true derivative is the straight-through one.
    enum class Surrogate : std::uint8_t { Off, Record, Replay };
    Surrogate surrogate = Surrogate::Off;
    std::vector<Tensor<T>> residuals;
    std::size_t cursor = 0;
};

template <typename T>
class Model {
public:
    Model() = default;
    // Norm gains are one; all other weights are zero until initialized.
    explicit Model(ModelConfig config);
    // Weights drawn from N(0, 0.02^2) using `seed`.
    static Model random(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // Linear layers in a fixed order: per layer wq, wk, wv, wo, w_gate, w_up,
    // w_down, then the output head.
    std::vector<QuantizedLinear<T>*> linears();
    std::vector<const QuantizedLinear<T>*> linears() const;
    std::vector<std::string> linear_names() const;

    // All trainable tensors with their checkpoint names.
    std::vector<std::pair<std::string, Parameter<T>*>> parameters();
    // Everything a checkpoint stores (parameters plus smoothing factors), in
    // a fixed order.
    std::vector<std::pair<std::string, Tensor<T>>> state() const;
    void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state);

    template <typename U>
    Model<U> cast() const;

    // Full causal forward over one sequence; returns logits [seq, vocab].
    // With `trainable`, parameters are bound as tape parameters so backward()
    // fills their gradients; otherwise they enter as constants.
    Var<T> forward(Tape<T>& tape, std::span<const Token> tokens, const QuantScheme& scheme, bool trainable,
                   ForwardTrace<T>* trace = nullptr);

    // Inference-only forward: [seq, vocab].
    Tensor<T> logits(std::span<const Token> tokens, const QuantScheme& scheme) const;
    // Equal-length sequences: [batch, seq, vocab].
    Tensor<T> logits(const std::vector<std::vector<Token>>& batch, const QuantScheme& scheme) const;

    Parameter<T> tok_embeddings;  // [vocab, dim]
    std::vector<LayerWeights<T>> layers;
    Parameter<T> norm;  // [dim]
    QuantizedLinear<T> output;

    // Scheme the weights were trained or quantized for, "none" if neither.
    std::string scheme = "none";

private:
    ModelConfig config_{};
};

/// Per-layer key/value storage. Quantized specs keep integer codes plus one
/// grid per token for K and for V, shared across heads; full-precision specs
/// keep the raw rows and record unit scales.
template <typename T>
class KVCache {
public:
    struct Layer {
        std::vector<std::int16_t> key_codes, value_codes;  // [tokens, dim]
        std::vector<kernels::Grid<T>> key_grids, value_grids;
        // Dequantized rows, which attention consumes.
        std::vector<T> keys, values;
    };

    KVCache(const ModelConfig& config, const QuantSpec& kv);

    std::size_t size() const { return tokens_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    const QuantSpec& spec() const { return spec_; }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }

    // Scale of token t's key/value row in layer i.
    T key_scale(std::size_t i, std::size_t t) const { return layers_.at(i).key_grids.at(t).step; }
    T value_scale(std::size_t i, std::size_t t) const { return layers_.at(i).value_grids.at(t).step; }

    // Quantizes and stores one key and value row for layer i. The token count
    // advances once every layer has received the row (see commit()).
    void append(std::size_t layer, std::span<const T> key, std::span<const T> value);
    void commit();

private:
    void store(std::span<const T> row, std::vector<std::int16_t>& codes, std::vector<kernels::Grid<T>>& grids,
               std::vector<T>& values) const;

    QuantSpec spec_;
    std::size_t dim_ = 0;
    std::size_t capacity_ = 0;
    std::size_t tokens_ = 0;
    std::vector<Layer> layers_;
};

/// Runs one token at position cache.size() and appends its keys/values.
/// Returns logits [vocab].
template <typename T>
Tensor<T> decode_step(const Model<T>& model, Token token, KVCache<T>& cache, const QuantScheme& scheme);

/// Value copy of the teacher for a student of the given configuration.
template <typename T>
Model<T> init_student_from_teacher(const Model<T>& teacher, const ModelConfig& student_config);

/// Round-to-nearest PTQ: weights of every linear replaced by their fake-quantized
/// values under scheme.weights; activations and KV are quantized at inference.
template <typename T>
Model<T> rtn_apply(const Model<T>& model, const QuantScheme& scheme);

/// Running channelwise max |input| of every linear layer (linears() order)
/// over the given sequences, evaluated in full precision.
template <typename T>
std::vector<std::vector<T>> collect_input_absmax(const Model<T>& model, const std::vector<std::vector<Token>>& data);

/// Applies smooth_rescale to every linear layer using calibration statistics.
template <typename T>
void apply_smoothing(Model<T>& model, const std::vector<std::vector<T>>& input_absmax, double migration);

// ---------------------------------------------------------------------------

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
    Model<U> out(config_);
    std::vector<std::pair<std::string, Tensor<U>>> converted;
    for (const auto& [name, t] : state()) converted.emplace_back(name, t.template cast<U>());
    out.load_state(converted);
    out.scheme = scheme;
    return out;
}

}  // namespace lqat
