// SPDX-License-Identifier: Apache-2.0
#include "lqat/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "lqat/errors.hpp"
#include "lqat/random.hpp"

namespace lqat {

void ModelConfig::validate() const {
    auto bad = [](const std::string& msg) { return ConfigError("invalid model config: " + msg); };
    if (vocab_size < 2) throw bad("vocab_size must be at least 2");
    if (dim == 0 || n_layers == 0 || n_heads == 0 || ffn_hidden == 0) {
        throw bad("dim, n_layers, n_heads and ffn_hidden must be positive");
    }
    if (dim % n_heads != 0) {
        throw bad("dim " + std::to_string(dim) + " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) throw bad("head dimension " + std::to_string(head_dim()) + " must be even for RoPE");
    if (max_seq_len < 1) throw bad("max_seq_len must be at least 1");
    if (!(rope_base > 0.0)) throw bad("rope_base must be positive");
    if (!(rms_eps >= 0.0)) throw bad("rms_eps must be non-negative");
}

namespace {

constexpr const char* kLinearSites[] = {"attention.wq",          "attention.wk",        "attention.wv",
                                        "attention.wo",          "feed_forward.w_gate", "feed_forward.w_up",
                                        "feed_forward.w_down"};

template <typename T>
QuantizedLinear<T> make_linear(std::size_t out, std::size_t in) {
    QuantizedLinear<T> l;
    l.weight = Parameter<T>(Tensor<T>(Shape{out, in}));
    return l;
}

template <typename T>
std::vector<QuantizedLinear<T>*> layer_linears(LayerWeights<T>& l) {
    return {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down};
}

template <typename T>
Tensor<T> quantize_weight(const Tensor<T>& w, const QuantSpec& spec) {
    switch (spec.clipping.kind) {
        case Clipping::Kind::None: return quantize_minmax(w, spec).values;
        case Clipping::Kind::Statistical:
            return quantize_clipped(w, spec, ScaleSource<T>::statistical(spec.clipping.fraction)).values;
        case Clipping::Kind::Learnable: break;
    }
    throw ContractError("learnable clipping is supported for activations only");
}

// Builds the forward graph; parameters are either tape parameters or constants.
template <typename T>
class Graph {
public:
    Graph(Tape<T>& tape, Model<T>& model, const QuantScheme& scheme, bool trainable, ForwardTrace<T>* trace)
        : tape_(tape), model_(model), cfg_(model.config()), scheme_(scheme), trainable_(trainable), trace_(trace) {
        if (scheme.kv.clipping.kind == Clipping::Kind::Learnable) {
            throw ContractError("learnable clipping is not supported for the KV cache");
        }
        if (trace_ && !trace_->input_absmax.empty() &&
            trace_->input_absmax.size() != cfg_.n_layers * std::size(kLinearSites) + 1) {
            throw ContractError("input_absmax must have one entry per linear layer");
        }
    }

    Var<T> bind(Parameter<T>& p) { return trainable_ ? tape_.parameter(p) : tape_.constant_ref(p.value); }

    Var<T> embed(std::span<const Token> tokens) { return embed_lookup(bind(model_.tok_embeddings), tokens); }

    Var<T> norm(Var<T> x, Parameter<T>& gain) { return rms_norm(x, bind(gain), static_cast<T>(cfg_.rms_eps)); }

    Var<T> linear(Var<T> x, QuantizedLinear<T>& lin, std::size_t index) {
        if (trace_ && !trace_->input_absmax.empty()) record_absmax(x.value(), trace_->input_absmax[index]);
        if (lin.smoothing) {
            const auto& s = lin.smoothing->scales;
            Tensor<T> inv(Shape{s.size()});
            for (std::size_t j = 0; j < s.size(); ++j) inv[j] = T(1) / s[j];
            x = mul(x, tape_.constant(std::move(inv)));
        }
        x = quantize_input(x, lin);
        Var<T> w = bind(lin.weight);
        if (!scheme_.weights.is_full_precision()) {
            if (scheme_.weights.clipping.kind == Clipping::Kind::Learnable) {
                throw ContractError("learnable clipping is supported for activations only");
            }
            w = quant(w, scheme_.weights);
        }
        return matmul(x, w, Trans::Yes);
    }

    Var<T> kv_quant(Var<T> x) { return quant(x, scheme_.kv); }

    Var<T> quant(Var<T> x, const QuantSpec& spec) {
        if (spec.is_full_precision()) return x;
        using S = typename ForwardTrace<T>::Surrogate;
        if (!trace_ || trace_->surrogate == S::Off || spec.clipping.kind != Clipping::Kind::None) {
            return fake_quant_ste(x, spec);
        }
        if (trace_->surrogate == S::Record) {
            Var<T> q = fake_quant_ste(x, spec);
            Tensor<T> r = q.value();
            for (std::size_t i = 0; i < r.size(); ++i) r[i] -= x.value()[i];
            trace_->residuals.push_back(std::move(r));
            return q;
        }
        if (trace_->cursor >= trace_->residuals.size()) throw ContractError("surrogate replay ran out of residuals");
        return add(x, tape_.constant_ref(trace_->residuals[trace_->cursor++]));
    }

    // Attention over the full causal sequence starting at position 0.
    Var<T> attention_block(Var<T> xn, LayerWeights<T>& l, std::size_t li) {
        const std::size_t s = xn.shape()[0], h = cfg_.n_heads, hd = cfg_.head_dim(), d = cfg_.dim;
        const T base = static_cast<T>(cfg_.rope_base);
        const std::size_t lin0 = li * std::size(kLinearSites);
        Var<T> q = rope_rotate(reshape(linear(xn, l.wq, lin0 + 0), {s, h, hd}), 0, base);
        Var<T> k = rope_rotate(reshape(linear(xn, l.wk, lin0 + 1), {s, h, hd}), 0, base);
        Var<T> v = linear(xn, l.wv, lin0 + 2);
        k = kv_quant(reshape(k, {s, d}));
        v = kv_quant(v);
        Var<T> qh = transpose(q, {1, 0, 2});
        Var<T> kh = transpose(reshape(k, {s, h, hd}), {1, 0, 2});
        Var<T> vh = transpose(reshape(v, {s, h, hd}), {1, 0, 2});
        Var<T> scores = scale(matmul(qh, kh, Trans::Yes), T(1) / std::sqrt(static_cast<T>(hd)));
        Var<T> probs = softmax_lastdim(scores, true, 0);
        if (trace_) trace_->attention.push_back(probs);
        Var<T> o = reshape(transpose(matmul(probs, vh), {1, 0, 2}), {s, d});
        return linear(o, l.wo, lin0 + 3);
    }

    Var<T> ffn_block(Var<T> xn, LayerWeights<T>& l, std::size_t li) {
        const std::size_t lin0 = li * std::size(kLinearSites);
        Var<T> g = linear(xn, l.w_gate, lin0 + 4);
        Var<T> u = linear(xn, l.w_up, lin0 + 5);
        return linear(elementwise_mul(silu(g), u), l.w_down, lin0 + 6);
    }

    Var<T> head(Var<T> h) {
        return linear(norm(h, model_.norm), model_.output, cfg_.n_layers * std::size(kLinearSites));
    }

    ForwardTrace<T>* trace() { return trace_; }
    Tape<T>& tape() { return tape_; }

private:
    static void record_absmax(const Tensor<T>& x, std::vector<T>& acc) {
        const std::size_t in = x.shape().back();
        if (acc.size() != in) acc.assign(in, T(0));
        for (std::size_t r = 0; r < x.size() / in; ++r)
            for (std::size_t j = 0; j < in; ++j) acc[j] = std::max(acc[j], std::abs(x[r * in + j]));
    }

    Var<T> quantize_input(Var<T> x, QuantizedLinear<T>& lin) {
        const QuantSpec& spec = scheme_.activations;
        if (spec.is_full_precision()) return x;
        if (spec.clipping.kind != Clipping::Kind::Learnable) return quant(x, spec);
        const bool asym = spec.symmetry == Symmetry::Asymmetric;
        if (!lin.act_step || (asym && !lin.act_zero_point)) {
            if (!trainable_) throw ContractError("learned activation step used before initialization");
            const Tensor<T>& xv = x.value();
            if (asym) {
                const auto [mn, mx] = kernels::min_max<T>(xv.ptr(), xv.size());
                const T step = mx > mn ? (mx - mn) / static_cast<T>(spec.qmax()) : T(1);
                lin.act_step = Parameter<T>(Tensor<T>::scalar(step));
                lin.act_zero_point = Parameter<T>(Tensor<T>::scalar(mn));
            } else {
                lin.act_step = Parameter<T>(Tensor<T>::scalar(learnable_step_init(xv, spec)));
            }
        }
        std::optional<Var<T>> zp;
        if (asym) zp = bind(*lin.act_zero_point);
        return fake_quant_learnable(x, spec, bind(*lin.act_step), zp);
    }

    Tape<T>& tape_;
    Model<T>& model_;
    const ModelConfig& cfg_;
    const QuantScheme& scheme_;
    bool trainable_;
    ForwardTrace<T>* trace_;
};

template <typename T>
void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
        throw InputError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.dim, f = config_.ffn_hidden;
    tok_embeddings = Parameter<T>(Tensor<T>(Shape{config_.vocab_size, d}));
    layers.resize(config_.n_layers);
    for (auto& l : layers) {
        l.attention_norm = Parameter<T>(Tensor<T>(Shape{d}, T(1)));
        l.wq = make_linear<T>(d, d);
        l.wk = make_linear<T>(d, d);
        l.wv = make_linear<T>(d, d);
        l.wo = make_linear<T>(d, d);
        l.ffn_norm = Parameter<T>(Tensor<T>(Shape{d}, T(1)));
        l.w_gate = make_linear<T>(f, d);
        l.w_up = make_linear<T>(f, d);
        l.w_down = make_linear<T>(d, f);
    }
    norm = Parameter<T>(Tensor<T>(Shape{d}, T(1)));
    output = make_linear<T>(config_.vocab_size, d);
}

template <typename T>
Model<T> Model<T>::random(const ModelConfig& config, std::uint64_t seed) {
    Model m(config);
    Rng rng(seed);
    auto fill = [&](Parameter<T>& p) {
        for (T& v : p.value.data()) v = static_cast<T>(0.02 * rng.normal());
    };
    fill(m.tok_embeddings);
    for (auto* lin : m.linears()) fill(lin->weight);
    return m;
}

template <typename T>
std::vector<QuantizedLinear<T>*> Model<T>::linears() {
    std::vector<QuantizedLinear<T>*> out;
    for (auto& l : layers)
        for (auto* p : layer_linears(l)) out.push_back(p);
    out.push_back(&output);
    return out;
}

template <typename T>
std::vector<const QuantizedLinear<T>*> Model<T>::linears() const {
    std::vector<const QuantizedLinear<T>*> out;
    for (auto* p : const_cast<Model*>(this)->linears()) out.push_back(p);
    return out;
}

template <typename T>
std::vector<std::string> Model<T>::linear_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers.size(); ++i)
        for (const char* site : kLinearSites) names.push_back("layers." + std::to_string(i) + "." + site);
    names.push_back("output");
    return names;
}

template <typename T>
std::vector<std::pair<std::string, Parameter<T>*>> Model<T>::parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    auto add_linear = [&](const std::string& name, QuantizedLinear<T>& lin) {
        out.emplace_back(name, &lin.weight);
        if (lin.act_step) out.emplace_back(name + ".act_step", &*lin.act_step);
        if (lin.act_zero_point) out.emplace_back(name + ".act_zero_point", &*lin.act_zero_point);
    };
    out.emplace_back("tok_embeddings", &tok_embeddings);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        auto lins = layer_linears(layers[i]);
        out.emplace_back(p + "attention_norm", &layers[i].attention_norm);
        for (std::size_t k = 0; k < 4; ++k) add_linear(p + kLinearSites[k], *lins[k]);
        out.emplace_back(p + "ffn_norm", &layers[i].ffn_norm);
        for (std::size_t k = 4; k < 7; ++k) add_linear(p + kLinearSites[k], *lins[k]);
    }
    out.emplace_back("norm", &norm);
    add_linear("output", output);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto* self = const_cast<Model*>(this);
    const auto names = linear_names();
    const auto lins = linears();
    for (const auto& [name, p] : self->parameters()) {
        out.emplace_back(name, p->value);
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) continue;
        const auto* lin = lins[static_cast<std::size_t>(it - names.begin())];
        if (lin->smoothing) {
            const auto& s = lin->smoothing->scales;
            out.emplace_back(name + ".smooth", Tensor<T>(Shape{s.size()}, s));
            out.emplace_back(name + ".smooth_migration",
                             Tensor<T>::scalar(static_cast<T>(lin->smoothing->migration)));
        }
    }
    return out;
}

template <typename T>
void Model<T>::load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state) {
    std::map<std::string, Parameter<T>*> required;
    for (auto& [name, p] : parameters()) required.emplace(name, p);
    std::map<std::string, QuantizedLinear<T>*> lin_by_name;
    {
        const auto names = linear_names();
        const auto lins = linears();
        for (std::size_t i = 0; i < names.size(); ++i) lin_by_name.emplace(names[i], lins[i]);
    }
    auto suffix_of = [](const std::string& name, const std::string& suffix) {
        return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    auto owner = [&](const std::string& name, const std::string& suffix) -> QuantizedLinear<T>* {
        const auto it = lin_by_name.find(name.substr(0, name.size() - suffix.size()));
        if (it == lin_by_name.end()) throw CheckpointError("unknown tensor '" + name + "'");
        return it->second;
    };
    std::map<std::string, bool> seen;
    for (const auto& [name, t] : state) {
        if (seen[name]) throw CheckpointError("duplicate tensor '" + name + "'");
        seen[name] = true;
        if (const auto it = required.find(name); it != required.end()) {
            if (t.shape() != it->second->value.shape()) {
                throw CheckpointError("tensor '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                                      to_string(it->second->value.shape()));
            }
            *it->second = Parameter<T>(t);
        } else if (suffix_of(name, ".smooth")) {
            QuantizedLinear<T>* lin = owner(name, ".smooth");
            if (t.shape() != Shape{lin->in_features()}) {
                throw CheckpointError("tensor '" + name + "' has shape " + to_string(t.shape()));
            }
            if (!lin->smoothing) lin->smoothing = SmoothingParams<T>{};
            lin->smoothing->scales = t.vec();
        } else if (suffix_of(name, ".smooth_migration")) {
            QuantizedLinear<T>* lin = owner(name, ".smooth_migration");
            if (!lin->smoothing) lin->smoothing = SmoothingParams<T>{};
            lin->smoothing->migration = static_cast<double>(t.item());
        } else if (suffix_of(name, ".act_step")) {
            owner(name, ".act_step")->act_step = Parameter<T>(Tensor<T>::scalar(t.item()));
        } else if (suffix_of(name, ".act_zero_point")) {
            owner(name, ".act_zero_point")->act_zero_point = Parameter<T>(Tensor<T>::scalar(t.item()));
        } else {
            throw CheckpointError("unknown tensor '" + name + "'");
        }
    }
    for (const auto& [name, p] : required) {
        if (!seen[name]) throw CheckpointError("missing tensor '" + name + "'");
    }
    for (const auto* lin : linears()) {
        if (lin->smoothing && lin->smoothing->scales.size() != lin->in_features()) {
            throw CheckpointError("smoothing factors without a '.smooth' tensor");
        }
    }
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, std::span<const Token> tokens, const QuantScheme& scheme, bool trainable,
                         ForwardTrace<T>* trace) {
    check_tokens<T>(config_, tokens);
    Graph<T> g(tape, *this, scheme, trainable, trace);
    Var<T> h = g.embed(tokens);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        LayerWeights<T>& l = layers[li];
        h = add(h, g.attention_block(g.norm(h, l.attention_norm), l, li));
        h = add(h, g.ffn_block(g.norm(h, l.ffn_norm), l, li));
        if (trace) trace->hidden.push_back(h);
    }
    return g.head(h);
}

template <typename T>
Tensor<T> Model<T>::logits(std::span<const Token> tokens, const QuantScheme& scheme) const {
    Tape<T> tape;
    // The inference path binds parameters as constants and never writes to them.
    return const_cast<Model*>(this)->forward(tape, tokens, scheme, false).value();
}

template <typename T>
Tensor<T> Model<T>::logits(const std::vector<std::vector<Token>>& batch, const QuantScheme& scheme) const {
    if (batch.empty()) throw InputError("empty batch");
    const std::size_t s = batch.front().size();
    std::vector<T> out;
    for (const auto& seq : batch) {
        if (seq.size() != s) throw DimensionError("batch sequences must have equal length");
        const Tensor<T> l = logits(std::span<const Token>(seq), scheme);
        out.insert(out.end(), l.vec().begin(), l.vec().end());
    }
    return Tensor<T>(Shape{batch.size(), s, config_.vocab_size}, std::move(out));
}

template <typename T>
KVCache<T>::KVCache(const ModelConfig& config, const QuantSpec& kv)
    : spec_(kv), dim_(config.dim), capacity_(config.max_seq_len), layers_(config.n_layers) {
    if (kv.clipping.kind == Clipping::Kind::Learnable) {
        throw ContractError("learnable clipping is not supported for the KV cache");
    }
    if (kv.granularity.kind != Granularity::Kind::PerToken) {
        throw ContractError("the KV cache quantizes per token");
    }
}

template <typename T>
void KVCache<T>::store(std::span<const T> row, std::vector<std::int16_t>& codes,
                       std::vector<kernels::Grid<T>>& grids, std::vector<T>& values) const {
    if (spec_.is_full_precision()) {
        grids.push_back({T(1), T(0), T(0), T(0), T(0), T(0)});
        values.insert(values.end(), row.begin(), row.end());
        return;
    }
    const kernels::Grid<T> g = fit_grid(row, spec_);
    grids.push_back(g);
    for (T x : row) {
        const T code = grid_code(x, g);
        codes.push_back(static_cast<std::int16_t>(code));
        values.push_back(grid_value(code, g));
    }
}

template <typename T>
void KVCache<T>::append(std::size_t layer, std::span<const T> key, std::span<const T> value) {
    if (tokens_ >= capacity_) {
        throw CapacityError("KV cache is full at " + std::to_string(capacity_) + " tokens");
    }
    if (key.size() != dim_ || value.size() != dim_) {
        throw DimensionError("KV rows must have " + std::to_string(dim_) + " elements");
    }
    Layer& l = layers_.at(layer);
    if (l.key_grids.size() != tokens_) throw ContractError("layer " + std::to_string(layer) + " already appended");
    store(key, l.key_codes, l.key_grids, l.keys);
    store(value, l.value_codes, l.value_grids, l.values);
}

template <typename T>
void KVCache<T>::commit() {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].key_grids.size() != tokens_ + 1) {
            throw ContractError("layer " + std::to_string(i) + " has no row for the pending token");
        }
    }
    ++tokens_;
}

template <typename T>
Tensor<T> decode_step(const Model<T>& model, Token token, KVCache<T>& cache, const QuantScheme& scheme) {
    const ModelConfig& cfg = model.config();
    if (cache.size() >= cache.capacity()) {
        throw CapacityError("KV cache is full at " + std::to_string(cache.capacity()) + " tokens");
    }
    if (!(cache.spec() == scheme.kv)) throw ContractError("KV cache spec differs from the scheme's KV spec");
    if (cache.dim() != cfg.dim) throw ContractError("KV cache does not belong to this model");
    const std::size_t pos = cache.size(), n = pos + 1;
    const std::size_t h = cfg.n_heads, hd = cfg.head_dim(), d = cfg.dim;
    const T base = static_cast<T>(cfg.rope_base);

    Tape<T> tape;
    Model<T>& m = const_cast<Model<T>&>(model);
    Graph<T> g(tape, m, scheme, false, nullptr);
    const Token ids[1] = {token};
    Var<T> x = g.embed(ids);
    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        LayerWeights<T>& l = m.layers[li];
        const std::size_t lin0 = li * std::size(kLinearSites);
        Var<T> xn = g.norm(x, l.attention_norm);
        Var<T> q = rope_rotate(reshape(g.linear(xn, l.wq, lin0 + 0), {1, h, hd}), pos, base);
        Var<T> k = rope_rotate(reshape(g.linear(xn, l.wk, lin0 + 1), {1, h, hd}), pos, base);
        Var<T> v = g.linear(xn, l.wv, lin0 + 2);
        cache.append(li, k.value().data(), v.value().data());
        const auto& layer = cache.layer(li);
        Var<T> kh = transpose(tape.constant(Tensor<T>(Shape{n, h, hd}, layer.keys)), {1, 0, 2});
        Var<T> vh = transpose(tape.constant(Tensor<T>(Shape{n, h, hd}, layer.values)), {1, 0, 2});
        Var<T> qh = transpose(q, {1, 0, 2});
        Var<T> scores = scale(matmul(qh, kh, Trans::Yes), T(1) / std::sqrt(static_cast<T>(hd)));
        Var<T> probs = softmax_lastdim(scores, false, 0);
        Var<T> o = reshape(transpose(matmul(probs, vh), {1, 0, 2}), {1, d});
        x = add(x, g.linear(o, l.wo, lin0 + 3));
        x = add(x, g.ffn_block(g.norm(x, l.ffn_norm), l, li));
    }
    cache.commit();
    return g.head(x).value().reshaped(Shape{cfg.vocab_size});
}

template <typename T>
Model<T> init_student_from_teacher(const Model<T>& teacher, const ModelConfig& student) {
    const ModelConfig& t = teacher.config();
    auto check = [](const char* field, auto a, auto b) {
        if (a != b) {
            std::ostringstream os;
            os << "student/teacher config mismatch: " << field << " is " << b << " for the student but " << a
               << " in the teacher checkpoint";
            throw CheckpointError(os.str());
        }
    };
    check("vocab_size", t.vocab_size, student.vocab_size);
    check("dim", t.dim, student.dim);
    check("n_layers", t.n_layers, student.n_layers);
    check("n_heads", t.n_heads, student.n_heads);
    check("ffn_hidden", t.ffn_hidden, student.ffn_hidden);
    check("max_seq_len", t.max_seq_len, student.max_seq_len);
    check("rope_base", t.rope_base, student.rope_base);
    check("rms_eps", t.rms_eps, student.rms_eps);
    Model<T> s = teacher;
    s.scheme = "none";
    return s;
}

template <typename T>
Model<T> rtn_apply(const Model<T>& model, const QuantScheme& scheme) {
    Model<T> out = model;
    if (!scheme.weights.is_full_precision()) {
        for (auto* lin : out.linears()) lin->weight.value = quantize_weight(lin->weight.value, scheme.weights);
    }
    out.scheme = scheme.to_string();
    return out;
}

template <typename T>
std::vector<std::vector<T>> collect_input_absmax(const Model<T>& model, const std::vector<std::vector<Token>>& data) {
    ForwardTrace<T> trace;
    const auto lins = model.linears();
    for (const auto* lin : lins) trace.input_absmax.emplace_back(lin->in_features(), T(0));
    const std::size_t cap = model.config().max_seq_len;
    for (const auto& seq : data) {
        const std::size_t len = std::min(seq.size(), cap);
        if (len == 0) continue;
        Tape<T> tape;
        trace.attention.clear();
        trace.hidden.clear();
        const_cast<Model<T>&>(model).forward(tape, std::span<const Token>(seq.data(), len),
                                             QuantScheme::full_precision(), false, &trace);
    }
    return trace.input_absmax;
}

template <typename T>
void apply_smoothing(Model<T>& model, const std::vector<std::vector<T>>& input_absmax, double migration) {
    auto lins = model.linears();
    if (input_absmax.size() != lins.size()) {
        throw ContractError("expected statistics for " + std::to_string(lins.size()) + " linear layers, got " +
                            std::to_string(input_absmax.size()));
    }
    for (std::size_t i = 0; i < lins.size(); ++i) {
        if (lins[i]->smoothing) throw ContractError("model is already smoothed");
        SmoothedWeight<T> r = smooth_rescale(lins[i]->weight.value, std::span<const T>(input_absmax[i]), migration);
        lins[i]->weight = Parameter<T>(std::move(r.weight));
        lins[i]->smoothing = std::move(r.params);
    }
}

#define LQAT_INSTANTIATE_MODEL(T)                                                                              \
    template class Model<T>;                                                                                   \
    template class KVCache<T>;                                                                                 \
    template Tensor<T> decode_step(const Model<T>&, Token, KVCache<T>&, const QuantScheme&);                   \
    template Model<T> init_student_from_teacher(const Model<T>&, const ModelConfig&);                          \
    template Model<T> rtn_apply(const Model<T>&, const QuantScheme&);                                          \
    template std::vector<std::vector<T>> collect_input_absmax(const Model<T>&,                                 \
                                                              const std::vector<std::vector<Token>>&);         \
    template void apply_smoothing(Model<T>&, const std::vector<std::vector<T>>&, double);

LQAT_INSTANTIATE_MODEL(float)
LQAT_INSTANTIATE_MODEL(double)

}  // namespace lqat
