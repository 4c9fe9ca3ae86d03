// SPDX-License-Identifier: Apache-2.0
#include "lqat/distill.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <ostream>

#include "lqat/errors.hpp"
#include "lqat/random.hpp"

namespace lqat {

LossVariant parse_loss_variant(std::string_view name) {
    if (name == "label") return LossVariant::Label;
    if (name == "logits") return LossVariant::Logits;
    if (name == "label+logits") return LossVariant::LabelLogits;
    throw ConfigError("unknown loss variant '" + std::string(name) + "' (expected label, logits or label+logits)");
}

std::string loss_variant_name(LossVariant v) {
    switch (v) {
        case LossVariant::Label: return "label";
        case LossVariant::Logits: return "logits";
        case LossVariant::LabelLogits: return "label+logits";
    }
    return "?";
}

template <typename T>
Var<T> kd_loss(Var<T> student_logits, const Tensor<T>& teacher_logits) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.shape().size() != 2 ||
        student_logits.shape()[0] == 0) {
        throw ContractError("kd_loss needs matching [n, c] logits with n >= 1, got student " +
                            to_string(student_logits.shape()) + " and teacher " + to_string(teacher_logits.shape()));
    }
    return soft_cross_entropy_mean(student_logits, teacher_logits);
}

template <typename T>
Var<T> label_loss(Var<T> student_logits, std::span<const Token> labels) {
    return cross_entropy_mean(student_logits, labels);
}

template <typename T>
Var<T> mse_loss(Var<T> x, const Tensor<T>& target) {
    if (x.shape() != target.shape()) {
        throw ContractError("mse target shape " + to_string(target.shape()) + " differs from " + to_string(x.shape()));
    }
    Tensor<T> neg = target;
    for (auto& v : neg.data()) v = -v;
    const Var<T> diff = add(x, x.tape->constant(std::move(neg)));
    return mean(elementwise_mul(diff, diff));
}

double cosine_lr(double lr0, std::size_t step, std::size_t total) {
    if (total == 0) throw ConfigError("schedule needs at least one step");
    return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto value = params_[k]->value.data();
        const auto grad = params_[k]->grad.data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
            const double p = static_cast<double>(value[i]);
            value[i] = static_cast<T>(p - lr * (update + config_.weight_decay * p));
        }
    }
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
    if (steps < 1) throw ConfigError("training steps must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (attention_weight < 0 || hidden_weight < 0) throw ConfigError("distillation term weights must be non-negative");
}

void TeacherConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("teacher learning rate must be positive");
    if (steps < 1) throw ConfigError("teacher training steps must be at least 1");
    if (seq_len < 1) throw ConfigError("teacher window length must be at least 1");
}

namespace {

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<StepMetric>& log, std::string_view loss_variant,
                       std::string_view scheme) {
    out << "step,lr,loss,loss_variant,scheme\n";
    for (const auto& m : log) {
        out << m.step << ',' << fmt(m.lr) << ',' << fmt(m.loss) << ',' << loss_variant << ',' << scheme << '\n';
    }
}

DataOrder::DataOrder(std::size_t size, std::uint64_t seed) : size_(size), seed_(seed) {
    if (size == 0) throw InputError("training data is empty");
}

void DataOrder::reshuffle(std::size_t epoch) {
    order_.resize(size_);
    for (std::size_t i = 0; i < size_; ++i) order_[i] = i;
    Rng rng(derive_seed(seed_, epoch));
    for (std::size_t i = size_ - 1; i > 0; --i) std::swap(order_[i], order_[rng.below(i + 1)]);
    epoch_ = epoch;
}

std::size_t DataOrder::at(std::size_t step) {
    const std::size_t epoch = step / size_;
    if (epoch != epoch_) reshuffle(epoch);
    return order_[step % size_];
}

namespace {

template <typename T>
std::vector<Parameter<T>*> param_list(Model<T>& m) {
    std::vector<Parameter<T>*> out;
    for (auto& [name, p] : m.parameters()) out.push_back(p);
    return out;
}

}  // namespace

template <typename T>
std::vector<StepMetric> train_qat(Model<T>& student, const Model<T>& teacher,
                                  const std::vector<std::vector<Token>>& data, const QuantScheme& scheme,
                                  const TrainConfig& config) {
    config.validate();
    if (!(student.config() == teacher.config())) {
        throw ContractError("student and teacher configurations differ; initialize the student from the teacher");
    }
    if (data.empty()) throw InputError("training data is empty");
    const ModelConfig& mc = student.config();
    const std::size_t max_len = config.max_seq_len == 0 ? mc.max_seq_len : std::min(config.max_seq_len, mc.max_seq_len);
    const bool use_labels = config.loss != LossVariant::Logits;
    const bool use_logits = config.loss != LossVariant::Label;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i].empty()) throw InputError("training sequence " + std::to_string(i) + " is empty");
        if (config.loss == LossVariant::Label && std::min(data[i].size(), max_len) < 2) {
            throw InputError("training sequence " + std::to_string(i) + " has fewer than 2 tokens for label loss");
        }
        for (Token t : data[i]) {
            if (t < 0 || static_cast<std::size_t>(t) >= mc.vocab_size) {
                throw InputError("training sequence " + std::to_string(i) + " holds token id " + std::to_string(t) +
                                 " outside vocabulary size " + std::to_string(mc.vocab_size));
            }
        }
    }
    const bool want_trace = config.attention_weight > 0 || config.hidden_weight > 0;
    const QuantScheme fp = QuantScheme::full_precision();
    Model<T> frozen = teacher;

    DataOrder order(data.size(), config.seed);
    std::optional<AdamW<T>> opt;
    std::vector<StepMetric> log;
    log.reserve(config.steps);
    const T inv_batch = static_cast<T>(1.0 / static_cast<double>(config.batch_size));
    for (std::size_t s = 0; s < config.steps; ++s) {
        const double lr = cosine_lr(config.lr, s, config.steps);
        double loss_value = 0;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const std::size_t idx = order.at(s * config.batch_size + b);
            const std::span<const Token> seq(data[idx].data(), std::min(data[idx].size(), max_len));
            try {
                Tape<T> teacher_tape;
                ForwardTrace<T> teacher_trace;
                const Tensor<T> teacher_logits =
                    frozen.forward(teacher_tape, seq, fp, false, want_trace ? &teacher_trace : nullptr).value();

                Tape<T> tape;
                ForwardTrace<T> trace;
                const Var<T> logits = student.forward(tape, seq, scheme, true, want_trace ? &trace : nullptr);
                // Learnable quantizer steps exist only after the first trainable forward.
                if (!opt) {
                    opt.emplace(param_list(student), config.adam);
                    opt->zero_grad();
                }
                std::optional<Var<T>> loss;
                auto accumulate = [&](Var<T> term) { loss = loss ? add(*loss, term) : term; };
                if (use_logits) accumulate(kd_loss(logits, teacher_logits));
                if (use_labels && seq.size() >= 2) {
                    const std::size_t n = seq.size() - 1;
                    accumulate(label_loss(slice(logits, 0, 0, n), seq.subspan(1)));
                }
                if (config.attention_weight > 0) {
                    for (std::size_t l = 0; l < trace.attention.size(); ++l) {
                        accumulate(scale(mse_loss(trace.attention[l], teacher_trace.attention[l].value()),
                                         static_cast<T>(config.attention_weight / trace.attention.size())));
                    }
                }
                if (config.hidden_weight > 0) {
                    for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
                        accumulate(scale(mse_loss(trace.hidden[l], teacher_trace.hidden[l].value()),
                                         static_cast<T>(config.hidden_weight / trace.hidden.size())));
                    }
                }
                const double value = static_cast<double>(loss->value().item());
                if (!std::isfinite(value)) throw NumericError("loss is " + fmt(value));
                loss_value += value / static_cast<double>(config.batch_size);
                tape.backward(config.batch_size == 1 ? *loss : scale(*loss, inv_batch));
            } catch (const NumericError& e) {
                throw NumericError("non-finite loss at step " + std::to_string(s + 1) + " on training sequence " +
                                   std::to_string(idx) + ": " + e.what());
            }
        }
        opt->step(lr);
        opt->zero_grad();
        log.push_back({s + 1, lr, loss_value});
    }
    student.scheme = scheme.to_string();
    return log;
}

template <typename T>
std::vector<StepMetric> train_teacher(Model<T>& model, std::span<const Token> stream, const TeacherConfig& config) {
    config.validate();
    const ModelConfig& mc = model.config();
    const std::size_t window = std::min(config.seq_len, mc.max_seq_len);
    if (stream.size() < window + 1) {
        throw InputError("training text has " + std::to_string(stream.size()) + " tokens, fewer than one window of " +
                         std::to_string(window + 1));
    }
    for (Token t : stream) {
        if (t < 0 || static_cast<std::size_t>(t) >= mc.vocab_size) {
            throw InputError("training text holds token id " + std::to_string(t) + " outside the vocabulary");
        }
    }
    const QuantScheme fp = QuantScheme::full_precision();
    AdamW<T> opt(param_list(model), config.adam);
    opt.zero_grad();
    Rng rng(config.seed);
    std::vector<StepMetric> log;
    const std::size_t starts = stream.size() - window;
    for (std::size_t s = 0; s < config.steps; ++s) {
        const std::size_t at = rng.below(starts);
        const std::span<const Token> input = stream.subspan(at, window);
        const std::span<const Token> target = stream.subspan(at + 1, window);
        const double lr = cosine_lr(config.lr, s, config.steps);
        double loss_value = 0;
        try {
            Tape<T> tape;
            const Var<T> loss = label_loss(model.forward(tape, input, fp, true), target);
            loss_value = static_cast<double>(loss.value().item());
            if (!std::isfinite(loss_value)) throw NumericError("loss is " + fmt(loss_value));
            tape.backward(loss);
        } catch (const NumericError& e) {
            throw NumericError("non-finite loss at step " + std::to_string(s + 1) + " on the window at token " +
                               std::to_string(at) + ": " + e.what());
        }
        opt.step(lr);
        opt.zero_grad();
        log.push_back({s + 1, lr, loss_value});
    }
    return log;
}

#define LQAT_INSTANTIATE_DISTILL(T)                                                                           \
    template Var<T> kd_loss(Var<T>, const Tensor<T>&);                                                        \
    template Var<T> label_loss(Var<T>, std::span<const Token>);                                               \
    template Var<T> mse_loss(Var<T>, const Tensor<T>&);                                                       \
    template class AdamW<T>;                                                                                  \
    template std::vector<StepMetric> train_qat(Model<T>&, const Model<T>&, const std::vector<std::vector<Token>>&, \
                                               const QuantScheme&, const TrainConfig&);                       \
    template std::vector<StepMetric> train_teacher(Model<T>&, std::span<const Token>, const TeacherConfig&);

LQAT_INSTANTIATE_DISTILL(float)
LQAT_INSTANTIATE_DISTILL(double)

}  // namespace lqat
