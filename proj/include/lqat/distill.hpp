// SPDX-License-Identifier: Apache-2.0
//
// Knowledge-distillation losses, AdamW with cosine decay, the QAT loop and
// plain next-token training for the full-precision teacher.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/autodiff.hpp"
#include "lqat/model.hpp"

namespace lqat {

enum class LossVariant : std::uint8_t { Label, Logits, LabelLogits };

LossVariant parse_loss_variant(std::string_view name);  // "label", "logits", "label+logits"
std::string loss_variant_name(LossVariant v);

/// Soft cross entropy -(1/n) sum_i sum_c softmax(teacher)_ic log softmax(student)_ic.
/// Teacher logits are constants.
template <typename T>
Var<T> kd_loss(Var<T> student_logits, const Tensor<T>& teacher_logits);

/// Mean token-level cross entropy against hard labels.
template <typename T>
Var<T> label_loss(Var<T> student_logits, std::span<const Token> labels);

/// Mean squared difference against a constant target of the same shape.
template <typename T>
Var<T> mse_loss(Var<T> x, const Tensor<T>& target);

/// lr at 0-based step s of `total`: 0.5 * lr0 * (1 + cos(pi * s / total)).
double cosine_lr(double lr0, std::size_t step, std::size_t total);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Moments are kept in double.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Parameter<T>*> params, AdamConfig config = {});
    void zero_grad();
    void step(double lr);
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Parameter<T>*> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    double lr = 2e-5;
    AdamConfig adam{};
    std::size_t steps = 3000;
    // Sequences per optimizer step; their gradients are averaged.
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    LossVariant loss = LossVariant::Logits;
    // Optional attention-map and hidden-state MSE terms (off by default).
    double attention_weight = 0.0;
    double hidden_weight = 0.0;
    // Sequences are truncated to this many tokens; 0 means the model's max_seq_len.
    std::size_t max_seq_len = 0;

    void validate() const;
};

struct StepMetric {
    std::size_t step = 0;  // 1-based
    double lr = 0;
    double loss = 0;
};

/// Writes the metrics CSV (header step,lr,loss,loss_variant,scheme).
void write_metrics_csv(std::ostream& out, const std::vector<StepMetric>& log, std::string_view loss_variant,
                       std::string_view scheme);

/// Position of step s in the data order: epochs are permutations of the
/// dataset drawn from the seed.
class DataOrder {
public:
    DataOrder(std::size_t size, std::uint64_t seed);
    std::size_t at(std::size_t step);

private:
    void reshuffle(std::size_t epoch);
    std::size_t size_;
    std::uint64_t seed_;
    std::size_t epoch_ = SIZE_MAX;
    std::vector<std::size_t> order_;
};

/// Distills `teacher` into `student` (in place) on `data` under `scheme`.
/// The student's scheme field is set to the scheme it was trained for.
template <typename T>
std::vector<StepMetric> train_qat(Model<T>& student, const Model<T>& teacher,
                                  const std::vector<std::vector<Token>>& data, const QuantScheme& scheme,
                                  const TrainConfig& config);

struct TeacherConfig {
    double lr = 3e-3;
    AdamConfig adam{};
    std::size_t steps = 2000;
    std::size_t seq_len = 128;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Next-token training of a full-precision model on random windows of a
/// token stream.
template <typename T>
std::vector<StepMetric> train_teacher(Model<T>& model, std::span<const Token> stream, const TeacherConfig& config);

}  // namespace lqat
