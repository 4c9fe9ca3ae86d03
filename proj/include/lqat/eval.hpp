// SPDX-License-Identifier: Apache-2.0
//
// Perplexity / next-token accuracy, KV-cache memory sizing and result tables.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/model.hpp"

namespace lqat {

struct EvalResult {
    std::string method;
    std::string scheme;
    std::string corpus;
    double ppl = 0;
    double acc = 0;
    std::uint64_t tokens = 0;  // predicted tokens

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// Sum of negative log-likelihoods and argmax hits over one window.
struct WindowScore {
    double nll = 0;
    std::uint64_t correct = 0;
    std::uint64_t count = 0;
};

/// Scores one window: position i predicts token i + 1.
template <typename T>
WindowScore score_window(const Model<T>& model, std::span<const Token> window, const QuantScheme& scheme);

/// Perplexity and accuracy over non-overlapping windows of `window` tokens
/// (0 = the model's max_seq_len). Windows are spread over `threads` workers
/// and reduced in window order, so the result does not depend on the thread
/// count.
template <typename T>
EvalResult perplexity(const Model<T>& model, std::span<const Token> stream, const QuantScheme& scheme,
                      unsigned threads = 1, std::size_t window = 0);

struct ModelPreset {
    std::string name;
    std::uint64_t n_layers = 0;
    std::uint64_t dim = 0;
};

const std::vector<ModelPreset>& model_presets();
const ModelPreset& find_preset(std::string_view name);

struct KvMemory {
    std::uint64_t bytes = 0;
    std::string display;  // e.g. "0.25 GB"
};

/// n_layers * seq_len * dim * bits / 8 bytes, doubled when count_kv_pair.
KvMemory kv_cache_memory(const ModelPreset& preset, std::uint64_t seq_len, int bits, bool count_kv_pair = false);

/// Bytes as GB (2^30) with two decimals, rounded half up.
std::string format_gb(std::uint64_t bytes);

enum class ReportFormat : std::uint8_t { Csv, Markdown };

ReportFormat parse_report_format(std::string_view name);

/// Rows sorted by method, then scheme (then corpus). Markdown bolds the lowest
/// perplexity within each scheme.
std::string render_report(std::vector<EvalResult> rows, ReportFormat format);

/// Parses CSV written by render_report (header required).
std::vector<EvalResult> parse_results_csv(std::string_view text);

}  // namespace lqat
