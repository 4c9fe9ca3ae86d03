// SPDX-License-Identifier: Apache-2.0
#include "lqat/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <thread>
#include <tuple>

#include "lqat/errors.hpp"

namespace lqat {

template <typename T>
WindowScore score_window(const Model<T>& model, std::span<const Token> window, const QuantScheme& scheme) {
    WindowScore s;
    if (window.size() < 2) return s;
    const std::size_t v = model.config().vocab_size;
    const Tensor<T> logits = model.logits(window, scheme);
    for (std::size_t i = 0; i + 1 < window.size(); ++i) {
        const T* row = logits.ptr() + i * v;
        double mx = -INFINITY;
        std::size_t best = 0;
        for (std::size_t c = 0; c < v; ++c) {
            if (static_cast<double>(row[c]) > mx) {
                mx = static_cast<double>(row[c]);
                best = c;
            }
        }
        double z = 0;
        for (std::size_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
        const auto target = static_cast<std::size_t>(window[i + 1]);
        s.nll += std::log(z) - (static_cast<double>(row[target]) - mx);
        s.correct += best == target ? 1 : 0;
        ++s.count;
    }
    return s;
}

template <typename T>
EvalResult perplexity(const Model<T>& model, std::span<const Token> stream, const QuantScheme& scheme,
                      unsigned threads, std::size_t window) {
    const ModelConfig& cfg = model.config();
    if (window == 0) window = cfg.max_seq_len;
    if (window > cfg.max_seq_len) {
        throw ConfigError("evaluation window " + std::to_string(window) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    if (stream.size() < 2) throw InputError("evaluation corpus has fewer than 2 tokens");
    for (Token t : stream) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw InputError("evaluation corpus holds token id " + std::to_string(t) + " outside vocabulary size " +
                             std::to_string(cfg.vocab_size));
        }
    }
    const std::size_t n_windows = (stream.size() + window - 1) / window;
    std::vector<WindowScore> scores(n_windows);
    const unsigned n_threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n_windows));
    std::vector<std::exception_ptr> errors(n_threads);
    auto shard = [&](unsigned t) {
        try {
            for (std::size_t w = t; w < n_windows; w += n_threads) {
                const std::size_t start = w * window;
                scores[w] = score_window(model, stream.subspan(start, std::min(window, stream.size() - start)), scheme);
            }
        } catch (...) {
            errors[t] = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(shard, t);
    shard(0);
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    WindowScore total;
    for (const auto& s : scores) {
        total.nll += s.nll;
        total.correct += s.correct;
        total.count += s.count;
    }
    if (total.count == 0) throw InputError("evaluation corpus yields no predicted tokens");
    EvalResult r;
    r.scheme = scheme.to_string();
    r.ppl = std::exp(total.nll / static_cast<double>(total.count));
    r.acc = static_cast<double>(total.correct) / static_cast<double>(total.count);
    r.tokens = total.count;
    return r;
}

const std::vector<ModelPreset>& model_presets() {
    static const std::vector<ModelPreset> presets = {
        {"llama-7b", 32, 4096},
        {"llama-13b", 40, 5120},
        {"llama-30b", 60, 6656},
    };
    return presets;
}

const ModelPreset& find_preset(std::string_view name) {
    for (const auto& p : model_presets())
        if (p.name == name) return p;
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected llama-7b, llama-13b or llama-30b)");
}

std::string format_gb(std::uint64_t bytes) {
    constexpr std::uint64_t gib = std::uint64_t{1} << 30;
    const std::uint64_t cents = (bytes * 100 + gib / 2) / gib;
    char buf[48];
    std::snprintf(buf, sizeof buf, "%llu.%02llu GB", static_cast<unsigned long long>(cents / 100),
                  static_cast<unsigned long long>(cents % 100));
    return buf;
}

KvMemory kv_cache_memory(const ModelPreset& preset, std::uint64_t seq_len, int bits, bool count_kv_pair) {
    if (bits != 4 && bits != 8 && bits != 16) {
        throw ConfigError("KV cache bit-width must be 4, 8 or 16, got " + std::to_string(bits));
    }
    if (seq_len < 1) throw ConfigError("sequence length must be at least 1");
    if (preset.n_layers < 1 || preset.dim < 1) throw ConfigError("preset '" + preset.name + "' has a zero dimension");
    KvMemory m;
    m.bytes = preset.n_layers * seq_len * preset.dim * static_cast<std::uint64_t>(bits) / 8;
    if (count_kv_pair) m.bytes *= 2;
    m.display = format_gb(m.bytes);
    return m;
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "csv") return ReportFormat::Csv;
    if (name == "markdown" || name == "md") return ReportFormat::Markdown;
    throw ConfigError("unknown report format '" + std::string(name) + "' (expected csv or markdown)");
}

namespace {

std::string shortest(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string md_cell(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '|') out += '\\';
        out += c;
    }
    return out;
}

}  // namespace

std::string render_report(std::vector<EvalResult> rows, ReportFormat format) {
    std::stable_sort(rows.begin(), rows.end(), [](const EvalResult& a, const EvalResult& b) {
        return std::tie(a.method, a.scheme, a.corpus) < std::tie(b.method, b.scheme, b.corpus);
    });
    std::string out;
    if (format == ReportFormat::Csv) {
        out = "method,scheme,corpus,ppl,acc,tokens\r\n";
        for (const auto& r : rows) {
            out += csv_field(r.method) + ',' + csv_field(r.scheme) + ',' + csv_field(r.corpus) + ',' + shortest(r.ppl) +
                   ',' + shortest(r.acc) + ',' + std::to_string(r.tokens) + "\r\n";
        }
        return out;
    }
    std::map<std::string, double> best;
    for (const auto& r : rows) {
        auto [it, fresh] = best.emplace(r.scheme, r.ppl);
        if (!fresh) it->second = std::min(it->second, r.ppl);
    }
    out = "| method | scheme | corpus | ppl | acc | tokens |\n|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        std::string ppl = fixed(r.ppl, 2);
        if (r.ppl == best[r.scheme]) ppl = "**" + ppl + "**";
        out += "| " + md_cell(r.method) + " | " + md_cell(r.scheme) + " | " + md_cell(r.corpus) + " | " + ppl + " | " +
               fixed(r.acc, 4) + " | " + std::to_string(r.tokens) + " |\n";
    }
    return out;
}

namespace {

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, in_record = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            in_record = true;
        } else if (c == ',') {
            rec.push_back(std::move(field));
            field.clear();
            in_record = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (in_record || !field.empty()) {
                rec.push_back(std::move(field));
                records.push_back(std::move(rec));
            }
            rec.clear();
            field.clear();
            in_record = false;
        } else {
            field += c;
            in_record = true;
        }
    }
    if (quoted) throw InputError("results CSV ends inside a quoted field");
    if (in_record || !field.empty()) {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
    }
    return records;
}

template <typename N>
N parse_num(const std::string& s, const char* column, std::size_t line) {
    N v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw InputError("results CSV row " + std::to_string(line) + " has malformed " + column + " '" + s + "'");
    }
    return v;
}

}  // namespace

std::vector<EvalResult> parse_results_csv(std::string_view text) {
    const auto records = parse_csv(text);
    const std::vector<std::string> header = {"method", "scheme", "corpus", "ppl", "acc", "tokens"};
    if (records.empty() || records[0] != header) {
        throw InputError("results CSV must start with the header method,scheme,corpus,ppl,acc,tokens");
    }
    std::vector<EvalResult> out;
    for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& f = records[i];
        if (f.size() != header.size()) {
            throw InputError("results CSV row " + std::to_string(i) + " has " + std::to_string(f.size()) +
                             " fields, expected 6");
        }
        out.push_back({f[0], f[1], f[2], parse_num<double>(f[3], "ppl", i), parse_num<double>(f[4], "acc", i),
                       parse_num<std::uint64_t>(f[5], "tokens", i)});
    }
    return out;
}

#define LQAT_INSTANTIATE_EVAL(T)                                                                        \
    template WindowScore score_window(const Model<T>&, std::span<const Token>, const QuantScheme&);     \
    template EvalResult perplexity(const Model<T>&, std::span<const Token>, const QuantScheme&, unsigned, \
                                   std::size_t);

LQAT_INSTANTIATE_EVAL(float)
LQAT_INSTANTIATE_EVAL(double)

}  // namespace lqat
