// SPDX-License-Identifier: Apache-2.0
#include "lqat/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "lqat/errors.hpp"
#include "lqat/io.hpp"
#include "lqat/random.hpp"

namespace lqat {

void GenStrategy::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ConfigError("sampling temperature must be positive, got " + std::to_string(temperature));
    }
    if (kind == Kind::Hybrid && k < 1) throw ConfigError("hybrid prefix length k must be at least 1");
}

GenStrategy::Kind GenStrategy::parse_kind(std::string_view name) {
    if (name == "top1") return Kind::Top1;
    if (name == "sampled") return Kind::Sampled;
    if (name == "hybrid") return Kind::Hybrid;
    throw ConfigError("unknown generation strategy '" + std::string(name) + "' (expected top1, sampled or hybrid)");
}

std::string GenStrategy::name() const {
    switch (kind) {
        case Kind::Top1: return "top1";
        case Kind::Sampled: return "sampled";
        case Kind::Hybrid: return "hybrid";
    }
    return "?";
}

namespace {

template <typename T>
Token argmax(std::span<const T> logits) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Inverse-CDF draw from softmax(logits / temperature), optionally truncated to top_k.
template <typename T>
Token sample(std::span<const T> logits, double temperature, std::size_t top_k, Rng& rng) {
    const std::size_t n = logits.size();
    std::vector<double> w(n);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    if (top_k > 0 && top_k < n) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
        for (std::size_t r = top_k; r < n; ++r) w[order[r]] = 0.0;
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const double u = rng.uniform() * total;
    double cum = 0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (w[i] <= 0) continue;
        last = i;
        cum += w[i];
        if (u < cum) return static_cast<Token>(i);
    }
    return static_cast<Token>(last);
}

void check_options(const ModelConfig& cfg, const GenOptions& o) {
    if (o.max_len < 1) throw ConfigError("max generation length must be at least 1");
    if (o.context_window == 0 && o.max_len > cfg.max_seq_len) {
        throw ConfigError("max generation length " + std::to_string(o.max_len) + " exceeds the teacher's max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    if (o.context_window > cfg.max_seq_len) {
        throw ConfigError("context window " + std::to_string(o.context_window) + " exceeds the teacher's max_seq_len");
    }
}

}  // namespace

template <typename T>
GenRecord generate_sequence(const Model<T>& teacher, const GenStrategy& strategy, std::uint64_t seed,
                            const GenOptions& options) {
    strategy.validate();
    const ModelConfig& cfg = teacher.config();
    check_options(cfg, options);
    const std::size_t sampleable = cfg.vocab_size - 1;  // every id except end-of-sequence
    if (sampleable == 0) throw ConfigError("vocabulary has no tokens to start a sequence from");
    const Token eos = cfg.eos();
    const QuantScheme scheme = QuantScheme::full_precision();

    Rng rng(seed);
    GenRecord rec;
    rec.tokens.push_back(static_cast<Token>(rng.below(sampleable)));
    std::optional<KVCache<T>> cache;
    if (options.context_window == 0) cache.emplace(cfg, scheme.kv);

    std::size_t generated = 0;
    while (rec.tokens.size() < options.max_len) {
        Tensor<T> logits;
        if (cache) {
            logits = decode_step(teacher, rec.tokens.back(), *cache, scheme);
        } else {
            const std::size_t n = std::min(rec.tokens.size(), options.context_window);
            const std::span<const Token> window(rec.tokens.data() + rec.tokens.size() - n, n);
            const Tensor<T> all = teacher.logits(window, scheme);
            logits = Tensor<T>(Shape{cfg.vocab_size},
                               std::vector<T>(all.ptr() + (n - 1) * cfg.vocab_size, all.ptr() + n * cfg.vocab_size));
        }
        const std::span<const T> row = logits.data();
        const bool greedy = strategy.kind == GenStrategy::Kind::Top1 ||
                            (strategy.kind == GenStrategy::Kind::Hybrid && generated < strategy.k);
        const Token next = greedy ? argmax(row) : sample(row, strategy.temperature, strategy.top_k, rng);
        rec.tokens.push_back(next);
        ++generated;
        if (next == eos && options.stop_at_eos) {
            rec.termination = Termination::Eos;
            return rec;
        }
    }
    rec.termination = Termination::MaxLen;
    return rec;
}

unsigned resolve_threads(unsigned requested) {
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

template <typename T>
std::vector<GenRecord> generate_records(const Model<T>& teacher, const GenStrategy& strategy, std::size_t count,
                                        std::uint64_t master_seed, const GenOptions& options, unsigned threads) {
    if (count < 1) throw ConfigError("record count must be at least 1");
    strategy.validate();
    check_options(teacher.config(), options);
    std::vector<GenRecord> out(count);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                out[i] = generate_sequence(teacher, strategy, derive_seed(master_seed, i), options);
            } catch (...) {
                std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
                next = count;
            }
        }
    };
    const unsigned n = std::min<std::size_t>(resolve_threads(threads), count);
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

std::size_t Dataset::token_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.size();
    return n;
}

std::string encode_dataset(const Dataset& d) {
    io::ByteWriter w;
    w.bytes("LQDG");
    w.u32(kDatasetVersion);
    w.u32(d.vocab_size);
    w.u64(d.records.size());
    for (const auto& r : d.records) {
        w.u32(static_cast<std::uint32_t>(r.size()));
        for (Token t : r) w.u32(static_cast<std::uint32_t>(t));
    }
    return w.take();
}

Dataset decode_dataset(std::string_view bytes) {
    io::ByteReader<InputError> r(bytes, "dataset");
    if (r.bytes(4, "magic") != "LQDG") r.fail("bad magic (expected \"LQDG\")");
    const std::uint32_t version = r.u32("version");
    if (version != kDatasetVersion) {
        r.fail("unsupported version " + std::to_string(version) + " (this reader supports version " +
               std::to_string(kDatasetVersion) + ")");
    }
    Dataset d;
    d.vocab_size = r.u32("vocab size");
    const std::uint64_t count = r.u64("record count");
    if (count > r.remaining() / 4) r.fail("record count " + std::to_string(count) + " exceeds the file size");
    d.records.resize(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string field = "record " + std::to_string(i);
        const std::uint32_t len = r.u32(field + " length");
        if (len > r.remaining() / 4) r.fail("truncated while reading " + field);
        auto& rec = d.records[static_cast<std::size_t>(i)];
        rec.resize(len);
        for (auto& t : rec) {
            const std::uint32_t id = r.u32(field);
            if (id >= d.vocab_size) {
                r.fail(field + " holds token id " + std::to_string(id) + " outside vocabulary size " +
                       std::to_string(d.vocab_size));
            }
            t = static_cast<Token>(id);
        }
    }
    if (!r.at_end()) r.fail(std::to_string(r.remaining()) + " trailing bytes after the last record");
    return d;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    io::write_file(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    try {
        return decode_dataset(bytes);
    } catch (const InputError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

template <typename T>
Dataset generate_corpus(const Model<T>& teacher, const GenStrategy& strategy, std::size_t count,
                        std::uint64_t master_seed, const GenOptions& options, unsigned threads) {
    Dataset d;
    d.vocab_size = static_cast<std::uint32_t>(teacher.config().vocab_size);
    for (auto& rec : generate_records(teacher, strategy, count, master_seed, options, threads)) {
        d.records.push_back(std::move(rec.tokens));
    }
    return d;
}

std::size_t distinct_bigrams(const std::vector<std::vector<Token>>& records) {
    std::unordered_set<std::uint64_t> seen;
    for (const auto& r : records)
        for (std::size_t i = 1; i < r.size(); ++i) {
            seen.insert((static_cast<std::uint64_t>(static_cast<std::uint32_t>(r[i - 1])) << 32) |
                        static_cast<std::uint32_t>(r[i]));
        }
    return seen.size();
}

#define LQAT_INSTANTIATE_DATAGEN(T)                                                                         \
    template GenRecord generate_sequence(const Model<T>&, const GenStrategy&, std::uint64_t,               \
                                         const GenOptions&);                                                \
    template std::vector<GenRecord> generate_records(const Model<T>&, const GenStrategy&, std::size_t,     \
                                                     std::uint64_t, const GenOptions&, unsigned);           \
    template Dataset generate_corpus(const Model<T>&, const GenStrategy&, std::size_t, std::uint64_t,      \
                                     const GenOptions&, unsigned);

LQAT_INSTANTIATE_DATAGEN(float)
LQAT_INSTANTIATE_DATAGEN(double)

}  // namespace lqat
