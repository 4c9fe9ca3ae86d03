// SPDX-License-Identifier: Apache-2.0
//
// Synthetic-corpus generation from a teacher by next-token generation.
//
// Each record starts from a uniformly drawn non-special token and extends it
// one token at a time until end-of-sequence or the length limit. Record i of
// a corpus uses seed derive_seed(master, i), so output does not depend on the
// number of worker threads.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/model.hpp"

namespace lqat {

struct GenStrategy {
    enum class Kind : std::uint8_t { Top1, Sampled, Hybrid };
    Kind kind = Kind::Sampled;
    double temperature = 1.0;
    // Hybrid: number of leading generated tokens picked by argmax.
    std::size_t k = 4;
    // Restrict sampling to the top_k most likely tokens; 0 keeps the full distribution.
    std::size_t top_k = 0;

    static GenStrategy top1() { return {Kind::Top1, 1.0, 4, 0}; }
    static GenStrategy sampled(double temperature = 1.0) { return {Kind::Sampled, temperature, 4, 0}; }
    static GenStrategy hybrid(std::size_t k = 4, double temperature = 1.0) { return {Kind::Hybrid, temperature, k, 0}; }

    void validate() const;
    // "top1", "sampled" or "hybrid".
    static Kind parse_kind(std::string_view name);
    std::string name() const;
};

enum class Termination : std::uint8_t { Eos, MaxLen };

struct GenRecord {
    std::vector<Token> tokens;
    Termination termination = Termination::MaxLen;
};

struct GenOptions {
    std::size_t max_len = 256;
    // When non-zero the teacher only sees the most recent `context_window`
    // tokens (positions restart at 0 inside the window); records may then be
    // longer than the teacher's max_seq_len.
    std::size_t context_window = 0;
    bool stop_at_eos = true;
};

template <typename T>
GenRecord generate_sequence(const Model<T>& teacher, const GenStrategy& strategy, std::uint64_t seed,
                            const GenOptions& options = {});

// Records 0..count-1 generated on up to `threads` workers (0 = hardware concurrency).
template <typename T>
std::vector<GenRecord> generate_records(const Model<T>& teacher, const GenStrategy& strategy, std::size_t count,
                                        std::uint64_t master_seed, const GenOptions& options = {},
                                        unsigned threads = 1);

/// Dataset file (little-endian): "LQDG", u32 version = 1, u32 vocab size,
/// u64 record count, then per record u32 length and that many u32 ids.
struct Dataset {
    std::uint32_t vocab_size = 0;
    std::vector<std::vector<Token>> records;

    std::size_t token_count() const;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view bytes);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

template <typename T>
Dataset generate_corpus(const Model<T>& teacher, const GenStrategy& strategy, std::size_t count,
                        std::uint64_t master_seed, const GenOptions& options = {}, unsigned threads = 1);

/// Number of distinct adjacent token pairs over all records.
std::size_t distinct_bigrams(const std::vector<std::vector<Token>>& records);

unsigned resolve_threads(unsigned requested);

}  // namespace lqat
