// SPDX-License-Identifier: Apache-2.0
//
// Deterministic multi-domain plain-text corpus for the toy teacher: English-
// like prose, arithmetic facts, log/config lines and code-like lines. Every
// line is printable ASCII and ends in '\n'.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/random.hpp"

namespace lqat::synth {

enum class Domain : std::uint8_t { Prose, Arithmetic, Logs, Code };

inline constexpr Domain kAllDomains[] = {Domain::Prose, Domain::Arithmetic, Domain::Logs, Domain::Code};

std::string domain_name(Domain d);
Domain parse_domain(std::string_view name);

// One line (without the trailing newline).
std::string make_line(Domain d, Rng& rng);

struct CorpusOptions {
    std::uint64_t seed = 1;
    std::size_t min_bytes = 1 << 20;
    // Domains drawn uniformly per line.
    std::vector<Domain> domains{std::begin(kAllDomains), std::end(kAllDomains)};
};

// Lines are appended until the text reaches min_bytes.
std::string make_corpus(const CorpusOptions& options);

}  // namespace lqat::synth
