// SPDX-License-Identifier: Apache-2.0
//
// Character-level tokenizer over printable ASCII. Ids 0..94 are the bytes
// 32..126; id 95 is end-of-sequence. A newline maps to end-of-sequence, a tab
// to a space, and every other byte is dropped.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/tensor.hpp"

namespace lqat::text {

inline constexpr std::size_t kVocabSize = 96;
inline constexpr Token kEos = 95;

std::optional<Token> encode_char(char c);
std::vector<Token> encode(std::string_view text);
// End-of-sequence decodes to a newline.
std::string decode(std::span<const Token> ids);

// One sequence per non-empty line, each terminated by end-of-sequence.
std::vector<std::vector<Token>> encode_lines(std::string_view text);

}  // namespace lqat::text
