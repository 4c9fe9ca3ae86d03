// SPDX-License-Identifier: Apache-2.0
#include "lqat/tokenizer.hpp"

#include "lqat/errors.hpp"

namespace lqat::text {

std::optional<Token> encode_char(char c) {
    if (c == '\n') return kEos;
    if (c == '\t') c = ' ';
    const auto u = static_cast<unsigned char>(c);
    if (u < 32 || u > 126) return std::nullopt;
    return static_cast<Token>(u - 32);
}

std::vector<Token> encode(std::string_view text) {
    std::vector<Token> out;
    out.reserve(text.size());
    for (char c : text) {
        if (const auto t = encode_char(c)) out.push_back(*t);
    }
    return out;
}

std::string decode(std::span<const Token> ids) {
    std::string out;
    out.reserve(ids.size());
    for (Token t : ids) {
        if (t == kEos) {
            out.push_back('\n');
        } else if (t >= 0 && t < kEos) {
            out.push_back(static_cast<char>(t + 32));
        } else {
            throw InputError("token id " + std::to_string(t) + " outside the character vocabulary");
        }
    }
    return out;
}

std::vector<std::vector<Token>> encode_lines(std::string_view text) {
    std::vector<std::vector<Token>> out;
    std::vector<Token> cur;
    for (char c : text) {
        const auto t = encode_char(c);
        if (!t) continue;
        if (*t == kEos) {
            if (!cur.empty()) {
                cur.push_back(kEos);
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(*t);
        }
    }
    if (!cur.empty()) {
        cur.push_back(kEos);
        out.push_back(std::move(cur));
    }
    return out;
}

}  // namespace lqat::text
