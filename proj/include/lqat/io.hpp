// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte buffers and whole-file I/O for the binary formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "lqat/errors.hpp"

namespace lqat::io {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(std::string_view s) { buf_.append(s); }

    const std::string& str() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::string buf_;
};

// Reads fields in order; a short read raises E("<format>: truncated while reading <field>").
template <typename E>
class ByteReader {
public:
    ByteReader(std::string_view data, std::string format) : data_(data), format_(std::move(format)) {}

    std::uint8_t u8(const std::string& field) { return static_cast<std::uint8_t>(get(1, field)); }
    std::uint16_t u16(const std::string& field) { return static_cast<std::uint16_t>(get(2, field)); }
    std::uint32_t u32(const std::string& field) { return static_cast<std::uint32_t>(get(4, field)); }
    std::uint64_t u64(const std::string& field) { return get(8, field); }
    float f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }
    std::string_view bytes(std::size_t n, const std::string& field) {
        need(n, field);
        const std::string_view s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return data_.size() - pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    [[noreturn]] void fail(const std::string& msg) const { throw E(format_ + ": " + msg); }

private:
    void need(std::size_t n, const std::string& field) const {
        if (data_.size() - pos_ < n) fail("truncated while reading " + field);
    }
    std::uint64_t get(int n, const std::string& field) {
        need(static_cast<std::size_t>(n), field);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::string_view data_;
    std::string format_;
    std::size_t pos_ = 0;
};

// Whole-file helpers; failures raise FileError naming the path.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace lqat::io
