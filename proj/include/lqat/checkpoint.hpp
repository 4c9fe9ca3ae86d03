// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//   "LQCK", u32 version = 1,
//   u32 config line count, then per line u32 length + UTF-8 "key=value",
//   u32 length + trained-scheme string ("none" when untrained),
//   u32 tensor count, then per tensor:
//     u16 name length + UTF-8 name, u8 rank, u32 dims[rank],
//     u8 dtype (0 = IEEE-754 binary32), raw data.
// Tensors are always stored as 32-bit floats, including from 64-bit models.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/model.hpp"

namespace lqat {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::string> config_to_lines(const ModelConfig& config);
ModelConfig config_from_lines(const std::vector<std::string>& lines);

template <typename T>
std::string encode_checkpoint(const Model<T>& model);

template <typename T>
Model<T> decode_checkpoint(std::string_view bytes);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace lqat
