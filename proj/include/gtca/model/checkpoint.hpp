// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint layout (all little-endian):
//   "GTCA" u32 version
//   u32 header_len, header bytes, u32 crc32(header)
//     header: model config, dtype, LoRA settings + targets, branch flag and
//     branch config when present
//   u32 section_count, then per section:
//     u32 len, bytes [name, u8 dtype, u32 rank, u64 dims..., payload], u32 crc32

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gtca/model/transformer.hpp"

namespace gtca::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointVersionError : public InputError {
public:
    using InputError::InputError;
};

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Transformer<T>& model);

/// Throws CheckpointVersionError, TruncatedInput or ChecksumError for the
/// three corruption classes and InputError for anything else malformed.
template <typename T>
Transformer<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const Transformer<T>& model, const std::filesystem::path& path);

template <typename T>
Transformer<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace gtca::model
