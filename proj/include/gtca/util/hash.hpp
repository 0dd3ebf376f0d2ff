// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace gtca {

/// FNV-1a, 64-bit variant.
inline constexpr std::uint64_t kFnv64Offset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnv64Prime = 0x00000100000001b3ULL;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t state = kFnv64Offset);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t state = kFnv64Offset);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view bytes);

/// Git blob object id: SHA-1 over "blob <len>\0" followed by the content.
std::string git_blob_sha1(std::string_view content);

}  // namespace gtca
