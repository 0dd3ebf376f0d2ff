// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gtca/treebank/chunk_tree.hpp"

namespace gtca::tree {

/// FNV-1a 64 over the little-endian 4-byte encoding of each id.
std::uint64_t cache_key(std::span<const std::int32_t> token_ids);

/// One field's tree with spans in positions of the keyed token sequence.
struct FieldTree {
    std::string name;
    ChunkTree tree;

    friend bool operator==(const FieldTree&, const FieldTree&) = default;
};

/// Cached structure for one input: field trees in prompt order plus the
/// token update mask.
struct StructureEntry {
    std::vector<FieldTree> fields;
    std::vector<std::uint8_t> mask;

    friend bool operator==(const StructureEntry&, const StructureEntry&) = default;
};

std::vector<std::uint8_t> serialize_tree(const ChunkTree& tree);
ChunkTree deserialize_tree(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_entry(const StructureEntry& entry);
StructureEntry deserialize_entry(std::span<const std::uint8_t> bytes);

/// Append-only record log keyed by cache_key. Record layout, little-endian:
/// u64 key, u32 payload length, payload, u32 CRC-32 of the payload.
///
/// Many concurrent readers or one writer. A record whose checksum fails is
/// evicted from the index and reported as ChecksumError.
class StructureCache {
public:
    /// In-memory cache with no backing file.
    StructureCache() = default;

    /// Opens (or creates) the log at `path` and indexes existing records.
    explicit StructureCache(std::filesystem::path path);

    StructureCache(const StructureCache&) = delete;
    StructureCache& operator=(const StructureCache&) = delete;

    /// Stores `payload` under `key`. Re-putting identical bytes is a no-op;
    /// different bytes under an existing key throw InputError.
    void put(std::uint64_t key, std::span<const std::uint8_t> payload);
    std::optional<std::vector<std::uint8_t>> get(std::uint64_t key);

    void put_entry(std::uint64_t key, const StructureEntry& entry);
    std::optional<StructureEntry> get_entry(std::uint64_t key);

    bool contains(std::uint64_t key) const;
    std::size_t size() const;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    struct Record {
        std::vector<std::uint8_t> payload;
        std::uint32_t crc = 0;
    };

    std::filesystem::path path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::uint64_t, Record> index_;
};

}  // namespace gtca::tree
