// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/treebank/structure_cache.hpp"

#include <fstream>
#include <mutex>

#include "gtca/util/bytes.hpp"
#include "gtca/util/hash.hpp"

namespace gtca::tree {

namespace {

constexpr std::uint32_t kEntryVersion = 1;

void write_tree(ByteWriter& w, const ChunkTree& tree) {
    w.put<std::uint32_t>(tree.max_depth);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tree.nodes.size()));
    for (const ChunkNode& n : tree.nodes) {
        w.put_string(n.label);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(n.kind));
        w.put<std::uint64_t>(n.span.lo);
        w.put<std::uint64_t>(n.span.hi);
        w.put<std::int32_t>(n.parent);
        w.put<std::uint32_t>(n.depth);
        w.put<std::uint32_t>(n.height);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(n.children.size()));
        for (const auto c : n.children) w.put<std::uint32_t>(c);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tree.bfs_order.size()));
    for (const auto id : tree.bfs_order) w.put<std::uint32_t>(id);
}

ChunkTree read_tree(ByteReader& r) {
    ChunkTree tree;
    tree.max_depth = r.get<std::uint32_t>();
    const auto count = r.get<std::uint32_t>();
    if (count > r.remaining()) throw TruncatedInput("node count exceeds remaining bytes");
    tree.nodes.resize(count);
    for (ChunkNode& n : tree.nodes) {
        n.label = r.get_string();
        const auto kind = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(NodeKind::subword_block)) throw InputError("unknown node kind in entry");
        n.kind = static_cast<NodeKind>(kind);
        n.span.lo = r.get<std::uint64_t>();
        n.span.hi = r.get<std::uint64_t>();
        n.parent = r.get<std::int32_t>();
        n.depth = r.get<std::uint32_t>();
        n.height = r.get<std::uint32_t>();
        const auto kids = r.get<std::uint32_t>();
        if (kids > count) throw InputError("child count exceeds node count");
        n.children.resize(kids);
        for (auto& c : n.children) {
            c = r.get<std::uint32_t>();
            if (c >= count) throw InputError("child index out of range");
        }
    }
    const auto bfs = r.get<std::uint32_t>();
    if (bfs != count) throw InputError("BFS order length differs from node count");
    tree.bfs_order.resize(bfs);
    for (auto& id : tree.bfs_order) {
        id = r.get<std::uint32_t>();
        if (id >= count) throw InputError("BFS index out of range");
    }
    return tree;
}

}  // namespace

std::uint64_t cache_key(std::span<const std::int32_t> token_ids) {
    std::uint64_t state = kFnv64Offset;
    for (const std::int32_t id : token_ids) {
        const auto v = static_cast<std::uint32_t>(id);
        const std::uint8_t bytes[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                                       static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
        state = fnv1a64(bytes, state);
    }
    return state;
}

std::vector<std::uint8_t> serialize_tree(const ChunkTree& tree) {
    ByteWriter w;
    write_tree(w, tree);
    return w.take();
}

ChunkTree deserialize_tree(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    ChunkTree tree = read_tree(r);
    if (!r.at_end()) throw InputError("trailing bytes after serialized tree");
    return tree;
}

std::vector<std::uint8_t> serialize_entry(const StructureEntry& entry) {
    ByteWriter w;
    w.put<std::uint32_t>(kEntryVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(entry.fields.size()));
    for (const FieldTree& f : entry.fields) {
        w.put_string(f.name);
        write_tree(w, f.tree);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(entry.mask.size()));
    w.put_bytes(entry.mask);
    return w.take();
}

StructureEntry deserialize_entry(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    const auto version = r.get<std::uint32_t>();
    if (version != kEntryVersion) throw InputError("unsupported structure entry version " + std::to_string(version));
    StructureEntry entry;
    const auto fields = r.get<std::uint32_t>();
    if (fields > r.remaining()) throw TruncatedInput("field count exceeds remaining bytes");
    entry.fields.resize(fields);
    for (FieldTree& f : entry.fields) {
        f.name = r.get_string();
        f.tree = read_tree(r);
    }
    const auto n = r.get<std::uint32_t>();
    const auto mask = r.get_bytes(n);
    entry.mask.assign(mask.begin(), mask.end());
    if (!r.at_end()) throw InputError("trailing bytes after structure entry");
    return entry;
}

StructureCache::StructureCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) {
        std::ofstream create(path_, std::ios::binary);
        if (!create) throw InputError("cannot create cache file " + path_.string());
        return;
    }
    const std::vector<std::uint8_t> data = read_file_bytes(path_);
    ByteReader r(data);
    while (!r.at_end()) {
        const auto key = r.get<std::uint64_t>();
        const auto len = r.get<std::uint32_t>();
        const auto payload = r.get_bytes(len);
        const auto crc = r.get<std::uint32_t>();
        // Later records for the same key cannot differ (put rejects that), so
        // the first occurrence is kept.
        index_.try_emplace(key, Record{std::vector<std::uint8_t>(payload.begin(), payload.end()), crc});
    }
}

void StructureCache::put(std::uint64_t key, std::span<const std::uint8_t> payload) {
    std::unique_lock lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) {
        if (std::equal(it->second.payload.begin(), it->second.payload.end(), payload.begin(), payload.end())) return;
        throw InputError("cache key " + std::to_string(key) + " already holds a different entry");
    }
    Record rec{std::vector<std::uint8_t>(payload.begin(), payload.end()), crc32(payload)};
    if (!path_.empty()) {
        ByteWriter w;
        w.put<std::uint64_t>(key);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(payload.size()));
        w.put_bytes(payload);
        w.put<std::uint32_t>(rec.crc);
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
        out.flush();
        if (!out) throw InputError("failed to append to cache file " + path_.string());
    }
    index_.emplace(key, std::move(rec));
}

std::optional<std::vector<std::uint8_t>> StructureCache::get(std::uint64_t key) {
    {
        std::shared_lock lock(mutex_);
        auto it = index_.find(key);
        if (it == index_.end()) return std::nullopt;
        if (crc32(it->second.payload) == it->second.crc) return it->second.payload;
    }
    std::unique_lock lock(mutex_);
    index_.erase(key);
    throw ChecksumError("cache entry " + std::to_string(key) + " failed its checksum and was evicted");
}

void StructureCache::put_entry(std::uint64_t key, const StructureEntry& entry) {
    const auto bytes = serialize_entry(entry);
    put(key, bytes);
}

std::optional<StructureEntry> StructureCache::get_entry(std::uint64_t key) {
    auto bytes = get(key);
    if (!bytes) return std::nullopt;
    return deserialize_entry(*bytes);
}

bool StructureCache::contains(std::uint64_t key) const {
    std::shared_lock lock(mutex_);
    return index_.count(key) != 0;
}

std::size_t StructureCache::size() const {
    std::shared_lock lock(mutex_);
    return index_.size();
}

}  // namespace gtca::tree
