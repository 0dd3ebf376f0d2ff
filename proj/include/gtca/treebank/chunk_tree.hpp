// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gtca/util/errors.hpp"

namespace gtca::tree {

/// Inclusive token (or word) interval.
struct TokenSpan {
    std::size_t lo = 0;
    std::size_t hi = 0;

    std::size_t length() const noexcept { return hi - lo + 1; }
    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

enum class NodeKind : std::uint8_t {
    phrase = 0,         // labeled constituent, including preterminals
    word = 1,           // surface word under its preterminal
    subword_block = 2,  // token block of a word split into several subwords
};

struct ChunkNode {
    std::string label;
    NodeKind kind = NodeKind::phrase;
    TokenSpan span;
    std::vector<std::uint32_t> children;
    std::int32_t parent = -1;
    std::uint32_t depth = 0;
    std::uint32_t height = 0;

    friend bool operator==(const ChunkNode&, const ChunkNode&) = default;
};

/// Arena tree. Node 0 is always the root. `max_depth` is D.
struct ChunkTree {
    std::vector<ChunkNode> nodes;
    std::uint32_t max_depth = 0;
    std::vector<std::uint32_t> bfs_order;

    const ChunkNode& root() const { return nodes.at(0); }
    /// Number of positions the root covers (root span hi + 1 when rooted at 0).
    std::size_t span_width() const { return nodes.empty() ? 0 : root().span.length(); }
    std::size_t word_count() const;

    friend bool operator==(const ChunkTree&, const ChunkTree&) = default;
};

/// Reads one bracketed s-expression, e.g. "(S (NP (DT the) (NN cat)) (VP (VBZ sits)))".
/// Words become `word` nodes with spans over word positions. An unlabeled outer
/// wrapper "( (S ...) )" is dropped. Throws ParseError with a character offset.
ChunkTree parse_bracketed(std::string_view text);

/// Re-expresses a word-level tree over token indices. `word_token_spans[i]`
/// is the token block of word i; spans must be contiguous, ordered and start
/// at 0. A word spanning more than one token gains one subword_block child.
ChunkTree align_subwords(const ChunkTree& word_tree, std::span<const TokenSpan> word_token_spans);

/// Recomputes parent links, depths, D, heights (D - depth) and BFS order.
void compute_heights(ChunkTree& tree);

/// Checks the structural invariants: children partition the parent span in
/// order, lo <= hi, heights equal D - depth. Throws InputError.
void validate_tree(const ChunkTree& tree);

/// Removes subword_block nodes; the inverse of align_subwords' node insertion.
ChunkTree contract_subwords(const ChunkTree& tree);

/// Adds `offset` to every span.
ChunkTree shift_spans(const ChunkTree& tree, std::size_t offset);

/// Bracketed rendering; word nodes print their label as the surface form.
std::string to_bracketed(const ChunkTree& tree);

/// Node ids with the given height, in BFS order.
std::vector<std::uint32_t> nodes_at_height(const ChunkTree& tree, std::uint32_t height);

/// Count of nodes per height, index = height.
std::vector<std::size_t> height_histogram(const ChunkTree& tree);

}  // namespace gtca::tree
