// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Control trees that keep the token sequence but break span faithfulness.

#pragma once

#include <cstdint>

#include "gtca/treebank/chunk_tree.hpp"

namespace gtca::tree {

/// Uniformly random binary bracketing over the word leaves of `tree`. Words
/// keep their token spans and subword blocks; internal nodes are labeled "X".
/// A single-word tree is returned unchanged.
ChunkTree randomize_tree(const ChunkTree& tree, std::uint64_t seed);

enum class PermuteScope : std::uint8_t {
    /// Shuffle span assignments among chunks of equal height. Note that the
    /// layer memory is the set of chunks at one height and attention is
    /// invariant to memory row order, so this leaves GTCA outputs unchanged.
    same_height,
    /// Shuffle span assignments across every non-root node. Shape, labels and
    /// heights stay put, so the height histogram is preserved while chunk
    /// contents no longer match their place in the tree.
    any_height,
};

/// Seeded span permutation. The root keeps its span.
ChunkTree permute_tree(const ChunkTree& tree, std::uint64_t seed, PermuteScope scope = PermuteScope::same_height);

/// Number of binary trees with `leaves` leaves (Catalan number C_{leaves-1}).
double binary_tree_count(std::size_t leaves);

}  // namespace gtca::tree
