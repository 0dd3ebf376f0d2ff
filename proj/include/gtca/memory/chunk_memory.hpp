// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Per-layer chunk memory: span mean pooling of token embeddings, a
// height-specific projection, a shared LayerNorm, and the layer -> height
// selection with top-level reuse and the K cap.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gtca/numerics/graph.hpp"
#include "gtca/treebank/structure_cache.hpp"

namespace gtca::memory {

inline constexpr std::size_t kDefaultMaxChunks = 64;
inline constexpr std::uint32_t kDefaultMaxHeight = 16;

/// W_0 .. W_{H_max} (d x d) plus the chunk LayerNorm gain/bias shared across
/// heights. Row convention: c = LayerNorm(p W_h).
template <typename T>
struct HeightProjections {
    std::vector<num::Parameter<T>> weights;
    num::Parameter<T> ln_gain;
    num::Parameter<T> ln_bias;
    T ln_eps = T(1e-5);

    HeightProjections() = default;
    /// Identity W_h, unit gain, zero bias.
    HeightProjections(std::size_t d, std::uint32_t max_height);

    std::uint32_t max_height() const { return static_cast<std::uint32_t>(weights.size()) - 1; }
    std::size_t dim() const { return ln_gain.value.size(); }
    std::size_t index_for(std::uint32_t height) const { return std::min<std::size_t>(height, max_height()); }

    std::vector<num::Parameter<T>*> parameters();
};

/// A chunk chosen for some layer: which field tree / node it came from.
struct ChunkRef {
    std::size_t field = 0;
    std::uint32_t node = 0;
    tree::TokenSpan span;
    std::uint32_t height = 0;
};

/// Chunks of height min(layer, D_field) from each field in order, BFS order
/// within a field, truncated to the first `max_chunks` overall.
std::vector<ChunkRef> select_layer_chunks(std::span<const tree::FieldTree> fields, std::uint32_t layer,
                                          std::size_t max_chunks = kDefaultMaxChunks);

/// Graph-side memory for one layer. `chunks` is empty when no chunk exists at
/// the selected height; then `rows` is invalid.
template <typename T>
struct LayerMemory {
    num::Var<T> rows;  // m x d
    std::vector<std::size_t> right_bounds;
    std::vector<std::uint32_t> source_heights;
    std::vector<ChunkRef> chunks;

    std::size_t size() const noexcept { return chunks.size(); }
};

/// Builds memories for layers 0..layers-1 from the token-embedding rows
/// `embeddings` (n x d). Every distinct chunk is pooled and encoded once.
/// Throws InputError when a field tree reaches past row n-1.
template <typename T>
std::vector<LayerMemory<T>> build_memories(num::Graph<T>& graph, num::Var<T> embeddings,
                                           std::span<const tree::FieldTree> fields, const HeightProjections<T>& proj,
                                           bool proj_trainable, std::size_t layers,
                                           std::size_t max_chunks = kDefaultMaxChunks);

// Eager forms of the two per-chunk steps.

template <typename T>
num::Tensor<T> mean_pool_span(const num::Tensor<T>& embeddings, tree::TokenSpan span);

template <typename T>
num::Tensor<T> encode_chunk(const num::Tensor<T>& pooled, std::uint32_t height, const HeightProjections<T>& proj);

extern template struct HeightProjections<float>;
extern template struct HeightProjections<double>;

}  // namespace gtca::memory
