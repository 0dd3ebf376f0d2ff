// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/memory/chunk_memory.hpp"

#include <map>
#include <string>

#include "gtca/numerics/ops.hpp"

namespace gtca::memory {

template <typename T>
HeightProjections<T>::HeightProjections(std::size_t d, std::uint32_t max_height) {
    weights.reserve(max_height + 1);
    for (std::uint32_t h = 0; h <= max_height; ++h) {
        weights.push_back({"struct.height_proj." + std::to_string(h), num::Tensor<T>::identity(d)});
    }
    ln_gain = {"struct.chunk_ln.gain", num::Tensor<T>({d}, T{1})};
    ln_bias = {"struct.chunk_ln.bias", num::Tensor<T>({d}, T{0})};
}

template <typename T>
std::vector<num::Parameter<T>*> HeightProjections<T>::parameters() {
    std::vector<num::Parameter<T>*> out;
    for (auto& w : weights) out.push_back(&w);
    out.push_back(&ln_gain);
    out.push_back(&ln_bias);
    return out;
}

std::vector<ChunkRef> select_layer_chunks(std::span<const tree::FieldTree> fields, std::uint32_t layer,
                                          std::size_t max_chunks) {
    std::vector<ChunkRef> out;
    for (std::size_t f = 0; f < fields.size() && out.size() < max_chunks; ++f) {
        const tree::ChunkTree& t = fields[f].tree;
        const std::uint32_t h = std::min(layer, t.max_depth);
        for (const auto id : t.bfs_order) {
            if (out.size() >= max_chunks) break;
            const tree::ChunkNode& node = t.nodes[id];
            if (node.height != h) continue;
            out.push_back({f, id, node.span, node.height});
        }
    }
    return out;
}

template <typename T>
std::vector<LayerMemory<T>> build_memories(num::Graph<T>& graph, num::Var<T> embeddings,
                                           std::span<const tree::FieldTree> fields, const HeightProjections<T>& proj,
                                           bool proj_trainable, std::size_t layers, std::size_t max_chunks) {
    const std::size_t n = embeddings.value().rows();
    std::vector<LayerMemory<T>> out(layers);
    std::map<std::pair<std::size_t, std::uint32_t>, std::size_t> unique;
    std::vector<num::RowSpan> spans;
    std::vector<std::size_t> weight_index;
    std::vector<std::vector<std::size_t>> rows_per_layer(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        out[l].chunks = select_layer_chunks(fields, static_cast<std::uint32_t>(l), max_chunks);
        for (const ChunkRef& c : out[l].chunks) {
            if (c.span.hi >= n) {
                throw InputError("chunk span [" + std::to_string(c.span.lo) + "," + std::to_string(c.span.hi) +
                                 "] of field '" + fields[c.field].name + "' exceeds the " + std::to_string(n) +
                                 "-token input");
            }
            auto [it, inserted] = unique.try_emplace({c.field, c.node}, spans.size());
            if (inserted) {
                spans.push_back({c.span.lo, c.span.hi});
                weight_index.push_back(proj.index_for(c.height));
            }
            rows_per_layer[l].push_back(it->second);
            out[l].right_bounds.push_back(c.span.hi);
            out[l].source_heights.push_back(c.height);
        }
    }
    if (spans.empty()) return out;

    // Only the projection matrices that are actually used enter the graph.
    std::map<std::size_t, std::size_t> local;
    std::vector<num::Var<T>> weights;
    std::vector<std::size_t> selector;
    for (const auto w : weight_index) {
        auto [it, inserted] = local.try_emplace(w, weights.size());
        if (inserted) weights.push_back(graph.parameter(proj.weights[w], proj_trainable));
        selector.push_back(it->second);
    }
    num::Var<T> pooled = num::span_mean_pool(embeddings, std::span<const num::RowSpan>(spans));
    num::Var<T> projected = num::rowwise_project(pooled, std::span<const std::size_t>(selector), weights);
    num::Var<T> encoded = num::layer_norm(projected, graph.parameter(proj.ln_gain, proj_trainable),
                                          graph.parameter(proj.ln_bias, proj_trainable), proj.ln_eps);
    for (std::size_t l = 0; l < layers; ++l) {
        if (rows_per_layer[l].empty()) continue;
        out[l].rows = num::gather_rows(encoded, std::span<const std::size_t>(rows_per_layer[l]));
    }
    return out;
}

template <typename T>
num::Tensor<T> mean_pool_span(const num::Tensor<T>& embeddings, tree::TokenSpan span) {
    if (span.lo > span.hi || span.hi >= embeddings.rows()) throw std::out_of_range("mean_pool_span: span out of range");
    const std::size_t d = embeddings.cols();
    std::vector<double> acc(d, 0.0);
    for (std::size_t r = span.lo; r <= span.hi; ++r) {
        for (std::size_t j = 0; j < d; ++j) acc[j] += embeddings(r, j);
    }
    num::Tensor<T> out({d});
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<T>(acc[j] / static_cast<double>(span.length()));
    return out;
}

template <typename T>
num::Tensor<T> encode_chunk(const num::Tensor<T>& pooled, std::uint32_t height, const HeightProjections<T>& proj) {
    const num::Tensor<T> projected = num::matmul(pooled, proj.weights[proj.index_for(height)].value);
    const num::Tensor<T> normed = num::layer_norm(projected, proj.ln_gain.value, proj.ln_bias.value, proj.ln_eps);
    return num::Tensor<T>({normed.size()}, normed.storage());
}

template struct HeightProjections<float>;
template struct HeightProjections<double>;

#define GTCA_INSTANTIATE_MEMORY(T)                                                                                 \
    template std::vector<LayerMemory<T>> build_memories<T>(num::Graph<T>&, num::Var<T>,                          \
                                                           std::span<const tree::FieldTree>, const HeightProjections<T>&, \
                                                           bool, std::size_t, std::size_t);                         \
    template num::Tensor<T> mean_pool_span<T>(const num::Tensor<T>&, tree::TokenSpan);                             \
    template num::Tensor<T> encode_chunk<T>(const num::Tensor<T>&, std::uint32_t, const HeightProjections<T>&);

GTCA_INSTANTIATE_MEMORY(float)
GTCA_INSTANTIATE_MEMORY(double)

#undef GTCA_INSTANTIATE_MEMORY

}  // namespace gtca::memory
