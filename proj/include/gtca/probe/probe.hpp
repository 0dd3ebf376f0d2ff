// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Layer-wise structural probing: a low-rank distance probe on word vectors,
// undirected minimum spanning trees over predicted distances, and UUAS.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gtca/data/prompt.hpp"
#include "gtca/model/tokenizer.hpp"
#include "gtca/model/transformer.hpp"
#include "gtca/numerics/tensor.hpp"

namespace gtca::probe {

using Edge = std::pair<std::size_t, std::size_t>;  // always first < second

/// One gold sentence. `tokens` are model token strings; word w covers
/// tokens word_token_spans[w]; `edges` connect words.
struct GoldItem {
    std::vector<std::string> tokens;
    std::vector<Edge> edges;
    std::vector<tree::TokenSpan> word_token_spans;

    std::size_t words() const noexcept { return word_token_spans.size(); }
};

/// Throws InputError unless edges form a spanning tree over the words and
/// the spans tile the tokens in order.
void validate_gold(const GoldItem& item);

/// JSON lines {tokens, edges, word_token_spans}; errors name the line.
std::vector<GoldItem> read_gold_file(const std::filesystem::path& path);
void write_gold_file(const std::filesystem::path& path, const std::vector<GoldItem>& items);

/// Path lengths between every pair of words.
num::Tensor<double> tree_distances(std::size_t n, const std::vector<Edge>& edges);

/// Kruskal over the upper triangle with edges ordered by (weight, i, j).
/// Input must be square, symmetric, non-negative with a zero diagonal.
std::vector<Edge> mst_undirected(const num::Tensor<double>& distances);

/// |predicted ∩ gold| / (n - 1) over unordered edges. Both must hold n - 1
/// edges for the same n >= 2.
double uuas(const std::vector<Edge>& predicted, const std::vector<Edge>& gold);

/// One sentence for probe training: word vectors (w x d) and gold distances.
struct ProbeSample {
    num::Tensor<double> words;
    num::Tensor<double> gold;
};

struct ProbeConfig {
    std::size_t rank = 0;  // 0: min(d, 32)
    std::size_t steps = 400;
    double lr = 1e-2;
    /// Loss is recorded every `checkpoint_every` steps. A checkpoint whose
    /// loss exceeds the previous one is rejected: the previous probe is
    /// restored and the learning rate halved, so the recorded curve never
    /// increases.
    std::size_t checkpoint_every = 20;
    std::uint64_t seed = 0;
};

struct ProbeParams {
    num::Tensor<double> b;  // k x d
    std::vector<double> checkpoint_losses;
};

/// Predicted squared distances ||B (h_i - h_j)||^2 for every pair of rows.
num::Tensor<double> probe_distances(const num::Tensor<double>& b, const num::Tensor<double>& words);

/// Mean over sentences of the mean absolute error over word pairs i < j.
double probe_loss(const num::Tensor<double>& b, std::span<const ProbeSample> samples);

/// Full-batch Adam on the L1 loss from B = the first k rows of the identity.
/// Samples are visited in a canonical content order, so the result does not
/// depend on their order. Throws InputError for rank > d, no samples or a
/// sample with fewer than 2 words.
ProbeParams train_probe(std::span<const ProbeSample> samples, const ProbeConfig& config);

/// Mean UUAS of uniformly random spanning trees (Prüfer sampling).
double random_baseline_uuas(const std::vector<GoldItem>& items, std::size_t samples_per_item, std::uint64_t seed);

struct LayerUuas {
    std::size_t layer = 0;
    double uuas = 0.0;
    std::size_t sentences = 0;
};

struct ProbeLayersOptions {
    ProbeConfig probe;
    /// Fraction of items held out for UUAS; the rest train the probe. With
    /// fewer than 5 items every item is used for both.
    double heldout_fraction = 0.2;
    std::size_t threads = 1;
    /// Optional structure per item (empty: plain backbone) and its update.
    std::vector<data::PromptStructure> structures;
    branch::StructuralUpdateConfig update;
};

/// Word vectors (mean of token states) of every item at every layer output.
template <typename T>
std::vector<std::vector<ProbeSample>> layer_samples(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                                    const std::vector<GoldItem>& items,
                                                    const ProbeLayersOptions& options);

/// Trains one probe per layer (embeddings excluded) and reports mean UUAS on
/// the held-out items.
template <typename T>
std::vector<LayerUuas> probe_layers(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                    const std::vector<GoldItem>& items, const ProbeLayersOptions& options);

/// Seeded subsample of at most n items, kept in input order.
std::vector<GoldItem> subsample(const std::vector<GoldItem>& items, std::size_t n, std::uint64_t seed);

void write_uuas_csv(const std::filesystem::path& path, const std::vector<LayerUuas>& rows);

}  // namespace gtca::probe
