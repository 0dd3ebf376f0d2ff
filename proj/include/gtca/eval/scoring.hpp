// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Likelihood scoring: option log-likelihoods, argmax prediction, pairwise
// preference, and accuracy / MCC.

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gtca/data/prompt.hpp"
#include "gtca/model/transformer.hpp"

namespace gtca::eval {

/// Structure for the prompt of item `index`, or nullopt for a plain backbone
/// pass. Pair evaluation calls it once per sentence.
using StructureLookup = std::function<std::optional<data::PromptStructure>(const data::Prompt&, std::size_t index)>;

struct OptionScore {
    std::size_t index = 0;
    double loglik = 0.0;
    std::size_t tokens = 0;
};

/// Sum of log p(option_t | prompt, option_<t). Continuation tokens get mask 0.
/// `structure` describes the prompt only.
template <typename T>
double continuation_loglik(const model::Transformer<T>& m, std::span<const std::int32_t> prompt,
                           std::span<const std::int32_t> continuation, const data::PromptStructure* structure,
                           const branch::StructuralUpdateConfig& update);

/// Sum of log p(x_t | x_<t) over t >= 1.
template <typename T>
double sequence_loglik(const model::Transformer<T>& m, std::span<const std::int32_t> ids,
                       const data::PromptStructure* structure, const branch::StructuralUpdateConfig& update);

struct Prediction {
    std::size_t index = 0;
    bool tie = false;
};

/// Argmax with ties resolved to the lowest index.
Prediction predict(std::span<const double> scores);

struct PairOutcome {
    double good = 0.0;
    double bad = 0.0;
    /// Strict preference for the good sentence; equality is incorrect.
    bool correct() const noexcept { return good > bad; }
};

/// Matthews correlation over binary labels; 0 when the denominator vanishes.
double mcc(std::span<const int> labels, std::span<const int> predictions);
double accuracy(std::span<const std::size_t> gold, std::span<const std::size_t> predicted);

struct McqaItemResult {
    std::string id;
    std::vector<OptionScore> scores;
    Prediction prediction;
    std::size_t gold = 0;
};

struct EvalSettings {
    data::PromptTemplate tmpl;
    branch::StructuralUpdateConfig update;
    /// Items evaluated concurrently; results do not depend on this.
    std::size_t threads = 1;
};

/// Scores every option of every item. `demos` supplies the k demonstrations
/// (the first k entries are used for every item).
template <typename T>
std::vector<McqaItemResult> evaluate_mcqa(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                          std::span<const data::McqaItem> items, std::span<const data::McqaItem> demos,
                                          const StructureLookup& lookup, const EvalSettings& settings);

struct PairItemResult {
    std::string id;
    PairOutcome outcome;
};

template <typename T>
std::vector<PairItemResult> evaluate_pairs(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                           std::span<const data::PairItem> items, const StructureLookup& lookup,
                                           const EvalSettings& settings);

}  // namespace gtca::eval
