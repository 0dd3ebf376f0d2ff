// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Generated subject-verb agreement task. Every question has the same surface
// shape, "the N1 p1 the N2 p2 the N3 p3 the N4": four nouns joined by
// prepositions, two singular and two plural. One noun is the head of the
// subject phrase and the others sit inside modifiers; the answer ("is" or
// "are") follows the head's number. Which noun is the head is visible only
// in the tree, so a model without structure cannot beat chance.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gtca/data/prompt.hpp"
#include "gtca/treebank/trees_file.hpp"

namespace gtca::data {

struct AgreementConfig {
    std::size_t nouns = 4;  // head plus nouns - 1 attractors; at least 2
    std::size_t examples = 400;
};

struct AgreementExample {
    McqaItem item;            // options {"is", "are"}
    tree::TreeRecord record;  // one "question" field
    std::size_t head = 0;     // index of the head noun
};

/// Every token the task uses, specials first.
std::vector<std::string> agreement_vocabulary();
/// Question on one line followed by "Answer:"; the options are not listed.
PromptTemplate agreement_template();

/// Bracketed tree of one question. Modifiers before the head are
/// (MOD (NP the N) (P p)), modifiers after it (MOD (P p) (NP the N)), and the
/// head is a bare (NP (DT the) (NN N)) directly under the root.
std::string agreement_tree(const std::vector<std::string>& nouns, const std::vector<std::string>& preps,
                           std::size_t head);

/// Distinct questions (no surface string repeats, including across calls that
/// pass the same `exclude`). Ids are "<prefix>-<index>".
std::vector<AgreementExample> generate_agreement(const AgreementConfig& config, std::uint64_t seed,
                                                 const std::string& prefix,
                                                 const std::vector<AgreementExample>* exclude = nullptr);

}  // namespace gtca::data
