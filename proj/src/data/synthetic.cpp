// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/data/synthetic.hpp"

#include <unordered_set>

#include "gtca/model/tokenizer.hpp"
#include "gtca/util/errors.hpp"
#include "gtca/util/rng.hpp"

namespace gtca::data {

namespace {

const std::vector<std::string> kSingular = {"key", "dog", "door", "book", "cat", "box", "car", "tree"};
const std::vector<std::string> kPlural = {"keys", "dogs", "doors", "books", "cats", "boxes", "cars", "trees"};
const std::vector<std::string> kPreps = {"of", "near", "by", "with", "on", "under"};

}  // namespace

std::vector<std::string> agreement_vocabulary() {
    std::vector<std::string> v = {std::string(model::kUnkToken), std::string(model::kBosToken),
                                  std::string(model::kNewlineToken), "Answer:", "the", "is", "are"};
    v.insert(v.end(), kSingular.begin(), kSingular.end());
    v.insert(v.end(), kPlural.begin(), kPlural.end());
    v.insert(v.end(), kPreps.begin(), kPreps.end());
    return v;
}

PromptTemplate agreement_template() {
    PromptTemplate t;
    t.name = "agreement";
    t.instruction.clear();
    t.question_label.clear();
    t.options_label.clear();
    t.list_options = false;
    return t;
}

std::string agreement_tree(const std::vector<std::string>& nouns, const std::vector<std::string>& preps,
                           std::size_t head) {
    if (nouns.size() < 2 || preps.size() + 1 != nouns.size() || head >= nouns.size()) {
        throw InputError("agreement_tree: need n >= 2 nouns, n - 1 prepositions and a head index below n");
    }
    auto np = [](const std::string& n) { return "(NP (DT the) (NN " + n + "))"; };
    std::string s = "(NP";
    for (std::size_t i = 0; i < nouns.size(); ++i) {
        if (i < head) {
            s += " (MOD " + np(nouns[i]) + " (P " + preps[i] + "))";
        } else if (i == head) {
            s += " " + np(nouns[i]);
        } else {
            s += " (MOD (P " + preps[i - 1] + ") " + np(nouns[i]) + ")";
        }
    }
    return s + ")";
}

std::vector<AgreementExample> generate_agreement(const AgreementConfig& config, std::uint64_t seed,
                                                 const std::string& prefix,
                                                 const std::vector<AgreementExample>* exclude) {
    if (config.nouns < 2) throw InputError("agreement task needs at least two nouns");
    Rng rng(derive_seed(seed, "synthetic.agreement." + prefix));
    std::unordered_set<std::string> seen;
    if (exclude != nullptr)
        for (const auto& e : *exclude) seen.insert(e.item.question);
    std::vector<AgreementExample> out;
    std::size_t attempts = 0;
    while (out.size() < config.examples) {
        if (++attempts > 100 * config.examples + 1000) throw InputError("agreement task: too few distinct questions");
        // Half singular, half plural (the odd one out is random).
        std::vector<bool> plural(config.nouns);
        for (std::size_t i = 0; i < config.nouns; ++i) plural[i] = i % 2 == 1;
        if (config.nouns % 2 == 1) plural.back() = rng.uniform() < 0.5;
        rng.shuffle(plural);
        std::vector<std::string> nouns, preps;
        for (std::size_t i = 0; i < config.nouns; ++i) {
            const auto& pool = plural[i] ? kPlural : kSingular;
            nouns.push_back(pool[rng.uniform_index(pool.size())]);
        }
        for (std::size_t i = 0; i + 1 < config.nouns; ++i) preps.push_back(kPreps[rng.uniform_index(kPreps.size())]);
        const std::size_t head = rng.uniform_index(config.nouns);

        std::string question;
        for (std::size_t i = 0; i < config.nouns; ++i) {
            if (i > 0) question += " " + preps[i - 1] + " ";
            question += "the " + nouns[i];
        }
        if (!seen.insert(question).second) continue;

        AgreementExample ex;
        ex.head = head;
        ex.item = {prefix + "-" + std::to_string(out.size()), question, {"is", "are"}, plural[head] ? 1u : 0u};
        tree::TreeField field{"question", agreement_tree(nouns, preps, head), {}};
        // One token per word.
        const std::size_t words = 3 * config.nouns - 1;
        for (std::size_t w = 0; w < words; ++w) field.word_token_spans.push_back({w, w});
        ex.record = {ex.item.id, {field}};
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace gtca::data
