// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/eval/scoring.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "gtca/numerics/ops.hpp"

namespace gtca::eval {

namespace {

template <typename T>
num::Tensor<double> log_probs(const model::Transformer<T>& m, std::span<const std::int32_t> ids,
                              const data::PromptStructure* structure, const branch::StructuralUpdateConfig& update) {
    if (structure == nullptr) return num::log_softmax_rows(m.logits(ids));
    model::StructureInput in{structure->fields, structure->mask, update};
    return num::log_softmax_rows(m.logits(ids, &in));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

template <typename T>
double continuation_loglik(const model::Transformer<T>& m, std::span<const std::int32_t> prompt,
                           std::span<const std::int32_t> continuation, const data::PromptStructure* structure,
                           const branch::StructuralUpdateConfig& update) {
    if (prompt.empty() || continuation.empty()) throw InputError("continuation_loglik: empty prompt or continuation");
    std::vector<std::int32_t> ids(prompt.begin(), prompt.end());
    ids.insert(ids.end(), continuation.begin(), continuation.end());
    std::optional<data::PromptStructure> extended;
    if (structure != nullptr) {
        extended = *structure;
        if (extended->mask.size() != prompt.size()) throw InputError("continuation_loglik: mask/prompt size mismatch");
        extended->mask.resize(ids.size(), 0);
    }
    const auto lp = log_probs(m, ids, extended ? &*extended : nullptr, update);
    double total = 0.0;
    for (std::size_t t = 0; t < continuation.size(); ++t) {
        total += lp(prompt.size() - 1 + t, static_cast<std::size_t>(continuation[t]));
    }
    return total;
}

template <typename T>
double sequence_loglik(const model::Transformer<T>& m, std::span<const std::int32_t> ids,
                       const data::PromptStructure* structure, const branch::StructuralUpdateConfig& update) {
    if (ids.size() < 2) throw InputError("sequence_loglik: need at least two tokens");
    const auto lp = log_probs(m, ids, structure, update);
    double total = 0.0;
    for (std::size_t t = 1; t < ids.size(); ++t) total += lp(t - 1, static_cast<std::size_t>(ids[t]));
    return total;
}

Prediction predict(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("predict: no scores");
    Prediction p;
    for (std::size_t j = 1; j < scores.size(); ++j) {
        if (scores[j] > scores[p.index]) p.index = j;
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j != p.index && scores[j] == scores[p.index]) p.tie = true;
    }
    return p;
}

double mcc(std::span<const int> labels, std::span<const int> predictions) {
    if (labels.size() != predictions.size()) throw std::invalid_argument("mcc: size mismatch");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i], p = predictions[i];
        if ((y != 0 && y != 1) || (p != 0 && p != 1)) throw InputError("mcc: labels must be 0 or 1");
        if (y == 1 && p == 1) ++tp;
        if (y == 0 && p == 0) ++tn;
        if (y == 0 && p == 1) ++fp;
        if (y == 1 && p == 0) ++fn;
    }
    const double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    if (denom == 0.0) return 0.0;
    return (tp * tn - fp * fn) / denom;
}

double accuracy(std::span<const std::size_t> gold, std::span<const std::size_t> predicted) {
    if (gold.size() != predicted.size()) throw std::invalid_argument("accuracy: size mismatch");
    if (gold.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) hits += gold[i] == predicted[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

template <typename T>
std::vector<McqaItemResult> evaluate_mcqa(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                          std::span<const data::McqaItem> items, std::span<const data::McqaItem> demos,
                                          const StructureLookup& lookup, const EvalSettings& settings) {
    std::vector<McqaItemResult> out(items.size());
    parallel_for(items.size(), settings.threads, [&](std::size_t i) {
        const data::McqaItem& item = items[i];
        const data::Prompt prompt = data::assemble_prompt(settings.tmpl, tok, demos, item);
        const std::optional<data::PromptStructure> st = lookup ? lookup(prompt, i) : std::nullopt;
        McqaItemResult r;
        r.id = item.id;
        r.gold = item.answer;
        std::vector<double> values;
        for (std::size_t j = 0; j < item.options.size(); ++j) {
            const auto cont = tok.encode(item.options[j]).ids;
            if (prompt.ids.size() + cont.size() > m.config().max_len) {
                throw InputError("item '" + item.id + "' exceeds max_len " + std::to_string(m.config().max_len));
            }
            const double ll = continuation_loglik(m, prompt.ids, cont, st ? &*st : nullptr, settings.update);
            r.scores.push_back({j, ll, cont.size()});
            values.push_back(ll);
        }
        r.prediction = predict(values);
        out[i] = std::move(r);
    });
    return out;
}

template <typename T>
std::vector<PairItemResult> evaluate_pairs(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                           std::span<const data::PairItem> items, const StructureLookup& lookup,
                                           const EvalSettings& settings) {
    std::vector<PairItemResult> out(items.size());
    parallel_for(items.size(), settings.threads, [&](std::size_t i) {
        PairItemResult r;
        r.id = items[i].id;
        // Two separate forward passes.
        for (const bool good : {true, false}) {
            const data::Prompt p = data::sentence_prompt(tok, good ? items[i].good : items[i].bad);
            const std::optional<data::PromptStructure> st = lookup ? lookup(p, i) : std::nullopt;
            const double ll = sequence_loglik(m, p.ids, st ? &*st : nullptr, settings.update);
            (good ? r.outcome.good : r.outcome.bad) = ll;
        }
        out[i] = r;
    });
    return out;
}

#define GTCA_INSTANTIATE_EVAL(T)                                                                                    \
    template double continuation_loglik<T>(const model::Transformer<T>&, std::span<const std::int32_t>,             \
                                           std::span<const std::int32_t>, const data::PromptStructure*,             \
                                           const branch::StructuralUpdateConfig&);                                  \
    template double sequence_loglik<T>(const model::Transformer<T>&, std::span<const std::int32_t>,                 \
                                       const data::PromptStructure*, const branch::StructuralUpdateConfig&);        \
    template std::vector<McqaItemResult> evaluate_mcqa<T>(                                                          \
        const model::Transformer<T>&, const model::Tokenizer&, std::span<const data::McqaItem>,                     \
        std::span<const data::McqaItem>, const StructureLookup&, const EvalSettings&);                              \
    template std::vector<PairItemResult> evaluate_pairs<T>(const model::Transformer<T>&, const model::Tokenizer&,   \
                                                           std::span<const data::PairItem>, const StructureLookup&, \
                                                           const EvalSettings&);

GTCA_INSTANTIATE_EVAL(float)
GTCA_INSTANTIATE_EVAL(double)

#undef GTCA_INSTANTIATE_EVAL

}  // namespace gtca::eval
