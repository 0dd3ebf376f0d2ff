// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Random constituency trees for property tests.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "gtca/treebank/chunk_tree.hpp"
#include "gtca/util/rng.hpp"

namespace gtca::testing {

namespace detail {

// `levels` counts this node and everything below it, word nodes included. A
// single word needs 2 levels (preterminal + word), a multi-word span needs 3.
inline std::string random_subtree(Rng& rng, std::size_t lo, std::size_t hi, std::size_t levels, int& label) {
    if (lo == hi) {
        if (levels > 2 && rng.uniform() < 0.3) {
            return "(U" + std::to_string(label++) + " " + random_subtree(rng, lo, hi, levels - 1, label) + ")";
        }
        return "(P w" + std::to_string(lo) + ")";
    }
    std::string out = "(N" + std::to_string(label++);
    if (levels <= 3) {
        for (std::size_t i = lo; i <= hi; ++i) out += " (P w" + std::to_string(i) + ")";
        return out + ")";
    }
    // Random cut points give 2..min(4, width) children.
    const std::size_t width = hi - lo + 1;
    const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_index(std::min<std::size_t>(3, width - 1)));
    std::vector<std::size_t> cuts;
    for (std::size_t i = lo + 1; i <= hi; ++i) cuts.push_back(i);
    rng.shuffle(cuts);
    cuts.resize(k - 1);
    std::sort(cuts.begin(), cuts.end());
    std::size_t start = lo;
    cuts.push_back(hi + 1);
    for (const std::size_t c : cuts) {
        out += " " + random_subtree(rng, start, c - 1, levels - 1, label);
        start = c;
    }
    return out + ")";
}

}  // namespace detail

/// Bracketed tree over words w0..w{words-1} with depth at most `max_depth`
/// (root at depth 0, words at the bottom). Requires max_depth >= 2.
inline std::string random_bracketed(Rng& rng, std::size_t words, std::size_t max_depth) {
    int label = 0;
    const std::size_t levels = std::max<std::size_t>(words == 1 ? 2 : 3, 2 + rng.uniform_index(max_depth));
    return detail::random_subtree(rng, 0, words - 1, std::min(levels, max_depth + 1), label);
}

/// Word -> token blocks with 1 or 2 tokens per word when `subwords` is set.
inline std::vector<tree::TokenSpan> random_word_spans(Rng& rng, std::size_t words, bool subwords) {
    std::vector<tree::TokenSpan> out;
    std::size_t next = 0;
    for (std::size_t w = 0; w < words; ++w) {
        const std::size_t len = subwords && rng.uniform() < 0.3 ? 2 : 1;
        out.push_back({next, next + len - 1});
        next += len;
    }
    return out;
}

/// Token-level tree with at most `max_tokens` tokens and D <= max_depth.
inline tree::ChunkTree random_token_tree(Rng& rng, std::size_t max_tokens, std::size_t max_depth) {
    const bool subwords = max_depth >= 3 && rng.uniform() < 0.5;
    const std::size_t word_depth = subwords ? max_depth - 1 : max_depth;
    const std::size_t max_words = subwords ? std::max<std::size_t>(1, max_tokens / 2) : max_tokens;
    const std::size_t words = 1 + rng.uniform_index(max_words);
    const tree::ChunkTree word_tree = tree::parse_bracketed(random_bracketed(rng, words, word_depth));
    if (!subwords) return word_tree;
    const auto spans = random_word_spans(rng, words, true);
    return tree::align_subwords(word_tree, spans);
}

}  // namespace gtca::testing
