// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/treebank/corruption.hpp"

#include <algorithm>
#include <map>

#include "gtca/util/rng.hpp"

namespace gtca::tree {

namespace {

// catalan[k] = C_k, in long double so trees of a few hundred words still work.
const std::vector<long double>& catalan_table(std::size_t upto) {
    thread_local std::vector<long double> table{1.0L};
    while (table.size() <= upto) {
        const std::size_t k = table.size();
        table.push_back(table.back() * 2.0L * (2.0L * static_cast<long double>(k) - 1.0L) /
                        (static_cast<long double>(k) + 1.0L));
    }
    return table;
}

struct WordUnit {
    ChunkNode word;
    std::vector<ChunkNode> blocks;
};

// Builds a random binary tree over words[lo, hi) under `parent`; returns node id.
std::uint32_t build_random(ChunkTree& out, const std::vector<WordUnit>& words, std::size_t lo, std::size_t hi,
                           std::int32_t parent, Rng& rng) {
    const auto id = static_cast<std::uint32_t>(out.nodes.size());
    if (hi - lo == 1) {
        const WordUnit& w = words[lo];
        out.nodes.push_back(w.word);
        out.nodes[id].parent = parent;
        out.nodes[id].children.clear();
        for (const ChunkNode& b : w.blocks) {
            const auto bid = static_cast<std::uint32_t>(out.nodes.size());
            out.nodes.push_back(b);
            out.nodes[bid].parent = static_cast<std::int32_t>(id);
            out.nodes[id].children.push_back(bid);
        }
        return id;
    }
    out.nodes.emplace_back();
    out.nodes[id].label = "X";
    out.nodes[id].parent = parent;
    const std::size_t n = hi - lo;
    const auto& cat = catalan_table(n);
    // P(left subtree has a leaves) = C_{a-1} C_{n-a-1} / C_{n-1}.
    const long double r = static_cast<long double>(rng.uniform()) * cat[n - 1];
    long double acc = 0.0L;
    std::size_t left = n - 1;
    for (std::size_t a = 1; a < n; ++a) {
        acc += cat[a - 1] * cat[n - a - 1];
        if (r < acc) {
            left = a;
            break;
        }
    }
    const auto l = build_random(out, words, lo, lo + left, static_cast<std::int32_t>(id), rng);
    const auto rgt = build_random(out, words, lo + left, hi, static_cast<std::int32_t>(id), rng);
    out.nodes[id].children = {l, rgt};
    out.nodes[id].span = {out.nodes[l].span.lo, out.nodes[rgt].span.hi};
    return id;
}

}  // namespace

double binary_tree_count(std::size_t leaves) {
    if (leaves == 0) return 0.0;
    return static_cast<double>(catalan_table(leaves - 1)[leaves - 1]);
}

ChunkTree randomize_tree(const ChunkTree& tree, std::uint64_t seed) {
    std::vector<WordUnit> words;
    for (const ChunkNode& n : tree.nodes) {
        if (n.kind != NodeKind::word) continue;
        WordUnit w{n, {}};
        for (const auto c : n.children) w.blocks.push_back(tree.nodes[c]);
        words.push_back(std::move(w));
    }
    if (words.size() <= 1) return tree;
    std::sort(words.begin(), words.end(),
              [](const WordUnit& a, const WordUnit& b) { return a.word.span.lo < b.word.span.lo; });
    Rng rng(seed);
    ChunkTree out;
    build_random(out, words, 0, words.size(), -1, rng);
    compute_heights(out);
    return out;
}

ChunkTree permute_tree(const ChunkTree& tree, std::uint64_t seed, PermuteScope scope) {
    ChunkTree out = tree;
    std::map<std::uint32_t, std::vector<std::uint32_t>> groups;
    for (const auto id : tree.bfs_order) {
        if (id == 0) continue;
        const std::uint32_t key = scope == PermuteScope::same_height ? tree.nodes[id].height : 0;
        groups[key].push_back(id);
    }
    Rng rng(seed);
    for (auto& [key, ids] : groups) {
        if (ids.size() < 2) continue;
        std::vector<TokenSpan> spans;
        for (const auto id : ids) spans.push_back(tree.nodes[id].span);
        rng.shuffle(spans);
        for (std::size_t k = 0; k < ids.size(); ++k) out.nodes[ids[k]].span = spans[k];
    }
    return out;
}

}  // namespace gtca::tree
