// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/treebank/chunk_tree.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <functional>
#include <memory>
#include <sstream>

namespace gtca::tree {

namespace {

struct RawNode {
    std::string label;
    bool is_word = false;
    std::size_t offset = 0;
    std::vector<RawNode> children;
};

class BracketParser {
public:
    explicit BracketParser(std::string_view text) : s_(text) {}

    RawNode parse() {
        skip_ws();
        if (pos_ >= s_.size()) throw ParseError("empty tree string", 0);
        if (s_[pos_] != '(') throw ParseError("expected '('", pos_);
        RawNode root = parse_node();
        skip_ws();
        if (pos_ < s_.size()) throw ParseError("trailing characters after tree", pos_);
        return root;
    }

private:
    static bool is_atom_char(char c) { return c != '(' && c != ')' && !std::isspace(static_cast<unsigned char>(c)); }

    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    std::string read_atom() {
        const std::size_t start = pos_;
        while (pos_ < s_.size() && is_atom_char(s_[pos_])) ++pos_;
        return std::string(s_.substr(start, pos_ - start));
    }

    RawNode parse_node() {
        RawNode node;
        node.offset = pos_;
        ++pos_;  // '('
        skip_ws();
        if (pos_ < s_.size() && is_atom_char(s_[pos_])) node.label = read_atom();
        while (true) {
            skip_ws();
            if (pos_ >= s_.size()) throw ParseError("unbalanced parentheses: '(' never closed", node.offset);
            const char c = s_[pos_];
            if (c == ')') {
                ++pos_;
                break;
            }
            if (c == '(') {
                node.children.push_back(parse_node());
            } else {
                RawNode word;
                word.offset = pos_;
                word.is_word = true;
                word.label = read_atom();
                node.children.push_back(std::move(word));
            }
        }
        if (node.children.empty()) {
            throw ParseError(node.label.empty() ? "empty constituent" : "constituent '" + node.label + "' has no word",
                             node.offset);
        }
        return node;
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

void flatten(const RawNode& raw, std::int32_t parent, ChunkTree& tree, std::size_t& next_word) {
    const auto id = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    {
        ChunkNode& n = tree.nodes.back();
        n.label = raw.label;
        n.kind = raw.is_word ? NodeKind::word : NodeKind::phrase;
        n.parent = parent;
    }
    if (raw.is_word) {
        tree.nodes[id].span = {next_word, next_word};
        ++next_word;
        return;
    }
    if (raw.label.empty()) throw ParseError("constituent without a label", raw.offset);
    std::vector<std::uint32_t> kids;
    for (const RawNode& child : raw.children) {
        kids.push_back(static_cast<std::uint32_t>(tree.nodes.size()));
        flatten(child, static_cast<std::int32_t>(id), tree, next_word);
    }
    ChunkNode& n = tree.nodes[id];
    n.children = std::move(kids);
    n.span = {tree.nodes[n.children.front()].span.lo, tree.nodes[n.children.back()].span.hi};
}

// Post-order recomputation of internal spans from their children.
void recompute_spans(ChunkTree& tree, std::uint32_t id) {
    ChunkNode& n = tree.nodes[id];
    if (n.kind == NodeKind::word || n.children.empty()) return;
    for (const auto c : n.children) recompute_spans(tree, c);
    n.span = {tree.nodes[n.children.front()].span.lo, tree.nodes[n.children.back()].span.hi};
}

}  // namespace

std::size_t ChunkTree::word_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const ChunkNode& n) { return n.kind == NodeKind::word; }));
}

ChunkTree parse_bracketed(std::string_view text) {
    RawNode raw = BracketParser(text).parse();
    // Treebank files often wrap each tree in an unlabeled outer bracket.
    if (raw.label.empty() && raw.children.size() == 1 && !raw.children.front().is_word) {
        RawNode inner = std::move(raw.children.front());
        raw = std::move(inner);
    }
    ChunkTree tree;
    std::size_t next_word = 0;
    flatten(raw, -1, tree, next_word);
    compute_heights(tree);
    return tree;
}

void compute_heights(ChunkTree& tree) {
    tree.bfs_order.clear();
    tree.max_depth = 0;
    if (tree.nodes.empty()) return;
    tree.nodes[0].parent = -1;
    tree.nodes[0].depth = 0;
    std::deque<std::uint32_t> queue{0};
    while (!queue.empty()) {
        const auto id = queue.front();
        queue.pop_front();
        tree.bfs_order.push_back(id);
        const ChunkNode& n = tree.nodes[id];
        tree.max_depth = std::max(tree.max_depth, n.depth);
        for (const auto c : n.children) {
            tree.nodes[c].parent = static_cast<std::int32_t>(id);
            tree.nodes[c].depth = n.depth + 1;
            queue.push_back(c);
        }
    }
    if (tree.bfs_order.size() != tree.nodes.size()) throw InputError("tree has nodes unreachable from the root");
    for (auto& n : tree.nodes) n.height = tree.max_depth - n.depth;
}

ChunkTree align_subwords(const ChunkTree& word_tree, std::span<const TokenSpan> word_token_spans) {
    ChunkTree tree = word_tree;
    std::vector<std::uint32_t> words;
    for (std::uint32_t id = 0; id < tree.nodes.size(); ++id) {
        if (tree.nodes[id].kind == NodeKind::word) words.push_back(id);
    }
    std::sort(words.begin(), words.end(),
              [&](std::uint32_t a, std::uint32_t b) { return tree.nodes[a].span.lo < tree.nodes[b].span.lo; });
    if (words.size() != word_token_spans.size()) {
        throw InputError("tree has " + std::to_string(words.size()) + " words but " +
                         std::to_string(word_token_spans.size()) + " word token spans were given");
    }
    for (std::size_t i = 0; i < word_token_spans.size(); ++i) {
        const TokenSpan& s = word_token_spans[i];
        const std::size_t expected_lo = i == 0 ? 0 : word_token_spans[i - 1].hi + 1;
        if (s.lo > s.hi) throw InputError("word " + std::to_string(i) + " has an inverted token span");
        if (s.lo != expected_lo) {
            throw InputError("word token spans " + std::string(s.lo < expected_lo ? "overlap" : "leave a gap") +
                             " at word " + std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
        const auto wid = words[i];
        tree.nodes[wid].span = word_token_spans[i];
        tree.nodes[wid].children.clear();
        if (word_token_spans[i].length() > 1) {
            ChunkNode block;
            block.label = tree.nodes[wid].label;
            block.kind = NodeKind::subword_block;
            block.span = word_token_spans[i];
            block.parent = static_cast<std::int32_t>(wid);
            const auto bid = static_cast<std::uint32_t>(tree.nodes.size());
            tree.nodes.push_back(std::move(block));
            tree.nodes[wid].children.push_back(bid);
        }
    }
    recompute_spans(tree, 0);
    compute_heights(tree);
    return tree;
}

void validate_tree(const ChunkTree& tree) {
    if (tree.nodes.empty()) throw InputError("empty tree");
    if (tree.nodes[0].parent != -1 || tree.nodes[0].depth != 0) throw InputError("node 0 is not a root");
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
        const ChunkNode& n = tree.nodes[id];
        const std::string where = "node " + std::to_string(id) + " ('" + n.label + "')";
        if (n.span.lo > n.span.hi) throw InputError(where + ": inverted span");
        if (n.height != tree.max_depth - n.depth) throw InputError(where + ": height != D - depth");
        if (n.children.empty()) continue;
        std::size_t expect = n.span.lo;
        for (const auto c : n.children) {
            const ChunkNode& child = tree.nodes.at(c);
            if (child.parent != static_cast<std::int32_t>(id)) throw InputError(where + ": child parent link mismatch");
            if (child.span.lo != expect) throw InputError(where + ": child spans are not contiguous");
            expect = child.span.hi + 1;
        }
        if (expect != n.span.hi + 1) throw InputError(where + ": children do not cover the span");
        if (n.kind == NodeKind::subword_block) throw InputError(where + ": subword block with children");
        if (n.kind == NodeKind::word) {
            if (n.children.size() != 1 || tree.nodes[n.children[0]].kind != NodeKind::subword_block) {
                throw InputError(where + ": a word may only hold one subword block");
            }
        }
    }
}

ChunkTree contract_subwords(const ChunkTree& tree) {
    ChunkTree out;
    std::vector<std::int64_t> remap(tree.nodes.size(), -1);
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
        if (tree.nodes[id].kind == NodeKind::subword_block) continue;
        remap[id] = static_cast<std::int64_t>(out.nodes.size());
        out.nodes.push_back(tree.nodes[id]);
    }
    std::vector<std::uint32_t> words;
    for (auto& n : out.nodes) {
        std::vector<std::uint32_t> kids;
        for (const auto c : n.children) {
            if (remap[c] >= 0) kids.push_back(static_cast<std::uint32_t>(remap[c]));
        }
        n.children = std::move(kids);
    }
    for (std::uint32_t id = 0; id < out.nodes.size(); ++id) {
        if (out.nodes[id].kind == NodeKind::word) words.push_back(id);
    }
    std::sort(words.begin(), words.end(),
              [&](std::uint32_t a, std::uint32_t b) { return out.nodes[a].span.lo < out.nodes[b].span.lo; });
    for (std::size_t i = 0; i < words.size(); ++i) out.nodes[words[i]].span = {i, i};
    recompute_spans(out, 0);
    compute_heights(out);
    return out;
}

ChunkTree shift_spans(const ChunkTree& tree, std::size_t offset) {
    ChunkTree out = tree;
    for (auto& n : out.nodes) {
        n.span.lo += offset;
        n.span.hi += offset;
    }
    return out;
}

std::string to_bracketed(const ChunkTree& tree) {
    std::ostringstream os;
    std::function<void(std::uint32_t)> emit = [&](std::uint32_t id) {
        const ChunkNode& n = tree.nodes[id];
        if (n.kind == NodeKind::word) {
            os << n.label;
            return;
        }
        if (n.kind == NodeKind::subword_block) return;
        os << '(' << n.label;
        for (const auto c : n.children) {
            os << ' ';
            emit(c);
        }
        os << ')';
    };
    if (!tree.nodes.empty()) emit(0);
    return os.str();
}

std::vector<std::uint32_t> nodes_at_height(const ChunkTree& tree, std::uint32_t height) {
    std::vector<std::uint32_t> out;
    for (const auto id : tree.bfs_order) {
        if (tree.nodes[id].height == height) out.push_back(id);
    }
    return out;
}

std::vector<std::size_t> height_histogram(const ChunkTree& tree) {
    std::vector<std::size_t> hist(tree.max_depth + 1, 0);
    for (const auto& n : tree.nodes) {
        if (n.height >= hist.size()) hist.resize(n.height + 1, 0);
        ++hist[n.height];
    }
    return hist;
}

}  // namespace gtca::tree
