// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Fixed-vocabulary word-piece tokenizer. Text is split on whitespace, a
// newline becomes its own "<nl>" token, and each word is matched greedily
// longest-first against the vocabulary with "##" marking continuations.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gtca/treebank/chunk_tree.hpp"

namespace gtca::model {

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<bos>";
inline constexpr std::string_view kNewlineToken = "<nl>";

struct Encoding {
    std::vector<std::int32_t> ids;
    /// Token block of every whitespace word, in order (newlines excluded).
    std::vector<tree::TokenSpan> word_spans;
};

class Tokenizer {
public:
    Tokenizer() = default;
    /// Vocabulary in id order. Must contain <unk>, <bos> and <nl>; duplicates
    /// are rejected.
    explicit Tokenizer(std::vector<std::string> vocab);
    static Tokenizer from_file(const std::filesystem::path& path);

    std::size_t size() const noexcept { return vocab_.size(); }
    std::int32_t id(std::string_view token) const;  // -1 when absent
    const std::string& token(std::int32_t id) const { return vocab_.at(static_cast<std::size_t>(id)); }
    std::int32_t unk_id() const noexcept { return unk_; }
    std::int32_t bos_id() const noexcept { return bos_; }
    std::int32_t newline_id() const noexcept { return newline_; }

    /// Tokens of one word. A word with no complete segmentation maps to <unk>.
    std::vector<std::int32_t> encode_word(std::string_view word) const;
    Encoding encode(std::string_view text) const;
    std::string decode(std::span<const std::int32_t> ids) const;
    const std::vector<std::string>& vocab() const noexcept { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, std::int32_t> index_;
    std::int32_t unk_ = -1;
    std::int32_t bos_ = -1;
    std::int32_t newline_ = -1;
};

}  // namespace gtca::model
