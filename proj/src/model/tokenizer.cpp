// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/model/tokenizer.hpp"

#include <fstream>

#include "gtca/util/errors.hpp"

namespace gtca::model {

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        if (vocab_[i].empty()) throw InputError("vocabulary: empty token at line " + std::to_string(i + 1));
        if (!index_.emplace(vocab_[i], static_cast<std::int32_t>(i)).second) {
            throw InputError("vocabulary: duplicate token '" + vocab_[i] + "'");
        }
    }
    unk_ = id(kUnkToken);
    bos_ = id(kBosToken);
    newline_ = id(kNewlineToken);
    if (unk_ < 0 || bos_ < 0 || newline_ < 0) throw InputError("vocabulary: <unk>, <bos> and <nl> are required");
}

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary " + path.string());
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        vocab.push_back(line);
    }
    return Tokenizer(std::move(vocab));
}

std::int32_t Tokenizer::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? -1 : it->second;
}

std::vector<std::int32_t> Tokenizer::encode_word(std::string_view word) const {
    std::vector<std::int32_t> out;
    std::size_t start = 0;
    while (start < word.size()) {
        std::int32_t found = -1;
        std::size_t end = word.size();
        for (; end > start; --end) {
            std::string piece(word.substr(start, end - start));
            if (start > 0) piece = "##" + piece;
            found = id(piece);
            if (found >= 0) break;
        }
        if (found < 0) return {unk_};
        out.push_back(found);
        start = end;
    }
    return out;
}

Encoding Tokenizer::encode(std::string_view text) const {
    Encoding out;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (c == '\n') {
            out.ids.push_back(newline_);
            ++i;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r') {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\r' && text[j] != '\n') ++j;
        const auto pieces = encode_word(text.substr(i, j - i));
        const std::size_t lo = out.ids.size();
        out.ids.insert(out.ids.end(), pieces.begin(), pieces.end());
        out.word_spans.push_back({lo, out.ids.size() - 1});
        i = j;
    }
    return out;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (const auto id : ids) {
        const std::string& t = token(id);
        if (id == newline_) {
            out += '\n';
        } else if (t.starts_with("##")) {
            out += t.substr(2);
        } else {
            if (!out.empty() && out.back() != '\n') out += ' ';
            out += t;
        }
    }
    return out;
}

}  // namespace gtca::model
