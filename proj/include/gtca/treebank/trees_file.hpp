// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// JSON-lines tree input, one record per example:
//   {"id": "...", "fields": [{"name": ..., "tree": "(S ...)", "word_token_spans": [[lo,hi], ...]}, ...]}
// word_token_spans index the tokens of that field's own text, starting at 0.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gtca/treebank/chunk_tree.hpp"
#include "gtca/treebank/structure_cache.hpp"

namespace gtca::tree {

struct TreeField {
    std::string name;
    std::string tree;
    std::vector<TokenSpan> word_token_spans;
};

struct TreeRecord {
    std::string id;  // optional in the file; empty when absent
    std::vector<TreeField> fields;

    const TreeField* find(std::string_view name) const;
};

TreeRecord parse_tree_record(std::string_view json_line);
std::string tree_record_to_json(const TreeRecord& record);

/// Reads every non-blank line. Errors name the 1-based line number.
std::vector<TreeRecord> read_trees_file(const std::filesystem::path& path);
void write_trees_file(const std::filesystem::path& path, const std::vector<TreeRecord>& records);

/// Parses, aligns and shifts one field so its spans index the assembled input.
FieldTree build_field_tree(const TreeField& field, std::size_t token_offset);

}  // namespace gtca::tree
