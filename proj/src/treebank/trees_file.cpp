// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/treebank/trees_file.hpp"

#include <fstream>

#include "json.hpp"

namespace gtca::tree {

using nlohmann::json;

const TreeField* TreeRecord::find(std::string_view name) const {
    for (const auto& f : fields) {
        if (f.name == name) return &f;
    }
    return nullptr;
}

TreeRecord parse_tree_record(std::string_view json_line) {
    json j;
    try {
        j = json::parse(json_line);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("fields") || !j["fields"].is_array()) {
        throw InputError("tree record needs a \"fields\" array");
    }
    TreeRecord rec;
    if (j.contains("id")) rec.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    for (const auto& f : j["fields"]) {
        if (!f.is_object() || !f.contains("name") || !f.contains("tree") || !f.contains("word_token_spans")) {
            throw InputError("tree field needs name, tree and word_token_spans");
        }
        TreeField field;
        try {
            field.name = f["name"].get<std::string>();
            field.tree = f["tree"].get<std::string>();
            for (const auto& s : f["word_token_spans"]) {
                if (!s.is_array() || s.size() != 2) throw InputError("word_token_spans entries must be [lo, hi]");
                const auto lo = s[0].get<std::int64_t>();
                const auto hi = s[1].get<std::int64_t>();
                if (lo < 0 || hi < lo) throw InputError("invalid word token span [" + std::to_string(lo) + "," +
                                                        std::to_string(hi) + "]");
                field.word_token_spans.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)});
            }
        } catch (const json::exception& e) {
            throw InputError(std::string("bad tree field: ") + e.what());
        }
        rec.fields.push_back(std::move(field));
    }
    return rec;
}

std::string tree_record_to_json(const TreeRecord& record) {
    json j;
    if (!record.id.empty()) j["id"] = record.id;
    j["fields"] = json::array();
    for (const auto& f : record.fields) {
        json spans = json::array();
        for (const auto& s : f.word_token_spans) spans.push_back({s.lo, s.hi});
        j["fields"].push_back({{"name", f.name}, {"tree", f.tree}, {"word_token_spans", spans}});
    }
    return j.dump();
}

std::vector<TreeRecord> read_trees_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open trees file " + path.string());
    std::vector<TreeRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            TreeRecord rec = parse_tree_record(line);
            // Parse every tree now so a corrupt line is reported by number.
            for (const auto& f : rec.fields) (void)parse_bracketed(f.tree);
            out.push_back(std::move(rec));
        } catch (const InputError& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_trees_file(const std::filesystem::path& path, const std::vector<TreeRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write trees file " + path.string());
    for (const auto& r : records) out << tree_record_to_json(r) << '\n';
}

FieldTree build_field_tree(const TreeField& field, std::size_t token_offset) {
    const ChunkTree words = parse_bracketed(field.tree);
    ChunkTree aligned = align_subwords(words, field.word_token_spans);
    return FieldTree{field.name, shift_spans(aligned, token_offset)};
}

}  // namespace gtca::tree
