// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Datasets, prompt templates and prompt assembly with field segmentation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gtca/model/tokenizer.hpp"
#include "gtca/treebank/structure_cache.hpp"
#include "gtca/treebank/trees_file.hpp"
#include "gtca/treebank/update_mask.hpp"

namespace gtca::data {

struct McqaItem {
    std::string id;
    std::string question;
    std::vector<std::string> options;
    std::size_t answer = 0;
};

struct PairItem {
    std::string id;
    std::string good;
    std::string bad;
};

struct BinaryItem {
    std::string id;
    std::string sentence;
    int label = 0;
};

// JSON-lines readers. MCQA: {id, question, options[], answer_index};
// pairs: {id, sentence_good, sentence_bad}; binary: {id, sentence, label}.
std::vector<McqaItem> read_mcqa_file(const std::filesystem::path& path);
std::vector<PairItem> read_pairs_file(const std::filesystem::path& path);
std::vector<BinaryItem> read_binary_file(const std::filesystem::path& path);
void write_mcqa_file(const std::filesystem::path& path, const std::vector<McqaItem>& items);
void write_pairs_file(const std::filesystem::path& path, const std::vector<PairItem>& items);

/// Line layout of one prompt. An instruction line is followed by k
/// demonstration blocks and the test block; every block is
///   [context_line]
///   <question_label> <question>
///   <options_label>
///   A. <option 0>
///   ...
///   <answer_cue> [gold option text, demonstrations only]
struct PromptTemplate {
    std::string name = "mcqa";
    std::string instruction =
        "Instruction: Choose the correct option based on the question. Output the full text of the chosen option "
        "exactly as it appears under Options.";
    std::string context_line;
    std::string question_label = "Question:";
    std::string options_label = "Options:";
    bool list_options = true;
    std::string answer_cue = "Answer:";
    std::size_t k = 0;
};

/// "mcqa" (single question, lettered options), "context" (context line then
/// the passage on its own line) and "binary" (acceptability judged as a
/// two-way choice between "0" and "1").
PromptTemplate builtin_template(const std::string& name);
/// Builtin named by "name" with any other keys overriding its fields.
PromptTemplate template_from_json(const std::string& json_text);

struct Prompt {
    std::vector<std::int32_t> ids;
    std::vector<tree::Segment> segments;  // ordered, disjoint, tiling ids
    std::string text;                     // rendering that tokenizes to ids

    const tree::Segment* field(std::string_view name) const;
};

/// Demonstrations contribute `demo` segments only; the test item's question,
/// options and answer cue are the named fields "question", "option_<j>" and
/// "answer".
Prompt assemble_prompt(const PromptTemplate& tmpl, const model::Tokenizer& tok, std::span<const McqaItem> demos,
                       const McqaItem& item);

/// Minimal-pair / acceptability input: <bos> followed by one "sentence" field.
Prompt sentence_prompt(const model::Tokenizer& tok, const std::string& sentence);

/// Acceptability item as a two-option choice (options "0" and "1").
McqaItem binary_as_mcqa(const BinaryItem& item);

/// Field trees placed at their prompt offsets, plus the update mask.
struct PromptStructure {
    std::vector<tree::FieldTree> fields;
    std::vector<std::uint8_t> mask;
};

/// Builds the structure of `prompt` from a trees-file record. Every prompt
/// field present in the record is parsed; a record field whose aligned width
/// differs from the tokenized field is an InputError.
PromptStructure prompt_structure(const Prompt& prompt, const tree::TreeRecord& record,
                                 const tree::MaskOptions& mask_options = {});

/// Structure with no trees (mask only).
PromptStructure mask_only_structure(const Prompt& prompt, const tree::MaskOptions& mask_options = {});

}  // namespace gtca::data
