// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/data/prompt.hpp"

#include <fstream>

#include "json.hpp"

namespace gtca::data {

namespace {

using nlohmann::json;

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            fn(json::parse(line));
        } catch (const json::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

std::string id_of(const json& j) {
    if (!j.contains("id")) return {};
    return j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
}

// Accumulates tokens and segments piece by piece. Pieces on one line are
// joined by a space and lines by a newline, which the tokenizer turns into
// "<nl>"; tokenizing `text` therefore reproduces `ids`.
class PromptBuilder {
public:
    explicit PromptBuilder(const model::Tokenizer& tok) : tok_(tok) {}

    void piece(const std::string& text, tree::SegmentKind kind, const std::string& field = {}) {
        if (text.empty()) return;
        if (!line_open_) {
            if (!prompt_.text.empty()) {
                prompt_.text += '\n';
                push_tokens({tok_.newline_id()}, tree::SegmentKind::separator, {});
            }
            line_open_ = true;
        } else {
            prompt_.text += ' ';
        }
        prompt_.text += text;
        push_tokens(tok_.encode(text).ids, kind, field);
    }
    void end_line() { line_open_ = false; }
    Prompt take() { return std::move(prompt_); }

private:
    void push_tokens(const std::vector<std::int32_t>& ids, tree::SegmentKind kind, const std::string& field) {
        if (ids.empty()) return;
        const std::size_t lo = prompt_.ids.size();
        prompt_.ids.insert(prompt_.ids.end(), ids.begin(), ids.end());
        const std::size_t hi = prompt_.ids.size() - 1;
        auto& segs = prompt_.segments;
        // Adjacent glue of the same kind merges into one segment.
        if (field.empty() && !segs.empty() && segs.back().kind == kind && segs.back().field.empty() &&
            segs.back().span.hi + 1 == lo) {
            segs.back().span.hi = hi;
            return;
        }
        segs.push_back({kind, {lo, hi}, field});
    }

    const model::Tokenizer& tok_;
    Prompt prompt_;
    bool line_open_ = false;
};

void add_block(PromptBuilder& b, const PromptTemplate& t, const McqaItem& item, bool demo) {
    using K = tree::SegmentKind;
    const K glue = demo ? K::demo : K::separator;
    if (item.options.empty() && t.list_options) throw InputError("item '" + item.id + "' has no options");
    for (std::size_t j = 0; j < item.options.size(); ++j) {
        if (item.options[j].empty()) {
            throw InputError("item '" + item.id + "' option " + std::to_string(j) + " has no text");
        }
    }
    if (!t.context_line.empty()) {
        b.piece(t.context_line, glue);
        b.end_line();
    }
    b.piece(t.question_label, glue);
    b.piece(item.question, demo ? K::demo : K::question, demo ? "" : "question");
    b.end_line();
    if (t.list_options) {
        b.piece(t.options_label, glue);
        b.end_line();
        for (std::size_t j = 0; j < item.options.size(); ++j) {
            if (j >= 26) throw InputError("item '" + item.id + "' has more than 26 options");
            b.piece(std::string(1, static_cast<char>('A' + j)) + ".", glue);
            b.piece(item.options[j], demo ? K::demo : K::option, demo ? "" : "option_" + std::to_string(j));
            b.end_line();
        }
    }
    b.piece(t.answer_cue, demo ? K::demo : K::answer_field, demo ? "" : "answer");
    if (demo) {
        if (item.answer >= item.options.size()) throw InputError("demonstration '" + item.id + "' has no gold option");
        b.piece(item.options[item.answer], K::demo);
    }
    b.end_line();
}

}  // namespace

std::vector<McqaItem> read_mcqa_file(const std::filesystem::path& path) {
    std::vector<McqaItem> out;
    for_each_json_line(path, [&](const json& j) {
        McqaItem item{id_of(j), j.at("question").get<std::string>(), j.at("options").get<std::vector<std::string>>(),
                      j.at("answer_index").get<std::size_t>()};
        if (item.answer >= item.options.size()) throw InputError("answer_index out of range");
        out.push_back(std::move(item));
    });
    return out;
}

std::vector<PairItem> read_pairs_file(const std::filesystem::path& path) {
    std::vector<PairItem> out;
    for_each_json_line(path, [&](const json& j) {
        out.push_back({id_of(j), j.at("sentence_good").get<std::string>(), j.at("sentence_bad").get<std::string>()});
    });
    return out;
}

std::vector<BinaryItem> read_binary_file(const std::filesystem::path& path) {
    std::vector<BinaryItem> out;
    for_each_json_line(path, [&](const json& j) {
        const int label = j.at("label").get<int>();
        if (label != 0 && label != 1) throw InputError("label must be 0 or 1");
        out.push_back({id_of(j), j.at("sentence").get<std::string>(), label});
    });
    return out;
}

void write_mcqa_file(const std::filesystem::path& path, const std::vector<McqaItem>& items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& it : items) {
        out << json{{"id", it.id}, {"question", it.question}, {"options", it.options}, {"answer_index", it.answer}}.dump()
            << '\n';
    }
}

void write_pairs_file(const std::filesystem::path& path, const std::vector<PairItem>& items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& it : items) {
        out << json{{"id", it.id}, {"sentence_good", it.good}, {"sentence_bad", it.bad}}.dump() << '\n';
    }
}

PromptTemplate builtin_template(const std::string& name) {
    PromptTemplate t;
    if (name == "mcqa") return t;
    if (name == "context") {
        t.name = name;
        t.context_line = "Context: Read the context and choose the most plausible continuation.";
        t.question_label.clear();
        return t;
    }
    if (name == "binary") {
        t.name = name;
        t.instruction =
            "Instruction: You are a linguist. Decide if the following English sentence is grammatically acceptable. "
            "Output 1 for acceptable, 0 for unacceptable. Output only a single character: 0 or 1.";
        t.question_label = "Sentence:";
        t.list_options = false;
        return t;
    }
    throw InputError("unknown prompt template '" + name + "'");
}

PromptTemplate template_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InputError(std::string("prompt template: ") + e.what());
    }
    PromptTemplate t = builtin_template(j.value("name", std::string("mcqa")));
    t.instruction = j.value("instruction", t.instruction);
    t.context_line = j.value("context_line", t.context_line);
    t.question_label = j.value("question_label", t.question_label);
    t.options_label = j.value("options_label", t.options_label);
    t.list_options = j.value("list_options", t.list_options);
    t.answer_cue = j.value("answer_cue", t.answer_cue);
    t.k = j.value("k", t.k);
    return t;
}

const tree::Segment* Prompt::field(std::string_view name) const {
    for (const auto& s : segments)
        if (s.field == name) return &s;
    return nullptr;
}

Prompt assemble_prompt(const PromptTemplate& tmpl, const model::Tokenizer& tok, std::span<const McqaItem> demos,
                       const McqaItem& item) {
    if (demos.size() < tmpl.k) {
        throw InputError("prompt needs " + std::to_string(tmpl.k) + " demonstrations, have " +
                         std::to_string(demos.size()));
    }
    PromptBuilder b(tok);
    b.piece(tmpl.instruction, tree::SegmentKind::instruction);
    b.end_line();
    for (std::size_t d = 0; d < tmpl.k; ++d) add_block(b, tmpl, demos[d], true);
    add_block(b, tmpl, item, false);
    return b.take();
}

Prompt sentence_prompt(const model::Tokenizer& tok, const std::string& sentence) {
    Prompt p;
    p.ids.push_back(tok.bos_id());
    p.segments.push_back({tree::SegmentKind::separator, {0, 0}, {}});
    const auto enc = tok.encode(sentence);
    if (enc.ids.empty()) throw InputError("empty sentence");
    p.ids.insert(p.ids.end(), enc.ids.begin(), enc.ids.end());
    p.segments.push_back({tree::SegmentKind::sentence, {1, p.ids.size() - 1}, "sentence"});
    p.text = std::string(model::kBosToken) + " " + sentence;
    return p;
}

McqaItem binary_as_mcqa(const BinaryItem& item) {
    return {item.id, item.sentence, {"0", "1"}, static_cast<std::size_t>(item.label)};
}

PromptStructure prompt_structure(const Prompt& prompt, const tree::TreeRecord& record,
                                 const tree::MaskOptions& mask_options) {
    PromptStructure out;
    for (const auto& seg : prompt.segments) {
        if (seg.field.empty()) continue;
        const tree::TreeField* f = record.find(seg.field);
        if (f == nullptr) continue;
        tree::FieldTree ft = tree::build_field_tree(*f, seg.span.lo);
        if (ft.tree.span_width() != seg.span.length()) {
            throw InputError("record '" + record.id + "' field '" + seg.field + "' covers " +
                             std::to_string(ft.tree.span_width()) + " tokens but the prompt field has " +
                             std::to_string(seg.span.length()));
        }
        out.fields.push_back(std::move(ft));
    }
    out.mask = tree::build_update_mask(prompt.ids.size(), prompt.segments, mask_options);
    return out;
}

PromptStructure mask_only_structure(const Prompt& prompt, const tree::MaskOptions& mask_options) {
    return {{}, tree::build_update_mask(prompt.ids.size(), prompt.segments, mask_options)};
}

}  // namespace gtca::data
