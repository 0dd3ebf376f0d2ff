// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gtca/treebank/chunk_tree.hpp"

namespace gtca::tree {

enum class SegmentKind : std::uint8_t {
    instruction,
    question,
    option,
    answer_field,
    sentence,      // whole-input field (minimal pairs, acceptability)
    separator,     // template glue between fields
    demo,          // k-shot demonstration block
    continuation,  // scored / trained continuation after the prompt
};

const char* segment_kind_name(SegmentKind kind);

/// A labeled token range of an assembled input. `field` names the trees-file
/// field this segment was tokenized from (empty for template glue).
struct Segment {
    SegmentKind kind = SegmentKind::separator;
    TokenSpan span;
    std::string field;
};

/// True for the kinds the structural update may write to.
bool is_update_kind(SegmentKind kind);

struct MaskOptions {
    /// Ablation "no mask": every position is enabled.
    bool mask_enabled = true;
    /// Reject token positions that no segment covers.
    bool strict = false;
};

/// Binary token update mask of length n. 1 on question, answer-field and
/// sentence tokens, 0 elsewhere (options, template glue, demonstrations,
/// continuations, uncovered positions). Segments must be ordered and disjoint.
std::vector<std::uint8_t> build_update_mask(std::size_t n, std::span<const Segment> segments,
                                            const MaskOptions& options = {});

}  // namespace gtca::tree
