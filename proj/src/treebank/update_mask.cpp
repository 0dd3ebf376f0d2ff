// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/treebank/update_mask.hpp"

namespace gtca::tree {

const char* segment_kind_name(SegmentKind kind) {
    switch (kind) {
        case SegmentKind::instruction: return "instruction";
        case SegmentKind::question: return "question";
        case SegmentKind::option: return "option";
        case SegmentKind::answer_field: return "answer_field";
        case SegmentKind::sentence: return "sentence";
        case SegmentKind::separator: return "separator";
        case SegmentKind::demo: return "demo";
        case SegmentKind::continuation: return "continuation";
    }
    return "unknown";
}

bool is_update_kind(SegmentKind kind) {
    return kind == SegmentKind::question || kind == SegmentKind::answer_field || kind == SegmentKind::sentence;
}

std::vector<std::uint8_t> build_update_mask(std::size_t n, std::span<const Segment> segments,
                                            const MaskOptions& options) {
    std::vector<std::uint8_t> mask(n, 0);
    std::vector<bool> covered(n, false);
    std::size_t next_free = 0;
    for (std::size_t k = 0; k < segments.size(); ++k) {
        const Segment& seg = segments[k];
        if (seg.span.lo > seg.span.hi || seg.span.hi >= n) {
            throw InputError("segment " + std::to_string(k) + " (" + segment_kind_name(seg.kind) + ") span [" +
                             std::to_string(seg.span.lo) + "," + std::to_string(seg.span.hi) + "] outside " +
                             std::to_string(n) + " tokens");
        }
        if (seg.span.lo < next_free) {
            throw InputError("segment " + std::to_string(k) + " overlaps or precedes the previous segment");
        }
        next_free = seg.span.hi + 1;
        for (std::size_t i = seg.span.lo; i <= seg.span.hi; ++i) {
            covered[i] = true;
            mask[i] = is_update_kind(seg.kind) ? 1 : 0;
        }
    }
    if (options.strict) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!covered[i]) throw InputError("token " + std::to_string(i) + " is not covered by any segment");
        }
    }
    if (!options.mask_enabled) std::fill(mask.begin(), mask.end(), std::uint8_t{1});
    return mask;
}

}  // namespace gtca::tree
