// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/eval/controls.hpp"

#include "gtca/treebank/corruption.hpp"
#include "gtca/util/errors.hpp"
#include "gtca/util/rng.hpp"

namespace gtca::eval {

const char* control_name(Control c) {
    switch (c) {
        case Control::none: return "none";
        case Control::no_gate: return "no_gate";
        case Control::no_mask: return "no_mask";
        case Control::weak_tree: return "weak_tree";
        case Control::random_tree: return "random_tree";
        case Control::permuted_tree: return "permuted_tree";
    }
    return "?";
}

Control parse_control(const std::string& name) {
    for (Control c : {Control::none, Control::no_gate, Control::no_mask, Control::weak_tree, Control::random_tree,
                      Control::permuted_tree}) {
        if (name == control_name(c)) return c;
    }
    throw InputError("unknown ablation toggle '" + name + "'");
}

branch::StructuralUpdateConfig apply_toggle(branch::StructuralUpdateConfig update, Control c) {
    if (c == Control::no_gate) update.gate_enabled = false;
    if (c == Control::no_mask) update.mask_enabled = false;
    return update;
}

data::PromptStructure corrupt_structure(const data::PromptStructure& structure, Control c, std::uint64_t seed) {
    if (c != Control::random_tree && c != Control::permuted_tree) return structure;
    data::PromptStructure out = structure;
    for (std::size_t f = 0; f < out.fields.size(); ++f) {
        const std::uint64_t s = derive_seed(seed, "control.field." + std::to_string(f));
        auto& t = out.fields[f].tree;
        t = c == Control::random_tree ? tree::randomize_tree(t, s)
                                      : tree::permute_tree(t, s, tree::PermuteScope::any_height);
    }
    return out;
}

}  // namespace gtca::eval
