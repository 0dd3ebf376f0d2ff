// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Ablation toggles and tree-corruption controls applied at evaluation time.

#pragma once

#include <cstdint>
#include <string>

#include "gtca/branch/gtca.hpp"
#include "gtca/data/prompt.hpp"

namespace gtca::eval {

enum class Control : std::uint8_t {
    none,
    no_gate,        // gate fixed at 1
    no_mask,        // update mask forced to ones
    weak_tree,      // trees taken from a second (weaker) trees file
    random_tree,    // random binary trees over the same words
    permuted_tree,  // chunk spans shuffled across heights
};

const char* control_name(Control c);
Control parse_control(const std::string& name);

/// Update config with the toggle applied (no_gate / no_mask; others unchanged).
branch::StructuralUpdateConfig apply_toggle(branch::StructuralUpdateConfig update, Control c);

/// Rewrites the field trees for random_tree / permuted_tree; other controls
/// return the structure unchanged. Each field draws from its own seed derived
/// from `seed` and the field's position.
data::PromptStructure corrupt_structure(const data::PromptStructure& structure, Control c, std::uint64_t seed);

}  // namespace gtca::eval
