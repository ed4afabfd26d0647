#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "icubert/random.hpp"
#include "icubert/types.hpp"

namespace icubert {

struct MaskingRates {
    double select = 0.15;
    // Among selected tokens; must sum to 1.
    double both = 0.5;
    double value_only = 0.25;
    double feature_only = 0.25;
    // Per masked slot; must sum to 1.
    double mask_token = 0.8;
    double random_token = 0.1;
    double keep = 0.1;

    void validate() const;
};

enum class Corruption : std::uint8_t { mask_token, random_token, keep };

struct SlotPlan {
    bool selected = false;
    bool mask_feature = false;
    bool mask_value = false;
    Corruption feature_corruption = Corruption::keep;
    Corruption value_corruption = Corruption::keep;
    // Feature target; nullopt when the original feature is outside the vocabulary.
    std::optional<int> feature_target;
    bool value_is_continuous = false;
    int value_target_index = 0;       // categorical target (may be [UNK])
    double value_target = 0.0;        // continuous target
};

struct MaskingPlan {
    std::vector<SlotPlan> slots;  // one per token

    int feature_slots() const;
    int categorical_slots() const;
    int continuous_slots() const;
};

// Independent Bernoulli selection of non-special tokens, then the masking kind
// and per-slot corruption. Targets are taken from the uncorrupted tokens.
MaskingPlan plan_masking(const WindowSequence& seq, const Vocabularies& vocab, Rng& rng,
                         const MaskingRates& rates = {});

// Applies the plan. Random features/categories are drawn uniformly from the
// non-reserved vocabulary entries; random continuous values are standard normal.
WindowSequence apply_masking(WindowSequence seq, const MaskingPlan& plan, const Vocabularies& vocab, Rng& rng);

}  // namespace icubert
