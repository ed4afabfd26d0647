#include "icubert/mlvm.hpp"

#include <array>
#include <cmath>

#include "icubert/errors.hpp"

namespace icubert {

void MaskingRates::validate() const {
    auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!unit(select) || !unit(both) || !unit(value_only) || !unit(feature_only) || !unit(mask_token) ||
        !unit(random_token) || !unit(keep)) {
        throw Error(Errc::invalid_spec, "masking rates must lie in [0, 1]");
    }
    if (std::abs(both + value_only + feature_only - 1.0) > 1e-9) {
        throw Error(Errc::invalid_spec, "masking kind rates must sum to 1");
    }
    if (std::abs(mask_token + random_token + keep - 1.0) > 1e-9) {
        throw Error(Errc::invalid_spec, "corruption rates must sum to 1");
    }
}

int MaskingPlan::feature_slots() const {
    int n = 0;
    for (const auto& s : slots) n += s.mask_feature && s.feature_target ? 1 : 0;
    return n;
}

int MaskingPlan::categorical_slots() const {
    int n = 0;
    for (const auto& s : slots) n += s.mask_value && !s.value_is_continuous ? 1 : 0;
    return n;
}

int MaskingPlan::continuous_slots() const {
    int n = 0;
    for (const auto& s : slots) n += s.mask_value && s.value_is_continuous ? 1 : 0;
    return n;
}

namespace {

Corruption draw_corruption(Rng& rng, const MaskingRates& rates) {
    const std::array<double, 3> w{rates.mask_token, rates.random_token, rates.keep};
    return static_cast<Corruption>(rng.categorical(w));
}

// Quadruplets only; CLS, PAD and already-masked values are skipped.
bool eligible(const Token& t) { return !std::holds_alternative<Special>(t.value) && !parse_special(t.feature_text); }

}  // namespace

MaskingPlan plan_masking(const WindowSequence& seq, const Vocabularies& vocab, Rng& rng, const MaskingRates& rates) {
    rates.validate();
    MaskingPlan plan;
    plan.slots.resize(seq.tokens.size());
    bool any = false;
    const std::array<double, 3> kinds{rates.both, rates.value_only, rates.feature_only};
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        const Token& t = seq.tokens[i];
        if (!eligible(t)) continue;
        any = true;
        if (!rng.bernoulli(rates.select)) continue;

        SlotPlan& s = plan.slots[i];
        s.selected = true;
        switch (rng.categorical(kinds)) {
            case 0: s.mask_feature = s.mask_value = true; break;
            case 1: s.mask_value = true; break;
            default: s.mask_feature = true; break;
        }
        if (s.mask_feature) {
            s.feature_corruption = draw_corruption(rng, rates);
            s.feature_target = vocab.feature_index(t.feature_text);
        }
        if (s.mask_value) {
            s.value_corruption = draw_corruption(rng, rates);
            s.value_is_continuous = t.is_continuous;
            if (t.is_continuous) {
                s.value_target = std::get<double>(t.value);
            } else {
                s.value_target_index = vocab.value_index(std::get<std::string>(t.value));
            }
        }
    }
    if (!any) throw Error(Errc::no_eligible_tokens, "window " + seq.stay_id + " has no maskable tokens");
    return plan;
}

WindowSequence apply_masking(WindowSequence seq, const MaskingPlan& plan, const Vocabularies& vocab, Rng& rng) {
    if (plan.slots.size() != seq.tokens.size()) throw Error(Errc::shape_mismatch, "plan does not match sequence");
    const int random_features = vocab.feature_count() - Vocabularies::kReservedFeatures;
    const int random_values = vocab.value_count() - Vocabularies::kReservedValues;

    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        const SlotPlan& s = plan.slots[i];
        if (!s.selected) continue;
        Token& t = seq.tokens[i];
        if (s.mask_feature) {
            if (s.feature_corruption == Corruption::mask_token) {
                t.feature_text = std::string(special_text(Special::mask));
            } else if (s.feature_corruption == Corruption::random_token && random_features > 0) {
                const auto k = static_cast<int>(rng.below(static_cast<std::uint64_t>(random_features)));
                t.feature_text = vocab.feature_at(Vocabularies::kReservedFeatures + k);
            }
        }
        if (s.mask_value) {
            if (s.value_corruption == Corruption::mask_token) {
                t.value = Special::mask;
                t.is_continuous = false;
            } else if (s.value_corruption == Corruption::random_token) {
                if (s.value_is_continuous) {
                    t.value = rng.normal();
                } else if (random_values > 0) {
                    const auto k = static_cast<int>(rng.below(static_cast<std::uint64_t>(random_values)));
                    t.value = vocab.value_at(Vocabularies::kReservedValues + k);
                }
            }
        }
    }
    return seq;
}

}  // namespace icubert
