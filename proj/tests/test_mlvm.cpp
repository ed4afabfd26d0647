#include <doctest.h>

#include <cmath>

#include "icubert/mlvm.hpp"
#include "support.hpp"

using namespace icubert;

namespace {

Vocabularies small_vocab() {
    Vocabularies v;
    for (int i = 0; i < 6; ++i) v.add_feature("f: " + std::to_string(i));
    for (const char* c : {"low", "mid", "high"}) v.add_value(c);
    return v;
}

Token random_token(Rng& rng) {
    Token t;
    t.feature_text = "f: " + std::to_string(rng.below(6));
    t.tau_minutes = static_cast<int>(rng.below(1440));
    t.delta_minutes = static_cast<int>(rng.below(1440));
    if (rng.bernoulli(0.5)) {
        t.value = rng.normal();
        t.is_continuous = true;
    } else {
        static const char* cats[] = {"low", "mid", "high", "unseen"};
        t.value = std::string(cats[rng.below(4)]);
    }
    t.is_static = rng.bernoulli(0.1);
    return t;
}

WindowSequence random_window(Rng& rng, int n, int pads = 0) {
    WindowSequence w;
    w.tokens.push_back(make_special_token(Special::cls));
    for (int i = 0; i < n; ++i) w.tokens.push_back(random_token(rng));
    for (int i = 0; i < pads; ++i) w.tokens.push_back(make_special_token(Special::pad));
    return w;
}

// |observed - p n| <= 3 sqrt(n p (1 - p))
void check_binomial(long hits, long n, double p) {
    const double sigma = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
    CHECK_MESSAGE(std::abs(static_cast<double>(hits) - p * static_cast<double>(n)) <= 3.0 * sigma,
                  hits << " of " << n << " vs p=" << p);
}

}  // namespace

TEST_CASE("selection and kind frequencies") {
    const Vocabularies v = small_vocab();
    Rng data(1), rng(2);
    const WindowSequence w = random_window(data, 100000);
    const MaskingPlan plan = plan_masking(w, v, rng);
    long selected = 0, both = 0, value_only = 0, feature_only = 0;
    for (const auto& s : plan.slots) {
        if (!s.selected) continue;
        ++selected;
        both += s.mask_feature && s.mask_value;
        value_only += !s.mask_feature && s.mask_value;
        feature_only += s.mask_feature && !s.mask_value;
    }
    CHECK(selected >= 14550);
    CHECK(selected <= 15450);
    check_binomial(selected, 100000, 0.15);
    check_binomial(both, selected, 0.5);
    check_binomial(value_only, selected, 0.25);
    check_binomial(feature_only, selected, 0.25);
}

TEST_CASE("corruption frequencies") {
    const Vocabularies v = small_vocab();
    Rng data(3), rng(4);
    const MaskingPlan plan = plan_masking(random_window(data, 100000), v, rng);
    long slots = 0, mask = 0, random = 0, keep = 0;
    auto count = [&](Corruption c) {
        ++slots;
        mask += c == Corruption::mask_token;
        random += c == Corruption::random_token;
        keep += c == Corruption::keep;
    };
    for (const auto& s : plan.slots) {
        if (s.mask_feature) count(s.feature_corruption);
        if (s.mask_value) count(s.value_corruption);
    }
    check_binomial(mask, slots, 0.8);
    check_binomial(random, slots, 0.1);
    check_binomial(keep, slots, 0.1);
}

TEST_CASE("only special tokens") {
    const Vocabularies v = small_vocab();
    Rng rng(5);
    WindowSequence w;
    w.tokens = {make_special_token(Special::cls), make_special_token(Special::pad), make_special_token(Special::pad)};
    test::check_errc([&] { plan_masking(w, v, rng); }, Errc::no_eligible_tokens);
}

TEST_CASE("rates are validated") {
    MaskingRates r;
    r.both = 0.6;
    test::check_errc([&] { r.validate(); }, Errc::invalid_spec);
    r = {};
    r.keep = 0.2;
    test::check_errc([&] { r.validate(); }, Errc::invalid_spec);
    r = {};
    r.select = 1.5;
    test::check_errc([&] { r.validate(); }, Errc::invalid_spec);
}

TEST_CASE("all-keep plan is the identity") {
    const Vocabularies v = small_vocab();
    Rng data(6), rng(7);
    const WindowSequence w = random_window(data, 200, 5);
    MaskingRates rates;
    rates.select = 1.0;
    rates.mask_token = 0.0;
    rates.random_token = 0.0;
    rates.keep = 1.0;
    const MaskingPlan plan = plan_masking(w, v, rng, rates);
    CHECK(apply_masking(w, plan, v, rng) == w);
}

TEST_CASE("feature mask token leaves the value alone") {
    const Vocabularies v = small_vocab();
    WindowSequence w;
    w.tokens = {make_special_token(Special::cls), Token{"f: 1", 0.7, 12, 3, true, false}};
    MaskingPlan plan;
    plan.slots.resize(2);
    plan.slots[1].selected = true;
    plan.slots[1].mask_feature = true;
    plan.slots[1].feature_corruption = Corruption::mask_token;
    plan.slots[1].feature_target = v.feature_index("f: 1");
    Rng rng(8);
    const auto out = apply_masking(w, plan, v, rng);
    CHECK(out.tokens[1].feature_text == "[MASK]");
    CHECK(std::get<double>(out.tokens[1].value) == 0.7);
    CHECK(out.tokens[1].is_continuous);
    CHECK(out.tokens[1].tau_minutes == 12);
    CHECK(out.tokens[1].delta_minutes == 3);
}

TEST_CASE("random continuous replacement is reproducible") {
    const Vocabularies v = small_vocab();
    WindowSequence w;
    w.tokens = {make_special_token(Special::cls), Token{"f: 1", 0.7, 0, 0, true, false}};
    MaskingPlan plan;
    plan.slots.resize(2);
    plan.slots[1].selected = true;
    plan.slots[1].mask_value = true;
    plan.slots[1].value_corruption = Corruption::random_token;
    plan.slots[1].value_is_continuous = true;
    plan.slots[1].value_target = 0.7;
    Rng a(9), b(9);
    const auto x = apply_masking(w, plan, v, a);
    const auto y = apply_masking(w, plan, v, b);
    CHECK(x == y);
    CHECK(std::get<double>(x.tokens[1].value) == Rng(9).normal());
}

TEST_CASE("plans are deterministic given the seed") {
    const Vocabularies v = small_vocab();
    Rng data(10);
    const WindowSequence w = random_window(data, 500);
    Rng a(11), b(11);
    const auto pa = plan_masking(w, v, a);
    const auto pb = plan_masking(w, v, b);
    REQUIRE(pa.slots.size() == pb.slots.size());
    for (std::size_t i = 0; i < pa.slots.size(); ++i) {
        CHECK(pa.slots[i].selected == pb.slots[i].selected);
        CHECK(pa.slots[i].mask_feature == pb.slots[i].mask_feature);
        CHECK(pa.slots[i].value_corruption == pb.slots[i].value_corruption);
    }
    CHECK(apply_masking(w, pa, v, a) == apply_masking(w, pb, v, b));
}

TEST_CASE("masking invariants on random windows") {
    const Vocabularies v = small_vocab();
    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        const WindowSequence w = random_window(rng, 1 + static_cast<int>(rng.below(40)), static_cast<int>(rng.below(5)));
        MaskingRates rates;
        rates.select = rng.uniform();
        const MaskingPlan plan = plan_masking(w, v, rng, rates);
        const WindowSequence out = apply_masking(w, plan, v, rng);
        REQUIRE(out.tokens.size() == w.tokens.size());
        for (std::size_t i = 0; i < w.tokens.size(); ++i) {
            const Token& orig = w.tokens[i];
            const Token& got = out.tokens[i];
            const SlotPlan& s = plan.slots[i];
            CHECK(s.selected == (s.mask_feature || s.mask_value));
            if (orig.is_cls() || orig.is_pad()) CHECK_FALSE(s.selected);
            CHECK(got.tau_minutes == orig.tau_minutes);
            CHECK(got.delta_minutes == orig.delta_minutes);
            if (!s.selected) {
                CHECK(got == orig);
                continue;
            }
            if (s.mask_feature) {
                CHECK(s.feature_target == v.feature_index(orig.feature_text));
                if (s.feature_corruption == Corruption::keep) CHECK(got.feature_text == orig.feature_text);
                if (s.feature_corruption == Corruption::mask_token) CHECK(got.feature_text == "[MASK]");
                if (s.feature_corruption == Corruption::random_token) {
                    const auto idx = v.feature_index(got.feature_text);
                    REQUIRE(idx);
                    CHECK(*idx >= Vocabularies::kReservedFeatures);
                }
            } else {
                CHECK(got.feature_text == orig.feature_text);
            }
            if (s.mask_value) {
                CHECK(s.value_is_continuous == orig.is_continuous);
                if (orig.is_continuous) {
                    CHECK(s.value_target == std::get<double>(orig.value));
                } else {
                    CHECK(s.value_target_index == v.value_index(std::get<std::string>(orig.value)));
                }
                if (s.value_corruption == Corruption::keep) CHECK(got.value == orig.value);
                if (s.value_corruption == Corruption::mask_token) {
                    CHECK(std::get<Special>(got.value) == Special::mask);
                    CHECK_FALSE(got.is_continuous);
                }
                if (s.value_corruption == Corruption::random_token) {
                    CHECK(got.is_continuous == orig.is_continuous);
                    if (!orig.is_continuous) CHECK(v.value_index(std::get<std::string>(got.value)) >= Vocabularies::kReservedValues);
                }
            } else {
                CHECK(got.value == orig.value);
            }
        }
    }
}
