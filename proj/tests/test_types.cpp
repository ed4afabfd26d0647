#include <doctest.h>

#include <cmath>
#include <cctype>
#include <map>

#include "icubert/random.hpp"
#include "icubert/types.hpp"
#include "support.hpp"

using namespace icubert;

TEST_CASE("validate_registry accepts a well-formed measurement") {
    const Registry r = test::reg("p", "s", "Heart Rate", 80.0, 0);
    CHECK(&validate_registry(r) == &r);
}

TEST_CASE("validate_registry rejects broken records") {
    Registry r = test::reg("p", "s", "Heart Rate", 80.0, 0);
    r.source = "";
    test::check_errc([&] { validate_registry(r); }, Errc::invalid_registry);
    try {
        validate_registry(r);
    } catch (const Error& e) {
        CHECK(e.reason() == "empty source");
    }

    r = test::reg("p", "s", "", 80.0, 0);
    test::check_errc([&] { validate_registry(r); }, Errc::invalid_registry);

    r = test::reg("p", "s", "Heart Rate", 80.0, 0, -5);
    try {
        validate_registry(r);
        FAIL("accepted negative duration");
    } catch (const Error& e) {
        CHECK(e.reason() == "negative duration");
    }

    r = test::reg("p", "s", "Heart Rate", std::nan(""), 0);
    test::check_errc([&] { validate_registry(r); }, Errc::invalid_registry);
    r = test::reg("p", "s", "Culture", std::string{}, 0);
    test::check_errc([&] { validate_registry(r); }, Errc::invalid_registry);
}

TEST_CASE("feature_text canonical join") {
    CHECK(feature_text("chartevents", "Heart Rate") == "chartevents: heart rate");
    CHECK(feature_text("labevents", "Creatinine") == "labevents: creatinine");
    CHECK(feature_text("LabEvents ", " Creatinine  (serum)") == "labevents: creatinine (serum)");
    test::check_errc([] { feature_text("", "x"); }, Errc::invalid_registry);
    test::check_errc([] { feature_text("x", ""); }, Errc::invalid_registry);
}

namespace {

std::string normalize_oracle(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!out.empty() && out.back() != ' ') out += ' ';
        } else {
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

}  // namespace

TEST_CASE("feature_text is deterministic and injective on normalized pairs") {
    const std::string alphabet = "abAB :";
    Rng rng(11);
    auto word = [&] {
        std::string w;
        const auto n = 1 + rng.below(5);
        for (std::uint64_t i = 0; i < n; ++i) w += alphabet[rng.below(alphabet.size())];
        return w;
    };
    std::map<std::string, std::pair<std::string, std::string>> seen;
    int checked = 0;
    for (int i = 0; i < 3000; ++i) {
        const std::string s = word(), v = word();
        const std::string ns = normalize_oracle(s), nv = normalize_oracle(v);
        // ':' inside a source makes the join ambiguous by construction; skip those.
        if (ns.empty() || nv.empty() || ns.find(':') != std::string::npos) continue;
        const std::string t = feature_text(s, v);
        CHECK(t == feature_text(s, v));
        CHECK(t == ns + ": " + nv);
        const auto [it, fresh] = seen.emplace(t, std::pair{ns, nv});
        if (!fresh) CHECK(it->second == std::pair{ns, nv});
        ++checked;
    }
    CHECK(checked > 1000);
}

TEST_CASE("timestamps are minute precision") {
    const auto a = parse_timestamp("2150-01-01T00:00");
    const auto b = parse_timestamp("2150-01-01T00:01:59");
    REQUIRE(a);
    REQUIRE(b);
    CHECK(*b - *a == 1);
    CHECK(format_timestamp(*b) == "2150-01-01T00:01");
    CHECK(*parse_timestamp("2150-01-02T00:00") - *a == 1440);
    CHECK_FALSE(parse_timestamp("2150-13-01T00:00"));
    CHECK_FALSE(parse_timestamp("yesterday"));
}

TEST_CASE("round-trip of random timestamps") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const Timestamp t{static_cast<std::int64_t>(rng.below(200ull * 365 * 1440))};
        const auto back = parse_timestamp(format_timestamp(t));
        REQUIRE(back);
        CHECK(*back == t);
    }
}

TEST_CASE("token validator") {
    Token t{"chartevents: heart rate", 1.0, 10, 0, true, false};
    CHECK_NOTHROW(validate_token(t));
    t.is_continuous = false;
    test::check_errc([&] { validate_token(t); }, Errc::invalid_token);
    t = Token{"x", std::string("pos"), 1440, 0, false, false};
    test::check_errc([&] { validate_token(t); }, Errc::invalid_token);
    t.tau_minutes = 1439;
    CHECK_NOTHROW(validate_token(t));
    t.delta_minutes = -1;
    test::check_errc([&] { validate_token(t); }, Errc::invalid_token);

    Token cls = make_special_token(Special::cls);
    CHECK(cls.is_cls());
    CHECK_NOTHROW(validate_token(cls));
    cls.tau_minutes = 3;
    test::check_errc([&] { validate_token(cls); }, Errc::invalid_token);
}

TEST_CASE("window validator") {
    WindowSequence w;
    w.tokens = {make_special_token(Special::cls), Token{"a: b", 1.0, 0, 0, true, false},
                make_special_token(Special::pad)};
    CHECK_NOTHROW(validate_window(w));
    CHECK(attention_mask(w) == std::vector<std::uint8_t>{1, 1, 0});
    w.tokens.push_back(Token{"a: b", 1.0, 0, 0, true, false});
    test::check_errc([&] { validate_window(w); }, Errc::invalid_token);
    w.tokens.pop_back();
    w.tokens.push_back(make_special_token(Special::cls));
    test::check_errc([&] { validate_window(w); }, Errc::invalid_token);
    w.tokens.erase(w.tokens.begin());
    test::check_errc([&] { validate_window(w); }, Errc::invalid_token);
    WindowSequence longer;
    longer.tokens.assign(5, make_special_token(Special::pad));
    longer.tokens[0] = make_special_token(Special::cls);
    test::check_errc([&] { validate_window(longer, 1440, 4); }, Errc::invalid_token);
}

TEST_CASE("vocabularies reserve the low indices") {
    Vocabularies v;
    CHECK(v.feature_count() == 3);
    CHECK(v.value_count() == 2);
    CHECK(v.feature_at(Vocabularies::kFeatureCls) == "[CLS]");
    CHECK(v.feature_at(Vocabularies::kFeaturePad) == "[PAD]");
    CHECK(v.feature_at(Vocabularies::kFeatureMask) == "[MASK]");
    CHECK(v.value_at(Vocabularies::kValueMask) == "[MASK]");
    CHECK(v.value_at(Vocabularies::kValueUnk) == "[UNK]");
    CHECK(v.add_feature("a") == 3);
    CHECK(v.add_feature("a") == 3);
    CHECK(v.add_value("x") == 2);
    CHECK(v.value_index("never seen") == Vocabularies::kValueUnk);
    CHECK_FALSE(v.feature_index("never seen"));

    v.set_stats("a", {10.0, 2.0, 4});
    CHECK(v.normalize("a", 14.0) == doctest::Approx(2.0));
    v.set_stats("const", {5.0, 0.0, 3});
    CHECK(v.normalize("const", 7.0) == 2.0);
    CHECK(v.normalize("unknown", 7.0) == 7.0);

    const Vocabularies back = Vocabularies::from_json(v.to_json());
    CHECK(back == v);
    REQUIRE(back.stats("a"));
    CHECK(back.stats("a")->stddev == 2.0);
    test::check_errc([] { Vocabularies::from_json("{not json"); }, Errc::format_error);
}
