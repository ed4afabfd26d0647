#include <doctest.h>

#include <algorithm>
#include <map>

#include "icubert/random.hpp"
#include "icubert/tokenizer.hpp"
#include "support.hpp"

using namespace icubert;

namespace {

Stay make_stay(const std::vector<std::int64_t>& minutes, int statics = 0) {
    Stay s;
    s.stay_id = "s";
    s.patient_id = "p";
    for (std::size_t i = 0; i < minutes.size(); ++i) {
        s.events.push_back(test::reg("p", "s", "v" + std::to_string(i % 7), static_cast<double>(i), minutes[i]));
    }
    for (int i = 0; i < statics; ++i) {
        s.statics.push_back(test::reg("p", "s", "static " + std::to_string(i), std::string("x"), 0, 0, true, "patients"));
    }
    return s;
}

int dynamic_count(const WindowSequence& w) {
    return static_cast<int>(std::count_if(w.tokens.begin(), w.tokens.end(), [](const Token& t) {
        return !t.is_static && !std::holds_alternative<Special>(t.value);
    }));
}

Stay random_stay(Rng& rng, int W) {
    std::vector<std::int64_t> minutes;
    const int n = 1 + static_cast<int>(rng.below(80));
    const auto span = 1 + rng.below(5 * static_cast<std::uint64_t>(W));
    for (int i = 0; i < n; ++i) minutes.push_back(static_cast<std::int64_t>(rng.below(span)));
    Stay s = make_stay(minutes, static_cast<int>(rng.below(4)));
    for (auto& r : s.events) r.duration_minutes = static_cast<std::int64_t>(rng.below(4 * static_cast<std::uint64_t>(W)));
    return s;
}

}  // namespace

TEST_CASE("window boundaries") {
    const auto windows = segment_windows(make_stay({0, 1439, 1441}));
    REQUIRE(windows.size() == 2);
    CHECK(dynamic_count(windows[0]) == 2);
    CHECK(dynamic_count(windows[1]) == 1);
    CHECK(windows[0].tokens[2].tau_minutes == 1439);
    CHECK(windows[1].tokens[1].tau_minutes == 1);
    CHECK(windows[1].window_index == 1);
    CHECK(windows[1].window_start - windows[0].window_start == 1440);
}

TEST_CASE("durations clamp to the window") {
    Stay s = make_stay({0});
    s.events[0].duration_minutes = 3000;
    const auto windows = segment_windows(s);
    CHECK(windows[0].tokens[1].delta_minutes == std::min<std::int64_t>(3000, 1439));
}

TEST_CASE("statics-only stay gives one window") {
    Stay s = make_stay({}, 3);
    const auto windows = segment_windows(s);
    REQUIRE(windows.size() == 1);
    CHECK(windows[0].tokens.size() == 4);
    CHECK(windows[0].tokens[0].is_cls());
    for (std::size_t i = 1; i < 4; ++i) {
        CHECK(windows[0].tokens[i].is_static);
        CHECK(windows[0].tokens[i].tau_minutes == 0);
        CHECK(windows[0].tokens[i].delta_minutes == 0);
    }
}

TEST_CASE("empty stay") {
    Stay s;
    s.stay_id = "empty";
    test::check_errc([&] { segment_windows(s); }, Errc::empty_stay);
    test::check_errc([&] { rolling_windows(s); }, Errc::empty_stay);
}

TEST_CASE("empty windows are configurable") {
    const Stay s = make_stay({0, 3000});
    CHECK(segment_windows(s).size() == 3);
    TokenizerConfig cfg;
    cfg.emit_empty_windows = false;
    const auto kept = segment_windows(s, cfg);
    REQUIRE(kept.size() == 2);
    CHECK(kept[1].window_index == 2);
}

TEST_CASE("values are z-scored with train statistics") {
    Vocabularies v;
    v.set_stats("chartevents: v0", {10.0, 5.0, 3});
    Stay s = make_stay({0});
    s.events[0].value = 20.0;
    const auto w = segment_windows(s, {}, &v);
    CHECK(std::get<double>(w[0].tokens[1].value) == doctest::Approx(2.0));
}

TEST_CASE("truncation keeps statics and the latest dynamics") {
    std::vector<std::int64_t> minutes;
    for (int i = 0; i < 590; ++i) minutes.push_back((i * 7919) % 1440);
    const Stay s = make_stay(minutes, 9);
    const auto windows = segment_windows(s);
    REQUIRE(windows.size() == 1);
    REQUIRE(windows[0].tokens.size() == 600);
    const WindowSequence out = truncate_and_pad(windows[0], 512);
    REQUIRE(out.tokens.size() == 512);
    CHECK(out.tokens[0].is_cls());
    for (int i = 1; i <= 9; ++i) CHECK(out.tokens[i].is_static);

    std::vector<int> taus;
    for (const auto& t : windows[0].tokens) {
        if (!t.is_static && !t.is_cls()) taus.push_back(t.tau_minutes);
    }
    std::stable_sort(taus.begin(), taus.end());
    const std::vector<int> expected(taus.end() - 502, taus.end());
    std::vector<int> kept;
    for (std::size_t i = 10; i < out.tokens.size(); ++i) kept.push_back(out.tokens[i].tau_minutes);
    CHECK(kept.size() == 502);
    CHECK(kept == expected);
}

TEST_CASE("padding fills to the maximum length") {
    std::vector<std::int64_t> minutes(99, 5);
    const auto w = segment_windows(make_stay(minutes))[0];
    REQUIRE(w.tokens.size() == 100);
    const auto out = truncate_and_pad(w, 512);
    CHECK(out.tokens.size() == 512);
    const auto mask = attention_mask(out);
    CHECK(std::count(mask.begin(), mask.end(), 1) == 100);
    CHECK(std::all_of(out.tokens.begin() + 100, out.tokens.end(), [](const Token& t) { return t.is_pad(); }));
}

TEST_CASE("statics overflow") {
    const auto w = segment_windows(make_stay({}, 513))[0];
    test::check_errc([&] { truncate_and_pad(w, 512); }, Errc::statics_overflow);
}

TEST_CASE("rolling windows follow the enumeration oracle") {
    std::vector<std::int64_t> hourly;
    for (int m = 0; m < 2880; m += 60) hourly.push_back(m);
    const Stay s = make_stay(hourly);
    const TokenizerConfig cfg;  // W = 1440, S = 360
    const auto windows = rolling_windows(s, cfg);
    const std::int64_t last = 2820;
    CHECK(windows.size() == static_cast<std::size_t>(last / 360 + 1));
    for (std::size_t k = 0; k < windows.size(); ++k) {
        const std::int64_t lo = static_cast<std::int64_t>(k) * 360;
        int expected = 0;
        for (auto m : hourly) expected += (m >= lo && m < lo + 1440);
        CHECK(dynamic_count(windows[k]) == expected);
        CHECK(windows[k].window_start - windows[0].window_start == lo);
        for (const auto& t : windows[k].tokens) CHECK(t.tau_minutes < 1440);
    }

    std::vector<std::int64_t> half_day;
    for (int m = 0; m < 720; m += 60) half_day.push_back(m);
    CHECK(rolling_windows(make_stay(half_day), cfg).size() == 660 / 360 + 1);
}

TEST_CASE("rolling with step W matches segmentation") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Stay s = random_stay(rng, 1440);
        TokenizerConfig cfg;
        cfg.roll_step_minutes = cfg.window_minutes;
        const auto rolled = rolling_windows(s, cfg);
        const auto segmented = segment_windows(s, cfg);
        REQUIRE(rolled.size() == segmented.size());
        for (std::size_t j = 0; j < rolled.size(); ++j) {
            CHECK(rolled[j].window_start == segmented[j].window_start);
            CHECK(rolled[j].tokens == segmented[j].tokens);
        }
    }
}

TEST_CASE("rolling windows carry the label at their end") {
    const Stay s = make_stay({0, 500, 1000});
    std::vector<Timestamp> ends;
    const auto windows = rolling_windows(s, {}, [&](const Stay&, Timestamp end) {
        ends.push_back(end);
        return std::optional<std::vector<double>>{{static_cast<double>(ends.size())}};
    });
    REQUIRE(windows.size() == 3);
    for (std::size_t k = 0; k < windows.size(); ++k) {
        CHECK(ends[k] - windows[k].window_start == 1440);
        REQUIRE(windows[k].label);
        CHECK((*windows[k].label)[0] == static_cast<double>(k + 1));
    }
}

TEST_CASE("segmentation partitions dynamics and replicates statics") {
    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        const int W = 1 + static_cast<int>(rng.below(1440));
        TokenizerConfig cfg;
        cfg.window_minutes = W;
        const Stay s = random_stay(rng, W);
        const auto windows = segment_windows(s, cfg);

        // Recover each token's absolute minute and match it against the input multiset.
        std::map<std::pair<std::int64_t, double>, int> expected;
        for (const auto& r : s.events) ++expected[{r.timestamp.minutes, std::get<double>(r.value)}];
        std::map<std::pair<std::int64_t, double>, int> got;
        std::vector<Token> statics0;
        for (std::size_t j = 0; j < windows.size(); ++j) {
            const auto& w = windows[j];
            CHECK_NOTHROW(validate_window(w, W, 1 << 20));
            std::vector<Token> statics;
            for (const auto& t : w.tokens) {
                CHECK_NOTHROW(validate_token(t, W));
                if (t.is_static) {
                    statics.push_back(t);
                } else if (!t.is_cls()) {
                    ++got[{w.window_start.minutes + t.tau_minutes, std::get<double>(t.value)}];
                }
            }
            if (j == 0) statics0 = statics;
            CHECK(statics == statics0);
            CHECK(statics.size() == s.statics.size());
        }
        CHECK(got == expected);
    }
}

TEST_CASE("truncate_and_pad is idempotent and exact length") {
    Rng rng(202);
    for (int trial = 0; trial < 200; ++trial) {
        const Stay s = random_stay(rng, 1440);
        const int L = 5 + static_cast<int>(rng.below(60));
        for (const auto& w : segment_windows(s)) {
            const auto once = truncate_and_pad(w, L);
            CHECK(once.tokens.size() == static_cast<std::size_t>(L));
            CHECK_NOTHROW(validate_window(once, 1440, L));
            CHECK(truncate_and_pad(once, L) == once);
        }
    }
}
