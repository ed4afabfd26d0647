#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "icubert/metrics.hpp"
#include "icubert/random.hpp"
#include "icubert/synth.hpp"
#include "icubert/tokenizer.hpp"
#include "support.hpp"

using namespace icubert;

namespace {

Corpus reparse(const SyntheticCorpus& s) {
    std::istringstream in(format_events(s.registries));
    return parse_events(in);
}

long catalog_events(const SyntheticCorpus& s, const GeneratorSpec& spec) {
    const std::string signal = feature_text(spec.signal_source, spec.signal_variable);
    long n = 0;
    for (const auto& r : s.registries) n += !r.is_static && feature_text(r.source, r.variable) != signal;
    return n;
}

}  // namespace

TEST_CASE("event volume follows the Poisson mean") {
    GeneratorSpec spec;  // 100 patients, 50 features, 0.02 per minute, 24 h stays
    const auto s = generate_corpus(spec, 1);
    const double mean = 100.0 * 50.0 * 0.02 * 1440.0;
    CHECK(mean == 144000.0);
    CHECK(std::abs(static_cast<double>(catalog_events(s, spec)) - mean) <= 3.0 * std::sqrt(mean));
}

TEST_CASE("zero rate leaves only statics") {
    GeneratorSpec spec;
    spec.patients = 20;
    spec.rate = 0.0;
    const auto s = generate_corpus(spec, 2);
    CHECK_FALSE(s.registries.empty());
    for (const auto& r : s.registries) CHECK(r.is_static);
    for (const auto& o : s.outcomes) CHECK(o.label == 0);
}

TEST_CASE("generation is byte-for-byte deterministic") {
    GeneratorSpec spec;
    spec.patients = 30;
    spec.max_stays_per_patient = 3;
    spec.stay_minutes_max = 4000;
    const auto a = generate_corpus(spec, 3), b = generate_corpus(spec, 3), c = generate_corpus(spec, 4);
    CHECK(format_events(a.registries) == format_events(b.registries));
    CHECK(format_outcomes(a.outcomes) == format_outcomes(b.outcomes));
    CHECK(format_events(a.registries) != format_events(c.registries));
}

TEST_CASE("spec validation") {
    GeneratorSpec spec;
    spec.features = 1;
    test::check_errc([&] { spec.validate(); }, Errc::invalid_spec);
    spec = {};
    spec.patients = 0;
    test::check_errc([&] { generate_corpus(spec, 1); }, Errc::invalid_spec);
    spec = {};
    spec.stay_minutes_min = 100;
    spec.stay_minutes_max = 50;
    test::check_errc([&] { spec.validate(); }, Errc::invalid_spec);
    spec = {};
    spec.signal_incidence = 1.5;
    test::check_errc([&] { spec.validate(); }, Errc::invalid_spec);
    spec = {};
    spec.signal_value = "";
    test::check_errc([&] { oracle_label(Stay{}, spec); }, Errc::invalid_spec);
}

TEST_CASE("catalog composition") {
    GeneratorSpec spec;
    spec.features = 80;
    spec.categorical_fraction = 0.25;
    const auto catalog = feature_catalog(spec, 5);
    REQUIRE(catalog.size() == 80);
    std::set<std::string> names;
    double weights = 0.0;
    int categorical = 0;
    for (const auto& f : catalog) {
        names.insert(f.text());
        weights += f.rate_weight;
        categorical += f.categorical;
        CHECK(f.duration_minutes < spec.window_minutes);
        if (f.categorical) CHECK(f.categories.size() >= 3);
    }
    CHECK(names.size() == 80);
    CHECK(categorical == 20);
    CHECK(weights / 80.0 == doctest::Approx(1.0));
}

TEST_CASE("oracle rule") {
    GeneratorSpec spec;
    Stay s;
    s.stay_id = "s";
    s.events = {test::reg("p", "s", "heart rate", 80.0, 0),
                test::reg("p", "s", "blood culture", std::string("negative"), 100, 0, false, "microbiologyevents")};
    CHECK(oracle_label(s, spec) == 0);
    s.events.push_back(test::reg("p", "s", "Blood Culture", std::string("positive"), 1439, 0, false, "microbiologyevents"));
    CHECK(oracle_label(s, spec) == 1);
    s.events.back().timestamp = s.events.back().timestamp + 1;
    CHECK(oracle_label(s, spec) == 0);
}

TEST_CASE("oracle agrees with outcomes and incidence") {
    GeneratorSpec spec;
    spec.patients = 2000;
    spec.features = 4;
    spec.rate = 0.001;
    spec.stay_minutes_max = 2880;
    const auto s = generate_corpus(spec, 6);
    const Corpus c = reparse(s);
    std::map<std::string, int> labels;
    for (const auto& o : s.outcomes) labels[o.stay_id] = o.label;
    REQUIRE(c.stays.size() == s.outcomes.size());
    long positives = 0;
    for (const auto& stay : c.stays) {
        CHECK(oracle_label(stay, spec) == labels.at(stay.stay_id));
        positives += labels.at(stay.stay_id);
    }
    const double n = static_cast<double>(c.stays.size());
    CHECK(std::abs(static_cast<double>(positives) - 0.1 * n) <= 3.0 * std::sqrt(n * 0.1 * 0.9));
}

TEST_CASE("targets shift with the label") {
    GeneratorSpec spec;
    spec.patients = 1000;
    spec.features = 3;
    spec.rate = 0.0005;
    const auto s = generate_corpus(spec, 7);
    double pos = 0, neg = 0;
    int np = 0, nn = 0;
    for (const auto& o : s.outcomes) (o.label ? (pos += o.target, ++np) : (neg += o.target, ++nn));
    REQUIRE(np > 0);
    CHECK(pos / np - neg / nn == doctest::Approx(spec.target_shift).epsilon(0.15));
}

TEST_CASE("planted rule is learnable by a one-variable score") {
    GeneratorSpec spec;
    spec.patients = 500;
    spec.features = 5;
    spec.rate = 0.002;
    const auto s = generate_corpus(spec, 8);
    const Corpus c = reparse(s);
    std::map<std::string, int> labels;
    for (const auto& o : s.outcomes) labels[o.stay_id] = o.label;
    // Feature: any positive signal-feature value inside the first window.
    const std::string signal = feature_text(spec.signal_source, spec.signal_variable);
    std::vector<double> scores;
    std::vector<int> y;
    for (const auto& stay : c.stays) {
        const auto first = segment_windows(stay)[0];
        double present = 0.0;
        for (const auto& t : first.tokens) {
            const auto* v = std::get_if<std::string>(&t.value);
            if (t.feature_text == signal && v && *v == spec.signal_value) present = 1.0;
        }
        // Logistic model on one binary input is monotone in the input, so AUROC of the input equals AUROC of the model.
        scores.push_back(1.0 / (1.0 + std::exp(-(4.0 * present - 2.0))));
        y.push_back(labels.at(stay.stay_id));
    }
    CHECK(auroc(scores, y) >= 0.95);
}

TEST_CASE("generated corpora always ingest cleanly") {
    Rng rng(9);
    for (int trial = 0; trial < 15; ++trial) {
        GeneratorSpec spec;
        spec.patients = 1 + static_cast<int>(rng.below(30));
        spec.features = 2 + static_cast<int>(rng.below(60));
        spec.rate = rng.uniform() * 0.01;
        spec.stay_minutes_min = 1 + static_cast<int>(rng.below(3000));
        spec.stay_minutes_max = spec.stay_minutes_min + static_cast<int>(rng.below(3000));
        spec.max_stays_per_patient = 1 + static_cast<int>(rng.below(3));
        spec.categorical_fraction = rng.uniform();
        spec.signal_incidence = rng.uniform();
        const auto s = generate_corpus(spec, rng.next_u64());
        Corpus c;
        CHECK_NOTHROW(c = reparse(s));
        CHECK(c.registry_count() == s.registries.size());
        CHECK(c.stays.size() == s.outcomes.size());
        for (const auto& stay : c.stays) CHECK_NOTHROW(segment_windows(stay));
    }
}

TEST_CASE("outcome file format") {
    const std::string text = format_outcomes({{"S1", "P1", 1, 2.5}, {"S2", "P1", 0, -0.25}});
    CHECK(text == "stay_id,label,target\nS1,1,2.50\nS2,0,-0.25\n");
}
