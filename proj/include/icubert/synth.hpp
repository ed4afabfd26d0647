#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icubert/ingest.hpp"
#include "icubert/types.hpp"

namespace icubert {

struct GeneratorSpec {
    int patients = 100;
    int features = 50;
    // Mean events per feature per minute; each feature's rate is scaled by a
    // fixed weight in [0.5, 1.5] with mean 1.
    double rate = 0.02;
    int stay_minutes_min = 1440;
    int stay_minutes_max = 1440;
    int max_stays_per_patient = 1;
    double categorical_fraction = 0.3;
    // Probability that a stay receives the planted condition in its first window.
    double signal_incidence = 0.1;
    std::string signal_source = "microbiologyevents";
    std::string signal_variable = "blood culture";
    std::string signal_value = "positive";
    std::string signal_background = "negative";
    // Expected background (non-signal) events of the signal feature per stay.
    double signal_background_events = 1.0;
    // Shift of the continuous target for positive stays.
    double target_shift = 2.0;
    int window_minutes = kDefaultWindowMinutes;
    std::string start = "2150-01-01T00:00";

    // Throws InvalidSpec.
    void validate() const;
};

struct FeatureDef {
    std::string source;
    std::string variable;
    bool categorical = false;
    std::vector<std::string> categories;
    double mean = 0.0;
    double stddev = 1.0;
    double rate_weight = 1.0;
    int duration_minutes = 0;

    std::string text() const { return feature_text(source, variable); }
};

// Regular features of a spec (the signal feature is not included).
std::vector<FeatureDef> feature_catalog(const GeneratorSpec& spec, std::uint64_t seed);

struct StayOutcome {
    std::string stay_id;
    std::string patient_id;
    int label = 0;
    double target = 0.0;
};

struct SyntheticCorpus {
    std::vector<Registry> registries;  // statics then events, per stay in generation order
    std::vector<StayOutcome> outcomes;
};

// Statics at admission, per-feature Poisson event streams over the stay, and
// the planted signal event placed inside the first window of positive stays.
SyntheticCorpus generate_corpus(const GeneratorSpec& spec, std::uint64_t seed);

// 1 iff a signal-feature event carrying the signal value falls in the stay's first window.
int oracle_label(const Stay& stay, const GeneratorSpec& spec);

std::string format_events(const std::vector<Registry>& registries);
// stay_id,label,target
std::string format_outcomes(const std::vector<StayOutcome>& outcomes);

}  // namespace icubert
