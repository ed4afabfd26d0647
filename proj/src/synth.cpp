#include "icubert/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "icubert/errors.hpp"
#include "icubert/random.hpp"
#include "icubert/tokenizer.hpp"

namespace icubert {

namespace {

struct Word {
    const char* source;
    const char* variable;
};

constexpr Word kWords[] = {
    {"chartevents", "heart rate"},          {"chartevents", "respiratory rate"},
    {"chartevents", "o2 saturation pulseoxymetry"}, {"chartevents", "temperature fahrenheit"},
    {"chartevents", "non invasive blood pressure systolic"}, {"chartevents", "non invasive blood pressure diastolic"},
    {"chartevents", "arterial blood pressure mean"}, {"chartevents", "gcs eye opening"},
    {"chartevents", "gcs verbal response"}, {"chartevents", "gcs motor response"},
    {"chartevents", "central venous pressure"}, {"chartevents", "pain level"},
    {"chartevents", "richmond-ras scale"},   {"chartevents", "braden score"},
    {"chartevents", "heart rhythm"},         {"chartevents", "o2 delivery device"},
    {"chartevents", "pupil response"},       {"chartevents", "skin color"},
    {"labevents", "creatinine"},             {"labevents", "potassium"},
    {"labevents", "sodium"},                 {"labevents", "chloride"},
    {"labevents", "bicarbonate"},            {"labevents", "urea nitrogen"},
    {"labevents", "glucose"},                {"labevents", "lactate"},
    {"labevents", "hemoglobin"},             {"labevents", "platelet count"},
    {"labevents", "white blood cells"},      {"labevents", "inr"},
    {"labevents", "ph"},                     {"labevents", "pco2"},
    {"labevents", "po2"},                    {"labevents", "magnesium"},
    {"labevents", "calcium total"},          {"labevents", "albumin"},
    {"labevents", "bilirubin total"},        {"labevents", "troponin t"},
    {"inputevents", "norepinephrine"},       {"inputevents", "propofol"},
    {"inputevents", "heparin sodium"},       {"inputevents", "insulin regular"},
    {"inputevents", "fentanyl citrate"},     {"inputevents", "dextrose 5%"},
    {"inputevents", "sodium chloride 0.9%"}, {"outputevents", "foley"},
    {"outputevents", "chest tube"},          {"outputevents", "void"},
    {"procedureevents", "arterial line"},    {"procedureevents", "invasive ventilation"},
    {"procedureevents", "dialysis crrt"},
};

constexpr const char* kGrades[] = {"low", "normal", "high", "absent", "present", "mild", "moderate", "severe"};
constexpr const char* kAdmissionTypes[] = {"emergency", "urgent", "elective", "observation"};
constexpr const char* kDiagnoses[] = {"sepsis", "pneumonia", "heart failure", "acute kidney injury",
                                      "copd", "diabetes mellitus", "hypertension", "stroke"};

// Feature-level draws use their own stream so the catalog is independent of the patient count.
constexpr std::uint64_t kCatalogStream = 0xCA7A;
constexpr std::uint64_t kPatientStream = 0x9A71;

double round2(double x) { return std::round(x * 100.0) / 100.0; }

}  // namespace

void GeneratorSpec::validate() const {
    auto fail = [](const std::string& why) { throw Error(Errc::invalid_spec, why); };
    if (patients < 1) fail("at least one patient is required");
    if (features < 2) fail("at least two features are required");
    if (!(rate >= 0.0) || !std::isfinite(rate)) fail("event rate must be finite and non-negative");
    if (stay_minutes_min < 1 || stay_minutes_max < stay_minutes_min) fail("invalid stay length range");
    if (max_stays_per_patient < 1) fail("max stays per patient must be positive");
    if (!(categorical_fraction >= 0.0 && categorical_fraction <= 1.0)) fail("categorical fraction outside [0, 1]");
    if (!(signal_incidence >= 0.0 && signal_incidence <= 1.0)) fail("signal incidence outside [0, 1]");
    if (!(signal_background_events >= 0.0)) fail("signal background rate must be non-negative");
    if (!std::isfinite(target_shift)) fail("target shift must be finite");
    if (window_minutes < 1) fail("window length must be positive");
    if (signal_source.empty() || signal_variable.empty() || signal_value.empty()) fail("planted rule is undefined");
    if (signal_value == signal_background) fail("signal and background values must differ");
    if (!parse_timestamp(start)) fail("invalid start timestamp '" + start + "'");
}

std::vector<FeatureDef> feature_catalog(const GeneratorSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, kCatalogStream));
    const auto n = static_cast<std::size_t>(spec.features);
    constexpr std::size_t kWordCount = std::size(kWords);
    std::vector<FeatureDef> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Word& w = kWords[i % kWordCount];
        out[i].source = w.source;
        out[i].variable = w.variable;
        if (i >= kWordCount) out[i].variable += " " + std::to_string(i / kWordCount + 1);
    }
    // Exactly round(fraction * F) categorical features, chosen by a seeded shuffle.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_cat = static_cast<std::size_t>(std::lround(spec.categorical_fraction * static_cast<double>(n)));
    for (std::size_t k = 0; k < n_cat; ++k) out[order[k]].categorical = true;

    double weight_sum = 0.0;
    for (auto& f : out) {
        f.rate_weight = 0.5 + rng.uniform();
        weight_sum += f.rate_weight;
        if (f.categorical) {
            std::vector<std::size_t> grades(std::size(kGrades));
            std::iota(grades.begin(), grades.end(), 0);
            for (std::size_t i = grades.size(); i > 1; --i) std::swap(grades[i - 1], grades[rng.below(i)]);
            const std::size_t k = 3 + rng.below(3);
            for (std::size_t g = 0; g < k; ++g) f.categories.push_back(f.variable + " " + kGrades[grades[g]]);
        } else {
            f.mean = round2(5.0 + 145.0 * rng.uniform());
            f.stddev = round2(f.mean * (0.05 + 0.2 * rng.uniform()));
        }
    }
    // Distinct per-feature durations (infusion length or charting interval), 5-minute steps.
    std::vector<int> durations(n);
    for (std::size_t i = 0; i < n; ++i) durations[i] = std::min(5 * static_cast<int>(i + 1), spec.window_minutes - 1);
    for (std::size_t i = n; i > 1; --i) std::swap(durations[i - 1], durations[rng.below(i)]);
    for (std::size_t i = 0; i < n; ++i) out[i].duration_minutes = std::max(durations[i], 0);
    const double scale = static_cast<double>(n) / weight_sum;
    for (auto& f : out) f.rate_weight *= scale;
    return out;
}

SyntheticCorpus generate_corpus(const GeneratorSpec& spec, std::uint64_t seed) {
    const auto catalog = feature_catalog(spec, seed);
    const Timestamp origin = *parse_timestamp(spec.start);
    SyntheticCorpus out;
    long stay_counter = 0;
    char id[32];
    for (int p = 0; p < spec.patients; ++p) {
        Rng rng(derive_seed(seed, kPatientStream, static_cast<std::uint64_t>(p)));
        std::snprintf(id, sizeof id, "P%06d", p + 1);
        const std::string patient = id;
        const int stays = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_stays_per_patient)));
        const bool female = rng.bernoulli(0.5);
        const double age = static_cast<double>(18 + rng.below(73));
        // Patients start 30 days apart; a patient's stays are a day apart.
        Timestamp admission = origin + static_cast<std::int64_t>(p) * 30 * 1440;
        for (int s = 0; s < stays; ++s) {
            std::snprintf(id, sizeof id, "S%07ld", ++stay_counter);
            const std::string stay = id;
            const int length = spec.stay_minutes_min +
                               static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.stay_minutes_max - spec.stay_minutes_min + 1)));
            auto reg = [&](std::string source, std::string variable, RecordValue value, Timestamp t, std::int64_t dur,
                           bool is_static) {
                Registry r;
                r.patient_id = patient;
                r.stay_id = stay;
                r.source = std::move(source);
                r.variable = std::move(variable);
                r.value = std::move(value);
                r.timestamp = t;
                r.duration_minutes = dur;
                r.is_static = is_static;
                return r;
            };
            out.registries.push_back(reg("patients", "gender", std::string(female ? "F" : "M"), admission, 0, true));
            out.registries.push_back(reg("patients", "anchor age", age, admission, 0, true));
            out.registries.push_back(reg("admissions", "admission type",
                                         std::string(kAdmissionTypes[rng.below(std::size(kAdmissionTypes))]),
                                         admission, 0, true));
            out.registries.push_back(reg("diagnoses", "prior diagnosis",
                                         std::string(kDiagnoses[rng.below(std::size(kDiagnoses))]), admission, 0,
                                         true));

            std::vector<Registry> events;
            for (const FeatureDef& f : catalog) {
                // Stay-level tendency: a preferred category or a latent offset.
                const std::size_t preferred = f.categorical ? rng.below(f.categories.size()) : 0;
                const double offset = f.categorical ? 0.0 : rng.normal();
                const auto count = rng.poisson(spec.rate * f.rate_weight * static_cast<double>(length));
                for (std::uint64_t e = 0; e < count; ++e) {
                    const auto t = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(length)));
                    RecordValue v;
                    if (f.categorical) {
                        v = f.categories[rng.bernoulli(0.8) ? preferred : rng.below(f.categories.size())];
                    } else {
                        v = round2(f.mean + f.stddev * (0.95 * offset + 0.3 * rng.normal()));
                    }
                    events.push_back(reg(f.source, f.variable, std::move(v), admission + t, f.duration_minutes, false));
                }
            }
            StayOutcome outcome;
            outcome.stay_id = stay;
            outcome.patient_id = patient;
            // Signal feature: background results anywhere in the stay, plus the
            // planted value inside the first window of positive stays. Planting
            // needs a positive event rate so that a zero rate yields statics only.
            if (spec.rate > 0.0) {
                const auto background = rng.poisson(spec.signal_background_events * static_cast<double>(length) / 1440.0);
                for (std::uint64_t e = 0; e < background; ++e) {
                    const auto t = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(length)));
                    events.push_back(reg(spec.signal_source, spec.signal_variable, spec.signal_background,
                                         admission + t, 0, false));
                }
                if (rng.bernoulli(spec.signal_incidence)) {
                    const int span = std::min(length, spec.window_minutes);
                    const auto t = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(span)));
                    events.push_back(reg(spec.signal_source, spec.signal_variable, spec.signal_value, admission + t, 0,
                                         false));
                    outcome.label = 1;
                }
            }
            outcome.target = round2(rng.normal() + spec.target_shift * outcome.label);
            std::stable_sort(events.begin(), events.end(),
                             [](const Registry& a, const Registry& b) { return a.timestamp < b.timestamp; });
            for (auto& r : events) out.registries.push_back(std::move(r));
            out.outcomes.push_back(outcome);
            admission = admission + spec.stay_minutes_max + 1440;
        }
    }
    return out;
}

int oracle_label(const Stay& stay, const GeneratorSpec& spec) {
    if (spec.signal_source.empty() || spec.signal_variable.empty() || spec.signal_value.empty()) {
        throw Error(Errc::invalid_spec, "planted rule is undefined");
    }
    if (spec.window_minutes < 1) throw Error(Errc::invalid_spec, "window length must be positive");
    if (stay.events.empty()) return 0;
    const std::string signal = feature_text(spec.signal_source, spec.signal_variable);
    const Timestamp start = stay_start(stay);
    for (const Registry& r : stay.events) {
        const auto* v = std::get_if<std::string>(&r.value);
        if (v == nullptr || *v != spec.signal_value) continue;
        if (feature_text(r.source, r.variable) != signal) continue;
        if (r.timestamp - start < spec.window_minutes) return 1;
    }
    return 0;
}

std::string format_events(const std::vector<Registry>& registries) {
    std::string out;
    for (const auto& r : registries) {
        out += format_event_line(r);
        out += '\n';
    }
    return out;
}

std::string format_outcomes(const std::vector<StayOutcome>& outcomes) {
    std::string out = "stay_id,label,target\n";
    char buf[64];
    for (const auto& o : outcomes) {
        std::snprintf(buf, sizeof buf, ",%d,%.2f\n", o.label, o.target);
        out += o.stay_id;
        out += buf;
    }
    return out;
}

}  // namespace icubert
