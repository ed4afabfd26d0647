#include "icubert/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "icubert/errors.hpp"
#include "icubert/random.hpp"

namespace icubert {

std::string_view split_name(Split s) noexcept {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "";
}

std::size_t Corpus::registry_count() const {
    std::size_t n = 0;
    for (const auto& s : stays) n += s.events.size() + s.statics.size();
    return n;
}

std::vector<std::string> Corpus::patients() const {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& s : stays) {
        if (seen.insert(s.patient_id).second) out.push_back(s.patient_id);
    }
    return out;
}

Split Corpus::split_of(const Stay& stay) const {
    auto it = splits.find(stay.patient_id);
    return it == splits.end() ? Split::train : it->second;
}

std::vector<const Stay*> Corpus::stays_in(Split s) const {
    std::vector<const Stay*> out;
    for (const auto& stay : stays) {
        if (split_of(stay) == s) out.push_back(&stay);
    }
    return out;
}

namespace {

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line_no) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) throw ParseError(line_no, std::string("missing ") + key);
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    throw ParseError(line_no, std::string("invalid ") + key);
}

}  // namespace

Registry parse_event_line(std::string_view line, std::size_t line_no) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw ParseError(line_no, "malformed record");
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not an object");

    Registry r;
    r.patient_id = required_string(j, "patient_id", line_no);
    r.stay_id = required_string(j, "stay_id", line_no);
    r.source = required_string(j, "source", line_no);
    r.variable = required_string(j, "variable", line_no);

    auto value = j.find("value");
    if (value == j.end() || value->is_null()) throw ParseError(line_no, "missing value");
    if (value->is_number()) {
        r.value = value->get<double>();
    } else if (value->is_string()) {
        r.value = value->get<std::string>();
    } else {
        throw ParseError(line_no, "invalid value");
    }

    auto ts = j.find("timestamp");
    if (ts == j.end() || ts->is_null()) throw ParseError(line_no, "missing timestamp");
    if (!ts->is_string()) throw ParseError(line_no, "invalid timestamp");
    auto parsed = parse_timestamp(ts->get_ref<const std::string&>());
    if (!parsed) throw ParseError(line_no, "invalid timestamp");
    r.timestamp = *parsed;

    if (auto d = j.find("duration_minutes"); d != j.end() && !d->is_null()) {
        if (!d->is_number_integer()) throw ParseError(line_no, "invalid duration_minutes");
        r.duration_minutes = d->get<std::int64_t>();
    }
    if (auto s = j.find("static"); s != j.end() && !s->is_null()) {
        if (!s->is_boolean()) throw ParseError(line_no, "invalid static");
        r.is_static = s->get<bool>();
    }

    try {
        validate_registry(r);
    } catch (const Error& e) {
        throw ParseError(line_no, e.reason());
    }
    return r;
}

std::string format_event_line(const Registry& r) {
    nlohmann::ordered_json j;
    j["patient_id"] = r.patient_id;
    j["stay_id"] = r.stay_id;
    j["source"] = r.source;
    j["variable"] = r.variable;
    if (const auto* x = std::get_if<double>(&r.value)) {
        j["value"] = *x;
    } else {
        j["value"] = std::get<std::string>(r.value);
    }
    j["timestamp"] = format_timestamp(r.timestamp);
    if (r.duration_minutes != 0) j["duration_minutes"] = r.duration_minutes;
    if (r.is_static) j["static"] = true;
    return j.dump();
}

Corpus make_corpus(std::vector<Registry> registries) {
    Corpus corpus;
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < registries.size(); ++i) {
        Registry& r = registries[i];
        auto [it, inserted] = index.try_emplace(r.stay_id, corpus.stays.size());
        if (inserted) {
            corpus.stays.push_back(Stay{r.stay_id, r.patient_id, {}, {}});
        }
        Stay& stay = corpus.stays[it->second];
        if (stay.patient_id != r.patient_id) {
            throw ParseError(i + 1, "stay " + r.stay_id + " belongs to two patients");
        }
        (r.is_static ? stay.statics : stay.events).push_back(std::move(r));
    }
    return corpus;
}

Corpus parse_events(std::istream& in) {
    std::vector<Registry> registries;
    std::vector<std::size_t> line_numbers;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        registries.push_back(parse_event_line(line, line_no));
        line_numbers.push_back(line_no);
    }
    if (in.bad()) throw Error(Errc::io_error, "read failed");
    try {
        return make_corpus(std::move(registries));
    } catch (const ParseError& e) {
        throw ParseError(line_numbers.at(e.line_no() - 1), e.detail());
    }
}

Corpus parse_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_error, "cannot open " + path);
    return parse_events(in);
}

std::array<std::size_t, 3> split_counts(std::size_t patients, SplitRatios ratios) {
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw Error(Errc::invalid_ratios, "ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw Error(Errc::invalid_ratios, "ratios must sum to 1");

    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(patients);
        // Guard against 0.7 * 100 = 69.999...
        const double fl = std::floor(exact + 1e-9);
        counts[i] = static_cast<std::size_t>(fl);
        frac[i] = exact - fl;
        assigned += counts[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (frac[a] != frac[b]) return frac[a] > frac[b];
        return ratios[a] > ratios[b];
    });
    for (std::size_t k = 0; assigned < patients; ++k, ++assigned) ++counts[order[k % 3]];
    return counts;
}

Corpus assign_splits(Corpus corpus, SplitRatios ratios, std::uint64_t seed) {
    std::vector<std::string> patients = corpus.patients();
    const auto counts = split_counts(patients.size(), ratios);
    std::sort(patients.begin(), patients.end());
    Rng rng(derive_seed(seed, 0x5B117));
    for (std::size_t i = patients.size(); i > 1; --i) {
        std::swap(patients[i - 1], patients[rng.below(i)]);
    }
    corpus.splits.clear();
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < counts[s]; ++k, ++pos) {
            corpus.splits[patients[pos]] = static_cast<Split>(s);
        }
    }
    return corpus;
}

Vocabularies build_vocabularies(const Corpus& corpus) {
    std::set<std::string> features;
    std::set<std::string> values;
    struct Welford {
        std::int64_t n = 0;
        double mean = 0.0;
        double m2 = 0.0;
    };
    std::map<std::string, Welford> acc;

    std::size_t train_registries = 0;
    for (const Stay* stay : corpus.stays_in(Split::train)) {
        for (const auto* group : {&stay->statics, &stay->events}) {
            for (const Registry& r : *group) {
                ++train_registries;
                std::string f = feature_text(r.source, r.variable);
                if (const auto* x = std::get_if<double>(&r.value)) {
                    Welford& w = acc[f];
                    ++w.n;
                    const double delta = *x - w.mean;
                    w.mean += delta / static_cast<double>(w.n);
                    w.m2 += delta * (*x - w.mean);
                } else {
                    values.insert(std::get<std::string>(r.value));
                }
                features.insert(std::move(f));
            }
        }
    }
    if (train_registries == 0) throw Error(Errc::empty_train_split, "train split has no registries");

    Vocabularies vocab;
    for (const auto& f : features) vocab.add_feature(f);
    for (const auto& v : values) vocab.add_value(v);
    for (const auto& [f, w] : acc) {
        const double var = w.n > 0 ? std::max(0.0, w.m2 / static_cast<double>(w.n)) : 0.0;
        vocab.set_stats(f, FeatureStats{w.mean, std::sqrt(var), w.n});
    }
    return vocab;
}

}  // namespace icubert
