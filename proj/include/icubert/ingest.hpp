#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "icubert/types.hpp"

namespace icubert {

enum class Split : std::uint8_t { train, val, test };

std::string_view split_name(Split s) noexcept;

struct Stay {
    std::string stay_id;
    std::string patient_id;
    std::vector<Registry> events;   // dynamic registries, input order
    std::vector<Registry> statics;  // demographics, ward, prior diagnoses
};

struct Corpus {
    std::vector<Stay> stays;                 // first-appearance order
    std::map<std::string, Split> splits;     // patient_id -> split; empty until assigned

    std::size_t registry_count() const;
    // Distinct patients in first-appearance order.
    std::vector<std::string> patients() const;
    Split split_of(const Stay& stay) const;
    std::vector<const Stay*> stays_in(Split s) const;
};

using SplitRatios = std::array<double, 3>;

inline constexpr SplitRatios kDefaultRatios{0.7, 0.15, 0.15};

// Event-line format: one JSON object per line with keys patient_id, stay_id,
// source, variable, value (number or string), timestamp (ISO-8601), and the
// optional duration_minutes (default 0) and static (default false).
Corpus parse_events(std::istream& in);
Corpus parse_events(const std::string& path);

Registry parse_event_line(std::string_view line, std::size_t line_no);
std::string format_event_line(const Registry& r);

// Groups validated registries by stay. Throws ParseError when a stay_id is
// reused across patients (line_no is the 1-based index into `registries`).
Corpus make_corpus(std::vector<Registry> registries);

// Patient-level split: patients sorted by id, shuffled with `seed`, then cut by
// largest-remainder counts (ties go to the larger ratio).
Corpus assign_splits(Corpus corpus, SplitRatios ratios = kDefaultRatios, std::uint64_t seed = 1);

// Exact per-split patient counts used by assign_splits.
std::array<std::size_t, 3> split_counts(std::size_t patients, SplitRatios ratios);

// Feature / categorical vocabularies and continuous statistics from the train split only.
Vocabularies build_vocabularies(const Corpus& corpus);

}  // namespace icubert
