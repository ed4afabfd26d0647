#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace icubert {

inline constexpr int kDefaultWindowMinutes = 1440;
inline constexpr int kDefaultMaxSeqLen = 512;

// Absolute time at minute resolution (minutes since 1970-01-01T00:00Z).
struct Timestamp {
    std::int64_t minutes = 0;

    friend constexpr auto operator<=>(Timestamp, Timestamp) = default;
    friend constexpr std::int64_t operator-(Timestamp a, Timestamp b) { return a.minutes - b.minutes; }
    friend constexpr Timestamp operator+(Timestamp a, std::int64_t m) { return {a.minutes + m}; }
};

// Parses "YYYY-MM-DDTHH:MM[:SS[.fff]][Z]"; seconds are floored away.
std::optional<Timestamp> parse_timestamp(std::string_view text);
std::string format_timestamp(Timestamp t);

// Raw record value: a measurement or a categorical label.
using RecordValue = std::variant<double, std::string>;

struct Registry {
    std::string patient_id;
    std::string stay_id;
    std::string source;
    std::string variable;
    RecordValue value;
    Timestamp timestamp;
    std::int64_t duration_minutes = 0;
    bool is_static = false;
};

// Throws InvalidRegistry when an invariant is violated; returns r otherwise.
const Registry& validate_registry(const Registry& r);

// Canonical "<source>: <variable>" join, lowercased with single spaces.
std::string feature_text(std::string_view source, std::string_view variable);

enum class Special : std::uint8_t { cls, pad, mask };

std::string_view special_text(Special s) noexcept;
// Maps "[CLS]", "[PAD]", "[MASK]" back to their Special value.
std::optional<Special> parse_special(std::string_view text) noexcept;

using TokenValue = std::variant<double, std::string, Special>;

struct Token {
    std::string feature_text;
    TokenValue value;
    std::int32_t tau_minutes = 0;
    std::int32_t delta_minutes = 0;
    bool is_continuous = false;
    bool is_static = false;

    bool is_special(Special s) const {
        const auto* v = std::get_if<Special>(&value);
        return v != nullptr && *v == s && feature_text == special_text(s);
    }
    bool is_cls() const { return is_special(Special::cls); }
    bool is_pad() const { return is_special(Special::pad); }

    friend bool operator==(const Token&, const Token&) = default;
};

Token make_special_token(Special s);

// Throws InvalidToken unless every Token invariant holds for window length W.
void validate_token(const Token& t, int window_minutes = kDefaultWindowMinutes);

struct WindowSequence {
    std::string stay_id;
    int window_index = 0;
    Timestamp window_start;
    std::vector<Token> tokens;
    std::optional<std::vector<double>> label;

    friend bool operator==(const WindowSequence&, const WindowSequence&) = default;
};

// 1 for real tokens, 0 for PAD.
std::vector<std::uint8_t> attention_mask(const WindowSequence& seq);

// Throws InvalidToken when the sequence shape invariants fail.
void validate_window(const WindowSequence& seq, int window_minutes = kDefaultWindowMinutes,
                     int max_seq_len = kDefaultMaxSeqLen);

struct FeatureStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::int64_t count = 0;
};

class Vocabularies {
public:
    static constexpr int kFeatureCls = 0;
    static constexpr int kFeaturePad = 1;
    static constexpr int kFeatureMask = 2;
    static constexpr int kReservedFeatures = 3;
    static constexpr int kValueMask = 0;
    static constexpr int kValueUnk = 1;
    static constexpr int kReservedValues = 2;

    Vocabularies();

    // Returns the existing index when the text is already present.
    int add_feature(const std::string& text);
    int add_value(const std::string& text);
    void set_stats(const std::string& feature, FeatureStats stats);

    std::optional<int> feature_index(std::string_view text) const;
    // Unknown categories map to [UNK].
    int value_index(std::string_view text) const;
    bool has_value(std::string_view text) const;
    const std::string& feature_at(int index) const { return features_.at(static_cast<std::size_t>(index)); }
    const std::string& value_at(int index) const { return values_.at(static_cast<std::size_t>(index)); }
    int feature_count() const { return static_cast<int>(features_.size()); }
    int value_count() const { return static_cast<int>(values_.size()); }

    const FeatureStats* stats(std::string_view feature) const;
    const std::map<std::string, FeatureStats>& all_stats() const { return stats_; }

    // z-score with train statistics; stddev 0 gives (x - mean), unknown features pass through.
    double normalize(std::string_view feature, double x) const;

    std::string to_json() const;
    static Vocabularies from_json(std::string_view text);
    void save(const std::string& path) const;
    static Vocabularies load(const std::string& path);

    friend bool operator==(const Vocabularies& a, const Vocabularies& b) {
        return a.features_ == b.features_ && a.values_ == b.values_;
    }

private:
    std::vector<std::string> features_;
    std::vector<std::string> values_;
    std::unordered_map<std::string, int> feature_lookup_;
    std::unordered_map<std::string, int> value_lookup_;
    std::map<std::string, FeatureStats> stats_;
};

}  // namespace icubert
