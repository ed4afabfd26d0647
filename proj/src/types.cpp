#include "icubert/types.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "icubert/errors.hpp"
#include "icubert/io.hpp"

namespace icubert {

std::string_view name(Errc code) noexcept {
    switch (code) {
        case Errc::invalid_registry: return "InvalidRegistry";
        case Errc::parse_error: return "ParseError";
        case Errc::io_error: return "IoError";
        case Errc::invalid_ratios: return "InvalidRatios";
        case Errc::empty_train_split: return "EmptyTrainSplit";
        case Errc::empty_stay: return "EmptyStay";
        case Errc::statics_overflow: return "StaticsOverflow";
        case Errc::cache_miss: return "CacheMiss";
        case Errc::non_finite_value: return "NonFiniteValue";
        case Errc::index_out_of_range: return "IndexOutOfRange";
        case Errc::no_eligible_tokens: return "NoEligibleTokens";
        case Errc::shape_mismatch: return "ShapeMismatch";
        case Errc::mode_mismatch: return "ModeMismatch";
        case Errc::grad_mismatch: return "GradMismatch";
        case Errc::format_error: return "FormatError";
        case Errc::config_mismatch: return "ConfigMismatch";
        case Errc::no_masked_slots: return "NoMaskedSlots";
        case Errc::unknown_task: return "UnknownTask";
        case Errc::diverged_loss: return "DivergedLoss";
        case Errc::missing_labels: return "MissingLabels";
        case Errc::degenerate_labels: return "DegenerateLabels";
        case Errc::invalid_spec: return "InvalidSpec";
        case Errc::invalid_token: return "InvalidToken";
    }
    return "Error";
}

namespace {

bool read_int(std::string_view text, std::size_t pos, std::size_t len, int& out) {
    if (pos + len > text.size()) return false;
    for (std::size_t i = pos; i < pos + len; ++i) {
        if (!std::isdigit(static_cast<unsigned char>(text[i]))) return false;
    }
    const auto* first = text.data() + pos;
    return std::from_chars(first, first + len, out).ec == std::errc{};
}

}  // namespace

std::optional<Timestamp> parse_timestamp(std::string_view text) {
    // YYYY-MM-DDTHH:MM
    int y, mo, d, h, mi;
    if (text.size() < 16) return std::nullopt;
    if (!read_int(text, 0, 4, y) || text[4] != '-' || !read_int(text, 5, 2, mo) || text[7] != '-' ||
        !read_int(text, 8, 2, d) || (text[10] != 'T' && text[10] != ' ') || !read_int(text, 11, 2, h) ||
        text[13] != ':' || !read_int(text, 14, 2, mi)) {
        return std::nullopt;
    }
    std::size_t pos = 16;
    if (pos < text.size() && text[pos] == ':') {
        int s;
        if (!read_int(text, pos + 1, 2, s) || s > 60) return std::nullopt;
        pos += 3;
        if (pos < text.size() && text[pos] == '.') {
            ++pos;
            const std::size_t start = pos;
            while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
            if (pos == start) return std::nullopt;
        }
    }
    if (pos < text.size() && text[pos] == 'Z') ++pos;
    if (pos != text.size()) return std::nullopt;
    if (h > 23 || mi > 59) return std::nullopt;

    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    const auto days = sys_days{ymd}.time_since_epoch().count();
    return Timestamp{static_cast<std::int64_t>(days) * 1440 + h * 60 + mi};
}

std::string format_timestamp(Timestamp t) {
    using namespace std::chrono;
    std::int64_t days = t.minutes / 1440;
    std::int64_t rem = t.minutes % 1440;
    if (rem < 0) {
        rem += 1440;
        --days;
    }
    const year_month_day ymd{sys_days{std::chrono::days{days}}};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(rem / 60), static_cast<int>(rem % 60));
    return buf;
}

const Registry& validate_registry(const Registry& r) {
    auto blank = [](const std::string& s) {
        return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
    };
    if (blank(r.source)) throw Error(Errc::invalid_registry, "empty source");
    if (blank(r.variable)) throw Error(Errc::invalid_registry, "empty variable");
    if (r.duration_minutes < 0) throw Error(Errc::invalid_registry, "negative duration");
    if (r.value.valueless_by_exception()) throw Error(Errc::invalid_registry, "malformed value");
    if (const auto* x = std::get_if<double>(&r.value); x && !std::isfinite(*x)) {
        throw Error(Errc::invalid_registry, "non-finite value");
    }
    if (const auto* s = std::get_if<std::string>(&r.value); s && blank(*s)) {
        throw Error(Errc::invalid_registry, "empty categorical value");
    }
    return r;
}

namespace {

std::string normalize_text(std::string_view in) {
    std::string out;
    out.reserve(in.size());
    bool pending_space = false;
    for (unsigned char c : in) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

}  // namespace

std::string feature_text(std::string_view source, std::string_view variable) {
    std::string s = normalize_text(source);
    std::string v = normalize_text(variable);
    if (s.empty()) throw Error(Errc::invalid_registry, "empty source");
    if (v.empty()) throw Error(Errc::invalid_registry, "empty variable");
    return s + ": " + v;
}

std::string_view special_text(Special s) noexcept {
    switch (s) {
        case Special::cls: return "[CLS]";
        case Special::pad: return "[PAD]";
        case Special::mask: return "[MASK]";
    }
    return "";
}

std::optional<Special> parse_special(std::string_view text) noexcept {
    if (text == "[CLS]") return Special::cls;
    if (text == "[PAD]") return Special::pad;
    if (text == "[MASK]") return Special::mask;
    return std::nullopt;
}

Token make_special_token(Special s) {
    Token t;
    t.feature_text = std::string(special_text(s));
    t.value = s;
    return t;
}

void validate_token(const Token& t, int window_minutes) {
    const bool numeric = std::holds_alternative<double>(t.value);
    if (t.is_continuous != numeric) throw Error(Errc::invalid_token, "continuity flag disagrees with value");
    if (t.tau_minutes < 0 || t.tau_minutes >= window_minutes) throw Error(Errc::invalid_token, "tau out of range");
    if (t.delta_minutes < 0 || t.delta_minutes >= window_minutes) {
        throw Error(Errc::invalid_token, "delta out of range");
    }
    if (t.feature_text.empty()) throw Error(Errc::invalid_token, "empty feature text");
    if (const auto* s = std::get_if<Special>(&t.value); s && *s != Special::mask) {
        if (t.tau_minutes != 0 || t.delta_minutes != 0) throw Error(Errc::invalid_token, "special token with time");
        if (t.feature_text != special_text(*s)) throw Error(Errc::invalid_token, "special token feature mismatch");
    }
    if (numeric && !std::isfinite(std::get<double>(t.value))) throw Error(Errc::invalid_token, "non-finite value");
}

std::vector<std::uint8_t> attention_mask(const WindowSequence& seq) {
    std::vector<std::uint8_t> mask(seq.tokens.size());
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) mask[i] = seq.tokens[i].is_pad() ? 0 : 1;
    return mask;
}

void validate_window(const WindowSequence& seq, int window_minutes, int max_seq_len) {
    if (seq.tokens.empty() || !seq.tokens.front().is_cls()) throw Error(Errc::invalid_token, "sequence must start with CLS");
    if (static_cast<int>(seq.tokens.size()) > max_seq_len) throw Error(Errc::invalid_token, "sequence too long");
    bool seen_pad = false;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        const Token& t = seq.tokens[i];
        validate_token(t, window_minutes);
        if (i > 0 && t.is_cls()) throw Error(Errc::invalid_token, "CLS after position 0");
        if (t.is_pad()) {
            seen_pad = true;
        } else if (seen_pad) {
            throw Error(Errc::invalid_token, "PAD tokens must form a suffix");
        }
    }
}

Vocabularies::Vocabularies() {
    for (auto s : {Special::cls, Special::pad, Special::mask}) add_feature(std::string(special_text(s)));
    add_value("[MASK]");
    add_value("[UNK]");
}

int Vocabularies::add_feature(const std::string& text) {
    auto [it, inserted] = feature_lookup_.try_emplace(text, static_cast<int>(features_.size()));
    if (inserted) features_.push_back(text);
    return it->second;
}

int Vocabularies::add_value(const std::string& text) {
    auto [it, inserted] = value_lookup_.try_emplace(text, static_cast<int>(values_.size()));
    if (inserted) values_.push_back(text);
    return it->second;
}

void Vocabularies::set_stats(const std::string& feature, FeatureStats stats) { stats_[feature] = stats; }

std::optional<int> Vocabularies::feature_index(std::string_view text) const {
    auto it = feature_lookup_.find(std::string(text));
    if (it == feature_lookup_.end()) return std::nullopt;
    return it->second;
}

int Vocabularies::value_index(std::string_view text) const {
    auto it = value_lookup_.find(std::string(text));
    return it == value_lookup_.end() ? kValueUnk : it->second;
}

bool Vocabularies::has_value(std::string_view text) const { return value_lookup_.count(std::string(text)) > 0; }

const FeatureStats* Vocabularies::stats(std::string_view feature) const {
    auto it = stats_.find(std::string(feature));
    return it == stats_.end() ? nullptr : &it->second;
}

double Vocabularies::normalize(std::string_view feature, double x) const {
    const FeatureStats* s = stats(feature);
    if (s == nullptr) return x;
    if (s->stddev > 0.0) return (x - s->mean) / s->stddev;
    return x - s->mean;
}

std::string Vocabularies::to_json() const {
    nlohmann::ordered_json j;
    j["features"] = features_;
    j["values"] = values_;
    nlohmann::ordered_json stats = nlohmann::ordered_json::object();
    for (const auto& [k, s] : stats_) stats[k] = {s.mean, s.stddev, s.count};
    j["stats"] = stats;
    return j.dump(1);
}

Vocabularies Vocabularies::from_json(std::string_view text) {
    Vocabularies v;
    try {
        const auto j = nlohmann::json::parse(text);
        const auto features = j.at("features").get<std::vector<std::string>>();
        const auto values = j.at("values").get<std::vector<std::string>>();
        if (features.size() < kReservedFeatures || values.size() < kReservedValues) {
            throw Error(Errc::format_error, "vocabulary file lacks reserved entries");
        }
        for (std::size_t i = 0; i < kReservedFeatures; ++i) {
            if (features[i] != v.features_[i]) throw Error(Errc::format_error, "reserved feature mismatch");
        }
        for (std::size_t i = 0; i < kReservedValues; ++i) {
            if (values[i] != v.values_[i]) throw Error(Errc::format_error, "reserved value mismatch");
        }
        for (const auto& f : features) v.add_feature(f);
        for (const auto& x : values) v.add_value(x);
        for (const auto& [k, s] : j.at("stats").items()) {
            v.stats_[k] = FeatureStats{s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<std::int64_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::format_error, std::string("bad vocabulary file: ") + e.what());
    }
    return v;
}

void Vocabularies::save(const std::string& path) const { write_file_atomic(path, to_json()); }

Vocabularies Vocabularies::load(const std::string& path) { return from_json(read_file(path)); }

}  // namespace icubert
