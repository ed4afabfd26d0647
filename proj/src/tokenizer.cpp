#include "icubert/tokenizer.hpp"

#include <algorithm>

#include "icubert/errors.hpp"

namespace icubert {

Token to_token(const Registry& r, Timestamp window_start, int window_minutes, const Vocabularies* vocab) {
    Token t;
    t.feature_text = feature_text(r.source, r.variable);
    t.is_static = r.is_static;
    if (const auto* x = std::get_if<double>(&r.value)) {
        t.value = vocab ? vocab->normalize(t.feature_text, *x) : *x;
        t.is_continuous = true;
    } else {
        t.value = std::get<std::string>(r.value);
        t.is_continuous = false;
    }
    if (r.is_static) return t;

    const std::int64_t tau = r.timestamp - window_start;
    if (tau < 0 || tau >= window_minutes) throw Error(Errc::index_out_of_range, "registry outside its window");
    t.tau_minutes = static_cast<std::int32_t>(tau);
    t.delta_minutes = static_cast<std::int32_t>(std::min<std::int64_t>(r.duration_minutes, window_minutes - 1));
    return t;
}

Timestamp stay_start(const Stay& stay) {
    const auto& group = stay.events.empty() ? stay.statics : stay.events;
    if (group.empty()) throw Error(Errc::empty_stay, "stay " + stay.stay_id + " has no registries");
    Timestamp start = group.front().timestamp;
    for (const auto& r : group) start = std::min(start, r.timestamp);
    return start;
}

namespace {

WindowSequence window_skeleton(const Stay& stay, int index, Timestamp start, int window_minutes,
                               const Vocabularies* vocab) {
    WindowSequence w;
    w.stay_id = stay.stay_id;
    w.window_index = index;
    w.window_start = start;
    w.tokens.reserve(1 + stay.statics.size());
    w.tokens.push_back(make_special_token(Special::cls));
    for (const auto& r : stay.statics) w.tokens.push_back(to_token(r, start, window_minutes, vocab));
    return w;
}

// Dynamic registries in chronological order, input order breaking ties.
std::vector<const Registry*> chronological(const Stay& stay) {
    std::vector<const Registry*> events;
    events.reserve(stay.events.size());
    for (const auto& r : stay.events) events.push_back(&r);
    std::stable_sort(events.begin(), events.end(),
                     [](const Registry* a, const Registry* b) { return a->timestamp < b->timestamp; });
    return events;
}

void check_window(int window_minutes) {
    if (window_minutes < 1) throw Error(Errc::index_out_of_range, "window length must be positive");
}

}  // namespace

std::vector<WindowSequence> segment_windows(const Stay& stay, const TokenizerConfig& config,
                                            const Vocabularies* vocab) {
    const int W = config.window_minutes;
    check_window(W);
    const Timestamp start = stay_start(stay);
    const auto events = chronological(stay);

    std::int64_t windows = 1;
    if (!events.empty()) windows = (events.back()->timestamp - start) / W + 1;

    std::vector<WindowSequence> out;
    std::size_t next = 0;
    for (std::int64_t j = 0; j < windows; ++j) {
        const Timestamp w_start = start + j * W;
        WindowSequence w = window_skeleton(stay, static_cast<int>(j), w_start, W, vocab);
        bool any = false;
        while (next < events.size() && events[next]->timestamp < w_start + W) {
            w.tokens.push_back(to_token(*events[next], w_start, W, vocab));
            ++next;
            any = true;
        }
        if (any || config.emit_empty_windows) out.push_back(std::move(w));
    }
    return out;
}

WindowSequence truncate_and_pad(WindowSequence seq, int max_seq_len) {
    if (seq.tokens.empty() || !seq.tokens.front().is_cls()) {
        throw Error(Errc::invalid_token, "sequence must begin with CLS");
    }
    while (!seq.tokens.empty() && seq.tokens.back().is_pad()) seq.tokens.pop_back();

    const auto L = static_cast<std::size_t>(max_seq_len);
    if (seq.tokens.size() > L) {
        std::vector<Token> statics;
        std::vector<Token> dynamics;
        for (std::size_t i = 1; i < seq.tokens.size(); ++i) {
            (seq.tokens[i].is_static ? statics : dynamics).push_back(std::move(seq.tokens[i]));
        }
        if (1 + statics.size() > L) {
            throw Error(Errc::statics_overflow, "CLS + " + std::to_string(statics.size()) +
                                                    " statics exceed max sequence length " +
                                                    std::to_string(max_seq_len));
        }
        std::stable_sort(dynamics.begin(), dynamics.end(),
                         [](const Token& a, const Token& b) { return a.tau_minutes < b.tau_minutes; });
        const std::size_t keep = L - 1 - statics.size();
        std::vector<Token> tokens;
        tokens.reserve(L);
        tokens.push_back(std::move(seq.tokens.front()));
        for (auto& t : statics) tokens.push_back(std::move(t));
        for (std::size_t i = dynamics.size() - keep; i < dynamics.size(); ++i) tokens.push_back(std::move(dynamics[i]));
        seq.tokens = std::move(tokens);
    }
    seq.tokens.resize(L, make_special_token(Special::pad));
    return seq;
}

std::vector<WindowSequence> rolling_windows(const Stay& stay, const TokenizerConfig& config,
                                            const WindowLabeler& labeler, const Vocabularies* vocab) {
    const int W = config.window_minutes;
    const int S = config.roll_step_minutes;
    check_window(W);
    if (S < 1) throw Error(Errc::index_out_of_range, "roll step must be positive");
    const Timestamp start = stay_start(stay);
    const auto events = chronological(stay);

    const std::int64_t last = events.empty() ? 0 : events.back()->timestamp - start;
    const std::int64_t starts = last / S + 1;

    std::vector<WindowSequence> out;
    std::size_t first = 0;
    for (std::int64_t k = 0; k < starts; ++k) {
        const Timestamp w_start = start + k * S;
        WindowSequence w = window_skeleton(stay, static_cast<int>(k), w_start, W, vocab);
        while (first < events.size() && events[first]->timestamp < w_start) ++first;
        bool any = false;
        for (std::size_t i = first; i < events.size() && events[i]->timestamp < w_start + W; ++i) {
            w.tokens.push_back(to_token(*events[i], w_start, W, vocab));
            any = true;
        }
        if (!any && !config.emit_empty_windows) continue;
        if (labeler) w.label = labeler(stay, w_start + W);
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace icubert
