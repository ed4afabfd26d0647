#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "icubert/ingest.hpp"
#include "icubert/types.hpp"

namespace icubert {

struct TokenizerConfig {
    int window_minutes = kDefaultWindowMinutes;
    int max_seq_len = kDefaultMaxSeqLen;
    int roll_step_minutes = 360;
    // Windows with no dynamic events still carry CLS + statics.
    bool emit_empty_windows = true;
};

// Converts one registry to a quadruplet token relative to window_start. Numeric
// values are z-scored when `vocab` is given. Statics get tau = delta = 0.
Token to_token(const Registry& r, Timestamp window_start, int window_minutes,
               const Vocabularies* vocab = nullptr);

// Earliest dynamic timestamp (earliest static one when the stay has no events).
Timestamp stay_start(const Stay& stay);

// Non-overlapping windows [start + jW, start + (j+1)W), each CLS + statics +
// chronological dynamic tokens. Unpadded.
std::vector<WindowSequence> segment_windows(const Stay& stay, const TokenizerConfig& config = {},
                                            const Vocabularies* vocab = nullptr);

// Keeps CLS, all statics and the most recent dynamics when too long; pads to
// max_seq_len otherwise. Output length is exactly max_seq_len.
WindowSequence truncate_and_pad(WindowSequence seq, int max_seq_len = kDefaultMaxSeqLen);

// Task label evaluated at a window's end time; nullopt leaves the window unlabelled.
using WindowLabeler = std::function<std::optional<std::vector<double>>(const Stay&, Timestamp window_end)>;

// Overlapping windows starting at stay start + kS for every k with kS <= offset
// of the last dynamic event, each spanning [kS, kS + W).
std::vector<WindowSequence> rolling_windows(const Stay& stay, const TokenizerConfig& config = {},
                                            const WindowLabeler& labeler = {},
                                            const Vocabularies* vocab = nullptr);

}  // namespace icubert
