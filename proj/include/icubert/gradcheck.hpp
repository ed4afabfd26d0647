#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "icubert/encoder.hpp"

namespace icubert {

// A parameter matrix paired with its analytic gradient.
struct ParamSlot {
    std::string name;
    Mat<double>* value = nullptr;
    const Mat<double>* grad = nullptr;
};

struct GradCheckOptions {
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    // Entries checked per parameter; 0 checks every entry.
    int samples_per_param = 0;
    std::uint64_t seed = 0;
    int report_size = 10;
    bool throw_on_failure = true;
};

struct GradCheckEntry {
    std::string param;
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> worst;          // descending rel_err
    std::map<std::string, double> max_by_param;
    long checked = 0;
    double max_rel_err = 0.0;
    bool passed = true;

    std::string to_text() const;
};

// Compares each analytic entry with (f(x+eps) - f(x-eps)) / 2eps using
// |a - n| / max(1, |a|). `loss` must be deterministic. Throws GradMismatch for
// the worst offender when the tolerance is exceeded and throw_on_failure is set.
GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<ParamSlot>& params,
                           const GradCheckOptions& options = {});

// Slots for every parameter visited by `params`, optionally filtered by name.
std::vector<ParamSlot> model_slots(ModelParams<double>& params, const ModelParams<double>& grad,
                                   const std::function<bool(const std::string&)>& keep = {});

struct ModelCheckConfig {
    int hidden = 8;
    int layers = 1;
    int heads = 2;
    int ffn_dim = 8;
    int max_seq_len = 6;
    int feature_vocab = 12;  // including reserved entries
    int value_vocab = 7;     // including reserved entries
    int pretrained_dim = 8;
    int window_minutes = kDefaultWindowMinutes;
    int windows = 3;
    double alpha = 3.0;
    double beta = 1.0;
    std::uint64_t seed = 0;
    GradCheckOptions options;
};

struct ModelCheckReport {
    GradCheckReport pretrain;  // MLVM loss, every embedder, encoder and reconstruction-head parameter
    GradCheckReport finetune;  // weighted BCE through the task head down to the embedder
    bool passed() const { return pretrain.passed && finetune.passed; }
};

// Random windows with masked feature, categorical and continuous slots on a
// freshly initialised model, checked in train mode with fixed dropout masks.
ModelCheckReport check_model_gradients(const ModelCheckConfig& config);

}  // namespace icubert
