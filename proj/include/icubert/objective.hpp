#pragma once

#include <string_view>
#include <vector>

#include "icubert/encoder.hpp"
#include "icubert/mlvm.hpp"

namespace icubert {

struct LossBreakdown {
    double feature_loss = 0.0;  // L_f
    double cat_loss = 0.0;      // L_cat
    double cont_loss = 0.0;     // L_cont
    int feature_count = 0;
    int cat_count = 0;          // N_cat
    int cont_count = 0;         // N_cont
    double total = 0.0;
    double alpha = 3.0;
    double beta = 1.0;
};

enum class FeatureNormalization {
    masked_slots,  // mean over masked feature slots
    all_tokens,    // sum divided by every token in the batch
};

struct LossWeights {
    double alpha = 3.0;
    double beta = 1.0;
    FeatureNormalization feature_norm = FeatureNormalization::masked_slots;
};

// L_f + beta * (L_cat * N_cat + alpha * L_cont * N_cont) / (N_cat + N_cont);
// an empty value term contributes 0.
double combine_losses(double feature_loss, double cat_loss, int cat_count, double cont_loss, int cont_count,
                      double alpha, double beta);

// Cross-entropy over masked feature slots and masked categorical values, MAE
// over masked continuous values, combined as above. Slots whose feature is
// outside the vocabulary carry no feature target. When `grads` is given it
// receives dL_total/d(outputs), shaped like `outputs`.
template <typename T>
LossBreakdown mlvm_loss(const std::vector<MlvmOutputs<T>>& outputs, const std::vector<MaskingPlan>& plans,
                        const LossWeights& weights = {}, std::vector<MlvmOutputs<T>>* grads = nullptr);

enum class TaskKind { binary, multilabel, regression };

TaskKind parse_task_kind(std::string_view text);
std::string_view task_kind_name(TaskKind kind) noexcept;

struct ClassWeight {
    double positive = 1.0;
    double negative = 1.0;
};

// predictions/labels are B x k. Binary and multi-label use weighted BCE on
// logits (mean over all entries); regression uses MAE. `weights` holds one
// entry per output column or a single broadcast entry.
template <typename T>
double finetune_loss(TaskKind kind, const Mat<T>& predictions, const Mat<T>& labels,
                     const std::vector<ClassWeight>& weights = {}, Mat<T>* grad = nullptr);

}  // namespace icubert
