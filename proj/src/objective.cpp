#include "icubert/objective.hpp"

#include <cmath>

#include "icubert/errors.hpp"

namespace icubert {

double combine_losses(double feature_loss, double cat_loss, int cat_count, double cont_loss, int cont_count,
                      double alpha, double beta) {
    const int n = cat_count + cont_count;
    if (n == 0) return feature_loss;
    const double cat = cat_count > 0 ? cat_loss * cat_count : 0.0;
    const double cont = cont_count > 0 ? alpha * cont_loss * cont_count : 0.0;
    return feature_loss + beta * (cat + cont) / n;
}

namespace {

// -log softmax(row)[target]; writes softmax(row) - onehot(target), scaled, into grad_row.
template <typename T, typename Row>
double cross_entropy(const Row& row, int target, double scale, Mat<T>* grad, Eigen::Index grad_row) {
    const double max = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j)) - max);
    const double log_z = max + std::log(sum);
    const double loss = log_z - static_cast<double>(row(target));
    if (grad) {
        for (Eigen::Index j = 0; j < row.size(); ++j) {
            const double p = std::exp(static_cast<double>(row(j)) - log_z);
            (*grad)(grad_row, j) += static_cast<T>(scale * (p - (j == target ? 1.0 : 0.0)));
        }
    }
    return loss;
}

}  // namespace

template <typename T>
LossBreakdown mlvm_loss(const std::vector<MlvmOutputs<T>>& outputs, const std::vector<MaskingPlan>& plans,
                        const LossWeights& weights, std::vector<MlvmOutputs<T>>* grads) {
    if (outputs.size() != plans.size()) throw Error(Errc::shape_mismatch, "outputs and plans cover different batches");

    LossBreakdown out;
    out.alpha = weights.alpha;
    out.beta = weights.beta;
    int tokens = 0;
    for (std::size_t b = 0; b < plans.size(); ++b) {
        const auto& plan = plans[b];
        if (static_cast<Eigen::Index>(plan.slots.size()) > outputs[b].feature_logits.rows()) {
            throw Error(Errc::shape_mismatch, "plan longer than outputs");
        }
        tokens += static_cast<int>(plan.slots.size());
        out.feature_count += plan.feature_slots();
        out.cat_count += plan.categorical_slots();
        out.cont_count += plan.continuous_slots();
    }
    const int value_count = out.cat_count + out.cont_count;
    if (out.feature_count + value_count == 0) throw Error(Errc::no_masked_slots, "batch has no masked slots");

    const double f_norm = weights.feature_norm == FeatureNormalization::all_tokens ? tokens : out.feature_count;
    const double f_scale = out.feature_count > 0 ? 1.0 / f_norm : 0.0;
    const double cat_scale = out.cat_count > 0 ? 1.0 / out.cat_count : 0.0;
    const double cont_scale = out.cont_count > 0 ? 1.0 / out.cont_count : 0.0;
    // d L_total / d (per-slot loss)
    const double g_feature = f_scale;
    const double g_cat = value_count > 0 ? weights.beta / value_count : 0.0;
    const double g_cont = value_count > 0 ? weights.beta * weights.alpha / value_count : 0.0;

    if (grads) {
        grads->resize(outputs.size());
        for (std::size_t b = 0; b < outputs.size(); ++b) {
            (*grads)[b].feature_logits = Mat<T>::Zero(outputs[b].feature_logits.rows(), outputs[b].feature_logits.cols());
            (*grads)[b].cat_logits = Mat<T>::Zero(outputs[b].cat_logits.rows(), outputs[b].cat_logits.cols());
            (*grads)[b].cont = Mat<T>::Zero(outputs[b].cont.rows(), outputs[b].cont.cols());
        }
    }

    double f_sum = 0.0;
    double cat_sum = 0.0;
    double cont_sum = 0.0;
    for (std::size_t b = 0; b < plans.size(); ++b) {
        const auto& o = outputs[b];
        for (std::size_t i = 0; i < plans[b].slots.size(); ++i) {
            const SlotPlan& s = plans[b].slots[i];
            const auto row = static_cast<Eigen::Index>(i);
            if (s.mask_feature && s.feature_target) {
                f_sum += cross_entropy<T>(o.feature_logits.row(row), *s.feature_target, g_feature,
                                          grads ? &(*grads)[b].feature_logits : nullptr, row);
            }
            if (!s.mask_value) continue;
            if (s.value_is_continuous) {
                const double diff = static_cast<double>(o.cont(row, 0)) - s.value_target;
                cont_sum += std::abs(diff);
                if (grads) {
                    const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                    (*grads)[b].cont(row, 0) += static_cast<T>(g_cont * sign);
                }
            } else {
                cat_sum += cross_entropy<T>(o.cat_logits.row(row), s.value_target_index, g_cat,
                                            grads ? &(*grads)[b].cat_logits : nullptr, row);
            }
        }
    }
    out.feature_loss = f_sum * f_scale;
    out.cat_loss = cat_sum * cat_scale;
    out.cont_loss = cont_sum * cont_scale;
    out.total = combine_losses(out.feature_loss, out.cat_loss, out.cat_count, out.cont_loss, out.cont_count,
                               weights.alpha, weights.beta);
    return out;
}

TaskKind parse_task_kind(std::string_view text) {
    if (text == "binary") return TaskKind::binary;
    if (text == "multilabel") return TaskKind::multilabel;
    if (text == "regression") return TaskKind::regression;
    throw Error(Errc::unknown_task, "unknown task kind '" + std::string(text) + "'");
}

std::string_view task_kind_name(TaskKind kind) noexcept {
    switch (kind) {
        case TaskKind::binary: return "binary";
        case TaskKind::multilabel: return "multilabel";
        case TaskKind::regression: return "regression";
    }
    return "";
}

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

template <typename T>
double finetune_loss(TaskKind kind, const Mat<T>& predictions, const Mat<T>& labels,
                     const std::vector<ClassWeight>& weights, Mat<T>* grad) {
    if (predictions.rows() != labels.rows() || predictions.cols() != labels.cols() || predictions.size() == 0) {
        throw Error(Errc::shape_mismatch, "predictions and labels differ in shape");
    }
    if (kind == TaskKind::binary && predictions.cols() != 1) throw Error(Errc::shape_mismatch, "binary task needs one logit");
    if (!weights.empty() && weights.size() != 1 && static_cast<Eigen::Index>(weights.size()) != predictions.cols()) {
        throw Error(Errc::shape_mismatch, "class weights do not match outputs");
    }
    for (const auto& w : weights) {
        if (!(w.positive > 0.0) || !(w.negative > 0.0)) throw Error(Errc::shape_mismatch, "class weights must be positive");
    }
    if (grad) *grad = Mat<T>::Zero(predictions.rows(), predictions.cols());

    const double n = static_cast<double>(predictions.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < predictions.rows(); ++i) {
        for (Eigen::Index k = 0; k < predictions.cols(); ++k) {
            const double z = static_cast<double>(predictions(i, k));
            const double y = static_cast<double>(labels(i, k));
            if (kind == TaskKind::regression) {
                total += std::abs(z - y);
                if (grad) (*grad)(i, k) = static_cast<T>((z > y ? 1.0 : (z < y ? -1.0 : 0.0)) / n);
                continue;
            }
            const ClassWeight w = weights.empty() ? ClassWeight{}
                                                  : weights[weights.size() == 1 ? 0 : static_cast<std::size_t>(k)];
            // -[w+ y log s(z) + w- (1-y) log(1 - s(z))]
            double loss = 0.0;
            if (y != 0.0) loss += w.positive * y * softplus(-z);
            if (y != 1.0) loss += w.negative * (1.0 - y) * softplus(z);
            total += loss;
            if (grad) {
                const double s = sigmoid(z);
                (*grad)(i, k) = static_cast<T>((w.positive * y * (s - 1.0) + w.negative * (1.0 - y) * s) / n);
            }
        }
    }
    return total / n;
}

template LossBreakdown mlvm_loss<float>(const std::vector<MlvmOutputs<float>>&, const std::vector<MaskingPlan>&,
                                        const LossWeights&, std::vector<MlvmOutputs<float>>*);
template LossBreakdown mlvm_loss<double>(const std::vector<MlvmOutputs<double>>&, const std::vector<MaskingPlan>&,
                                         const LossWeights&, std::vector<MlvmOutputs<double>>*);
template double finetune_loss<float>(TaskKind, const Mat<float>&, const Mat<float>&, const std::vector<ClassWeight>&,
                                     Mat<float>*);
template double finetune_loss<double>(TaskKind, const Mat<double>&, const Mat<double>&,
                                      const std::vector<ClassWeight>&, Mat<double>*);

}  // namespace icubert
