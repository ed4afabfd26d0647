#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icubert/encoder.hpp"
#include "icubert/ingest.hpp"
#include "icubert/metrics.hpp"
#include "icubert/mlvm.hpp"
#include "icubert/objective.hpp"
#include "icubert/tokenizer.hpp"

namespace icubert {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double lr = 5e-5;
    double weight_decay = 0.0;
    int warmup_epochs = -1;  // -1: 40% of epochs
    int patience = 10;
    std::uint64_t seed = 0;
    int unfrozen_layers = 5;
    bool unfreeze_embedder = false;
    int folds = 5;
    int threads = 1;
    // Positive-class weight; nullopt uses N_neg / N_pos of the training fold.
    std::optional<double> class_weight;
    LossWeights loss;
    MaskingRates masking;

    // Throws InvalidSpec for non-positive counts or learning rate.
    void validate() const;
    int resolved_warmup_epochs() const;
};

// A corrupted window (PAD removed) and the plan that produced it.
struct MaskedWindow {
    WindowSequence tokens;
    MaskingPlan plan;
};

// Truncates to max_seq_len and drops the PAD suffix. PAD rows are masked as
// keys and never read, so the encoder output at real rows is unchanged.
WindowSequence trim_window(WindowSequence seq, int max_seq_len);

// Segments every stay of `split`, keeping windows with at least one maskable token.
std::vector<WindowSequence> split_windows(const Corpus& corpus, Split split, const TokenizerConfig& tokenizer,
                                          const Vocabularies& vocab);

// Forward, loss and (when grad is given) backward over one pre-training batch.
// Sequence b draws its dropout masks from Rng(dropout_seeds[b]).
template <typename T>
LossBreakdown mlvm_batch(const ModelParams<T>& params, const std::vector<MaskedWindow>& batch,
                         const EmbeddingProvider& provider, const LossWeights& weights, Mode mode,
                         std::span<const std::uint64_t> dropout_seeds, ModelParams<T>* grad, int threads = 1,
                         std::vector<MlvmOutputs<T>>* outputs = nullptr);

// Weighted by slot counts, as if both parts were one batch.
LossBreakdown merge(const LossBreakdown& a, const LossBreakdown& b, const LossWeights& weights);

struct EpochRecord {
    int epoch = 0;
    LossBreakdown train;
    LossBreakdown val;
    double lr = 0.0;
    double val_feature_accuracy = 0.0;
};

struct PretrainResult {
    ModelParams<float> best;
    int best_epoch = 0;
    std::vector<EpochRecord> log;
    // Share of the most frequent target among masked validation feature slots.
    double majority_baseline = 0.0;
};

// Completes head widths and pre-embedding size from the vocabulary and provider.
ModelConfig resolve_model_config(ModelConfig config, const Vocabularies& vocab, const EmbeddingProvider& provider,
                                 const TokenizerConfig& tokenizer);

// Throws DivergedLoss when a batch loss or an updated parameter is non-finite.
PretrainResult pretrain(const Corpus& corpus, const Vocabularies& vocab, const EmbeddingProvider& provider,
                        const ModelConfig& model, const TokenizerConfig& tokenizer, const TrainConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

std::string loss_log_header();
// Two rows (train, val): epoch,split,L_f,L_cat,L_cont,L_total,lr
std::string loss_log_rows(const EpochRecord& record);

struct TaskSpec {
    std::string name = "task";
    TaskKind kind = TaskKind::binary;
    int outputs = 1;
    // Leading windows whose CLS outputs are averaged per stay.
    int windows_per_sample = 1;
    std::map<std::string, std::vector<double>> labels;  // stay_id -> targets
};

struct TaskSample {
    std::string stay_id;
    std::string patient_id;
    std::vector<WindowSequence> windows;
    std::vector<double> label;
};

std::vector<TaskSample> task_samples(const Corpus& corpus, Split split, const TokenizerConfig& tokenizer,
                                     const Vocabularies& vocab, const TaskSpec& task);

// Task logits (B x k) for the given samples; with `grad`, also backpropagates
// the loss through the head and encoder layers [first_layer, layers), plus the
// embedder when first_layer is 0 and `embedder` is set.
template <typename T>
double task_batch(const ModelParams<T>& params, const std::vector<const TaskSample*>& batch,
                  const EmbeddingProvider& provider, TaskKind kind, const std::vector<ClassWeight>& weights, Mode mode,
                  std::uint64_t seed, ModelParams<T>* grad, int first_layer, bool embedder, Mat<T>* logits = nullptr,
                  int threads = 1);

struct FinetuneEpoch {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct FoldResult {
    ModelParams<float> model;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    std::vector<FinetuneEpoch> log;
    MetricReport test;
};

struct FinetuneResult {
    MetricReport report;
    std::vector<FoldResult> folds;
    std::size_t best_fold = 0;  // lowest validation loss
};

// Parameter names updated during fine-tuning.
std::function<bool(const std::string&)> finetune_filter(int layers, int unfrozen_layers, bool unfreeze_embedder);

// Throws ConfigMismatch when the checkpoint disagrees with the vocabulary,
// provider or tokenizer, and MissingLabels when a required split has no labels.
FinetuneResult finetune(const ModelParams<float>& pretrained, const Corpus& corpus, const Vocabularies& vocab,
                        const EmbeddingProvider& provider, const TokenizerConfig& tokenizer, const TaskSpec& task,
                        const TrainConfig& config, double task_dropout = 0.5,
                        const std::function<void(int fold, const FinetuneEpoch&)>& on_epoch = {});

// Metrics of a fine-tuned model on one split.
MetricReport evaluate(const ModelParams<float>& model, const Corpus& corpus, const Vocabularies& vocab,
                      const EmbeddingProvider& provider, const TokenizerConfig& tokenizer, const TaskSpec& task,
                      Split split = Split::test, int threads = 1);

// Metrics for one fold: AUROC/AUPRC (macro over outputs) or MAE.
MetricReport score_predictions(TaskKind kind, const Mat<double>& predictions, const Mat<double>& labels);

// CSV with a header row whose first column is stay_id. `columns` selects
// targets by header name (all remaining columns when empty). Rows with an
// empty selected cell are left out.
std::map<std::string, std::vector<double>> read_labels(const std::string& path,
                                                       const std::vector<std::string>& columns = {});

}  // namespace icubert
