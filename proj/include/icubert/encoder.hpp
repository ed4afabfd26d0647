#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icubert/embedder.hpp"
#include "icubert/nn.hpp"

namespace icubert {

struct EncoderConfig {
    int layers = 6;
    int hidden = 768;
    int heads = 6;
    int ffn_dim = 64;
    int max_seq_len = kDefaultMaxSeqLen;
    double dropout = 0.1;

    void validate() const;
};

enum class HeadMode : std::uint8_t { pretrain, finetune };

struct HeadConfig {
    HeadMode mode = HeadMode::pretrain;
    int feature_vocab = 0;  // pre-train: feature head width
    int value_vocab = 0;    // pre-train: categorical value head width
    int task_outputs = 0;   // fine-tune: task head width
    double task_dropout = 0.5;
};

struct ModelConfig {
    EncoderConfig encoder;
    EmbedderConfig embedder;
    HeadConfig heads;

    // Throws ShapeMismatch on inconsistent dimensions.
    void validate() const;
};

// Structural fields only (dimensions and vocabulary sizes, not dropout rates).
bool compatible(const ModelConfig& a, const ModelConfig& b);

template <typename T>
struct EncoderLayerParams {
    Affine<T> query, key, value, output;
    LayerNormParams<T> attention_norm;
    Affine<T> ffn_in, ffn_out;
    LayerNormParams<T> ffn_norm;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        query.visit(prefix + ".query", f);
        key.visit(prefix + ".key", f);
        value.visit(prefix + ".value", f);
        output.visit(prefix + ".output", f);
        attention_norm.visit(prefix + ".attention_norm", f);
        ffn_in.visit(prefix + ".ffn_in", f);
        ffn_out.visit(prefix + ".ffn_out", f);
        ffn_norm.visit(prefix + ".ffn_norm", f);
    }
};

template <typename T>
struct HeadParams {
    Affine<T> feature;     // d -> F
    Affine<T> cat_value;   // d -> V
    Affine<T> cont_value;  // d -> 1
    Affine<T> task;        // d -> task outputs
};

// All trainable state. visit() enumerates parameters in a fixed order with
// stable names; only the heads of the active mode are included.
template <typename T>
struct ModelParams {
    ModelConfig config;
    EmbedderParams<T> embedder;
    std::vector<EncoderLayerParams<T>> layers;
    HeadParams<T> heads;

    template <typename F>
    void visit(F&& f) {
        embedder.visit("embedder", f);
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit("encoder." + std::to_string(i), f);
        if (config.heads.mode == HeadMode::pretrain) {
            heads.feature.visit("heads.feature", f);
            heads.cat_value.visit("heads.cat_value", f);
            heads.cont_value.visit("heads.cont_value", f);
        } else {
            heads.task.visit("heads.task", f);
        }
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<ModelParams*>(this)->visit([&](const std::string& name, Mat<T>& m) { f(name, static_cast<const Mat<T>&>(m)); });
    }

    std::size_t parameter_count() const;
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& params);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

// Discards the reconstruction heads and installs a freshly initialised task head.
template <typename T>
void install_task_head(ModelParams<T>& params, int outputs, double dropout, std::uint64_t seed);

template <typename T>
struct LayerCache {
    Mat<T> input, q, k, v;
    std::vector<Mat<T>> attention;  // per head, n x n, rows sum to 1 over unmasked keys
    Mat<T> context;
    Mat<T> dropout1;
    LayerNormCache<T> norm1;
    Mat<T> hidden1;
    Mat<T> pre_activation;
    Mat<T> activation;
    Mat<T> dropout2;
    LayerNormCache<T> norm2;
};

template <typename T>
struct EncoderCache {
    std::vector<std::uint8_t> mask;
    std::vector<LayerCache<T>> layers;
};

// Post-norm bidirectional encoder over one sequence (n x d). Keys with mask 0
// get -inf attention logits.
template <typename T>
Mat<T> encoder_forward(const ModelParams<T>& params, const Mat<T>& x, std::span<const std::uint8_t> mask, Mode mode,
                       Rng* rng, EncoderCache<T>* cache = nullptr);

// Backpropagates through layers [first_layer, layers) and returns dL/d(input of first_layer).
template <typename T>
Mat<T> encoder_backward(const ModelParams<T>& params, const EncoderCache<T>& cache, const Mat<T>& dy,
                        ModelParams<T>& grad, int first_layer = 0);

// Batched form: one L x d matrix and mask per sequence.
template <typename T>
std::vector<Mat<T>> forward(const ModelParams<T>& params, const std::vector<Mat<T>>& batch,
                            const std::vector<std::vector<std::uint8_t>>& masks, Mode mode, Rng* rng);

template <typename T>
struct MlvmOutputs {
    Mat<T> feature_logits;  // n x F
    Mat<T> cat_logits;      // n x V
    Mat<T> cont;            // n x 1
};

// Applies the three reconstruction heads at every position. Throws ModeMismatch in fine-tune mode.
template <typename T>
MlvmOutputs<T> mlvm_outputs(const ModelParams<T>& params, const Mat<T>& hidden);

template <typename T>
Mat<T> mlvm_heads_backward(const ModelParams<T>& params, const Mat<T>& hidden, const MlvmOutputs<T>& d_outputs,
                           ModelParams<T>& grad);

// Row 0 of each sequence's final hidden states, stacked B x d.
template <typename T>
Mat<T> cls_output(const std::vector<Mat<T>>& hidden);

template <typename T>
struct TaskHeadCache {
    Mat<T> input;
    Mat<T> dropout;
};

// Task logits from a 1 x d (or B x d) CLS representation with final dropout.
template <typename T>
Mat<T> task_forward(const ModelParams<T>& params, const Mat<T>& cls, Mode mode, Rng* rng,
                    TaskHeadCache<T>* cache = nullptr);

template <typename T>
Mat<T> task_backward(const ModelParams<T>& params, const TaskHeadCache<T>& cache, const Mat<T>& d_logits,
                     ModelParams<T>& grad);

// "ICUB1", config block, u32 parameter count, then per parameter: u32 name
// length, name, u32 rank, rank x u32 dims, little-endian f32 values.
std::string encode_checkpoint(const ModelParams<float>& params);
ModelParams<float> decode_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelParams<float>& params, const std::string& path);
ModelParams<float> load_checkpoint(const std::string& path);
// Throws ConfigMismatch when the stored model is structurally incompatible with `expected`.
ModelParams<float> load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace icubert
