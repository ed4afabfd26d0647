#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icubert/nn.hpp"
#include "icubert/text_embed.hpp"
#include "icubert/types.hpp"

namespace icubert {

struct EmbedderConfig {
    int pretrained_dim = kDefaultPretrainedDim;
    int hidden = 768;
    int window_minutes = kDefaultWindowMinutes;
    double dropout = 0.1;
};

// Learned parameters of the multi-token embedding: two dense projections of
// the frozen text vectors, minute-level time and duration tables, learned
// pre-embeddings for the special tokens, and the output layer norm.
template <typename T>
struct EmbedderParams {
    Affine<T> feature_proj;    // D_pre -> d
    Affine<T> value_proj;      // D_pre -> d
    Mat<T> time_table;         // W x d, indexed by tau
    Mat<T> duration_table;     // W x d, indexed by delta
    Mat<T> special_features;   // 3 x D_pre, row = Special
    Mat<T> special_values;     // 3 x D_pre, row = Special
    LayerNormParams<T> norm;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        feature_proj.visit(prefix + ".feature_proj", f);
        value_proj.visit(prefix + ".value_proj", f);
        f(prefix + ".time_table", time_table);
        f(prefix + ".duration_table", duration_table);
        f(prefix + ".special_features", special_features);
        f(prefix + ".special_values", special_values);
        norm.visit(prefix + ".norm", f);
    }
};

template <typename T>
EmbedderParams<T> init_embedder(const EmbedderConfig& config, Rng& rng);

// Token inputs resolved against a provider. Rows whose special index is >= 0
// take the learned special vector instead of the stored pre-embedding.
template <typename T>
struct EmbedderInput {
    Mat<T> feature_pre;
    Mat<T> value_pre;
    std::vector<int> feature_special;
    std::vector<int> value_special;
    std::vector<int> tau;
    std::vector<int> delta;

    int rows() const { return static_cast<int>(tau.size()); }
};

// Resolves the first `rows` tokens (all when rows < 0).
template <typename T>
EmbedderInput<T> prepare_input(const WindowSequence& seq, const EmbeddingProvider& provider, int rows = -1);

template <typename T>
struct EmbedderCache {
    EmbedderInput<T> input;
    Mat<T> dropout;
    LayerNormCache<T> norm;
    bool skip_norm = false;
};

struct EmbedOptions {
    // Test hook: returns the dropped-out sum without layer normalization.
    bool skip_layer_norm = false;
};

template <typename T>
Mat<T> embedder_forward(const EmbedderParams<T>& params, const EmbedderConfig& config, EmbedderInput<T> input,
                        Mode mode, Rng* rng, EmbedderCache<T>* cache = nullptr, EmbedOptions options = {});

template <typename T>
void embedder_backward(const EmbedderParams<T>& params, const EmbedderCache<T>& cache, const Mat<T>& dy,
                       EmbedderParams<T>& grad);

// e = LN(dropout(W_f PreE_f + b_f + W_x PreE_x + b_x + time[tau] + duration[delta])) for one token.
template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> compose(const EmbedderParams<T>& params, const EmbedderConfig& config,
                                            const PreEmbedding& feature, const PreEmbedding& value, int tau, int delta,
                                            Mode mode, Rng* rng, EmbedOptions options = {});

template <typename T>
struct EmbeddedWindow {
    Mat<T> embeddings;                 // L x d
    std::vector<std::uint8_t> mask;    // 1 real, 0 PAD
};

// Embeds an already truncated/padded window; every row including PAD is composed.
template <typename T>
EmbeddedWindow<T> embed_window(const WindowSequence& seq, const EmbeddingProvider& provider,
                               const EmbedderParams<T>& params, const EmbedderConfig& config, Mode mode, Rng* rng);

}  // namespace icubert
