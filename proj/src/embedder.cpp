#include "icubert/embedder.hpp"

#include "icubert/errors.hpp"

namespace icubert {

template <typename T>
EmbedderParams<T> init_embedder(const EmbedderConfig& config, Rng& rng) {
    const int D = config.pretrained_dim;
    const int d = config.hidden;
    const int W = config.window_minutes;
    if (D < 1 || d < 1 || W < 1) throw Error(Errc::shape_mismatch, "embedder dimensions must be positive");
    EmbedderParams<T> p;
    p.feature_proj = init_affine<T>(D, d, rng);
    p.value_proj = init_affine<T>(D, d, rng);
    p.time_table = init_normal<T>(W, d, 0.02, rng);
    p.duration_table = init_normal<T>(W, d, 0.02, rng);
    p.special_features = init_normal<T>(3, D, 1.0 / std::sqrt(static_cast<double>(D)), rng);
    p.special_values = init_normal<T>(3, D, 1.0 / std::sqrt(static_cast<double>(D)), rng);
    p.norm = init_layer_norm<T>(d);
    return p;
}

namespace {

template <typename T>
void set_row(Mat<T>& m, int row, const PretrainedVector& v) {
    for (int c = 0; c < v.dim(); ++c) m(row, c) = static_cast<T>(v.values[static_cast<std::size_t>(c)]);
}

}  // namespace

template <typename T>
EmbedderInput<T> prepare_input(const WindowSequence& seq, const EmbeddingProvider& provider, int rows) {
    const int n = rows < 0 ? static_cast<int>(seq.tokens.size()) : rows;
    const int D = provider.dim();
    EmbedderInput<T> in;
    in.feature_pre = Mat<T>::Zero(n, D);
    in.value_pre = Mat<T>::Zero(n, D);
    in.feature_special.assign(static_cast<std::size_t>(n), -1);
    in.value_special.assign(static_cast<std::size_t>(n), -1);
    in.tau.resize(static_cast<std::size_t>(n));
    in.delta.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Token& t = seq.tokens[static_cast<std::size_t>(i)];
        const auto ui = static_cast<std::size_t>(i);
        in.tau[ui] = t.tau_minutes;
        in.delta[ui] = t.delta_minutes;
        if (t.is_pad()) {
            in.feature_special[ui] = static_cast<int>(Special::pad);
            in.value_special[ui] = static_cast<int>(Special::pad);
            continue;
        }
        const PreEmbedding f = feature_pre_embedding(t, provider);
        if (f.special) {
            in.feature_special[ui] = static_cast<int>(*f.special);
        } else {
            set_row(in.feature_pre, i, f.vector);
        }
        const PreEmbedding x = value_pre_embedding(t, provider);
        if (x.special) {
            in.value_special[ui] = static_cast<int>(*x.special);
        } else {
            set_row(in.value_pre, i, x.vector);
        }
    }
    return in;
}

template <typename T>
Mat<T> embedder_forward(const EmbedderParams<T>& params, const EmbedderConfig& config, EmbedderInput<T> input,
                        Mode mode, Rng* rng, EmbedderCache<T>* cache, EmbedOptions options) {
    const int n = input.rows();
    const int W = config.window_minutes;
    if (input.feature_pre.cols() != params.feature_proj.in() || input.value_pre.cols() != params.value_proj.in()) {
        throw Error(Errc::shape_mismatch, "pre-embedding dimension does not match the projections");
    }
    for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (input.tau[ui] < 0 || input.tau[ui] >= W || input.delta[ui] < 0 || input.delta[ui] >= W) {
            throw Error(Errc::index_out_of_range, "tau/delta outside [0, " + std::to_string(W) + ")");
        }
        if (input.feature_special[ui] >= 0) input.feature_pre.row(i) = params.special_features.row(input.feature_special[ui]);
        if (input.value_special[ui] >= 0) input.value_pre.row(i) = params.special_values.row(input.value_special[ui]);
    }

    Mat<T> e = affine_forward(params.feature_proj, input.feature_pre);
    e.noalias() += input.value_pre * params.value_proj.weight;
    e.rowwise() += params.value_proj.bias.row(0);
    for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        e.row(i) += params.time_table.row(input.tau[ui]) + params.duration_table.row(input.delta[ui]);
    }

    Mat<T> drop = dropout_mask<T>(e.rows(), e.cols(), config.dropout, mode, rng);
    apply_mask(e, drop);

    Mat<T> y;
    LayerNormCache<T> norm;
    if (options.skip_layer_norm) {
        y = e;
    } else {
        y = layer_norm_forward(params.norm, e, cache ? &norm : nullptr);
    }
    if (cache) {
        cache->input = std::move(input);
        cache->dropout = std::move(drop);
        cache->norm = std::move(norm);
        cache->skip_norm = options.skip_layer_norm;
    }
    return y;
}

template <typename T>
void embedder_backward(const EmbedderParams<T>& params, const EmbedderCache<T>& cache, const Mat<T>& dy,
                       EmbedderParams<T>& grad) {
    Mat<T> de = cache.skip_norm ? dy : layer_norm_backward(params.norm, cache.norm, dy, grad.norm);
    apply_mask(de, cache.dropout);

    const auto& in = cache.input;
    grad.feature_proj.weight.noalias() += in.feature_pre.transpose() * de;
    grad.feature_proj.bias.row(0) += de.colwise().sum();
    grad.value_proj.weight.noalias() += in.value_pre.transpose() * de;
    grad.value_proj.bias.row(0) += de.colwise().sum();
    for (int i = 0; i < in.rows(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        grad.time_table.row(in.tau[ui]) += de.row(i);
        grad.duration_table.row(in.delta[ui]) += de.row(i);
        if (in.feature_special[ui] >= 0) {
            grad.special_features.row(in.feature_special[ui]).noalias() += de.row(i) * params.feature_proj.weight.transpose();
        }
        if (in.value_special[ui] >= 0) {
            grad.special_values.row(in.value_special[ui]).noalias() += de.row(i) * params.value_proj.weight.transpose();
        }
    }
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> compose(const EmbedderParams<T>& params, const EmbedderConfig& config,
                                            const PreEmbedding& feature, const PreEmbedding& value, int tau, int delta,
                                            Mode mode, Rng* rng, EmbedOptions options) {
    const int D = params.feature_proj.in();
    EmbedderInput<T> in;
    in.feature_pre = Mat<T>::Zero(1, D);
    in.value_pre = Mat<T>::Zero(1, D);
    in.feature_special = {feature.special ? static_cast<int>(*feature.special) : -1};
    in.value_special = {value.special ? static_cast<int>(*value.special) : -1};
    in.tau = {tau};
    in.delta = {delta};
    if (!feature.special) {
        if (feature.vector.dim() != D) throw Error(Errc::shape_mismatch, "feature pre-embedding dimension");
        set_row(in.feature_pre, 0, feature.vector);
    }
    if (!value.special) {
        if (value.vector.dim() != D) throw Error(Errc::shape_mismatch, "value pre-embedding dimension");
        set_row(in.value_pre, 0, value.vector);
    }
    return embedder_forward<T>(params, config, std::move(in), mode, rng, nullptr, options).row(0);
}

template <typename T>
EmbeddedWindow<T> embed_window(const WindowSequence& seq, const EmbeddingProvider& provider,
                               const EmbedderParams<T>& params, const EmbedderConfig& config, Mode mode, Rng* rng) {
    EmbeddedWindow<T> out;
    out.embeddings = embedder_forward<T>(params, config, prepare_input<T>(seq, provider), mode, rng);
    out.mask = attention_mask(seq);
    return out;
}

#define ICUBERT_INSTANTIATE_EMBEDDER(T)                                                                            \
    template EmbedderParams<T> init_embedder<T>(const EmbedderConfig&, Rng&);                                      \
    template EmbedderInput<T> prepare_input<T>(const WindowSequence&, const EmbeddingProvider&, int);              \
    template Mat<T> embedder_forward<T>(const EmbedderParams<T>&, const EmbedderConfig&, EmbedderInput<T>, Mode,   \
                                        Rng*, EmbedderCache<T>*, EmbedOptions);                                    \
    template void embedder_backward<T>(const EmbedderParams<T>&, const EmbedderCache<T>&, const Mat<T>&,          \
                                       EmbedderParams<T>&);                                                        \
    template Eigen::Matrix<T, 1, Eigen::Dynamic> compose<T>(const EmbedderParams<T>&, const EmbedderConfig&,       \
                                                            const PreEmbedding&, const PreEmbedding&, int, int,    \
                                                            Mode, Rng*, EmbedOptions);                             \
    template EmbeddedWindow<T> embed_window<T>(const WindowSequence&, const EmbeddingProvider&,                    \
                                               const EmbedderParams<T>&, const EmbedderConfig&, Mode, Rng*);

ICUBERT_INSTANTIATE_EMBEDDER(float)
ICUBERT_INSTANTIATE_EMBEDDER(double)

}  // namespace icubert
