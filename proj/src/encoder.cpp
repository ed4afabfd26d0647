#include "icubert/encoder.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <map>

#include "icubert/errors.hpp"
#include "icubert/io.hpp"

namespace icubert {

void EncoderConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || ffn_dim < 1 || max_seq_len < 1) {
        throw Error(Errc::shape_mismatch, "encoder dimensions must be >= 1");
    }
    if (hidden % heads != 0) throw Error(Errc::shape_mismatch, "hidden size must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(Errc::shape_mismatch, "dropout must lie in [0, 1)");
}

void ModelConfig::validate() const {
    encoder.validate();
    if (embedder.hidden != encoder.hidden) throw Error(Errc::shape_mismatch, "embedder and encoder widths differ");
    if (embedder.pretrained_dim < 1 || embedder.window_minutes < 1) {
        throw Error(Errc::shape_mismatch, "embedder dimensions must be >= 1");
    }
    if (!(embedder.dropout >= 0.0 && embedder.dropout < 1.0)) throw Error(Errc::shape_mismatch, "bad embedder dropout");
    if (heads.mode == HeadMode::pretrain) {
        if (heads.feature_vocab < 1 || heads.value_vocab < 1) throw Error(Errc::shape_mismatch, "empty vocabularies");
    } else {
        if (heads.task_outputs < 1) throw Error(Errc::shape_mismatch, "task head needs outputs");
        if (!(heads.task_dropout >= 0.0 && heads.task_dropout < 1.0)) throw Error(Errc::shape_mismatch, "bad task dropout");
    }
}

bool compatible(const ModelConfig& a, const ModelConfig& b) {
    const auto& ea = a.encoder;
    const auto& eb = b.encoder;
    return ea.layers == eb.layers && ea.hidden == eb.hidden && ea.heads == eb.heads && ea.ffn_dim == eb.ffn_dim &&
           a.embedder.pretrained_dim == b.embedder.pretrained_dim &&
           a.embedder.window_minutes == b.embedder.window_minutes && a.heads.mode == b.heads.mode &&
           (a.heads.mode == HeadMode::pretrain
                ? a.heads.feature_vocab == b.heads.feature_vocab && a.heads.value_vocab == b.heads.value_vocab
                : a.heads.task_outputs == b.heads.task_outputs);
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams<T> p;
    p.config = config;
    Rng rng(derive_seed(seed, 0xE17B));
    p.embedder = init_embedder<T>(config.embedder, rng);
    const int d = config.encoder.hidden;
    for (int l = 0; l < config.encoder.layers; ++l) {
        EncoderLayerParams<T> layer;
        layer.query = init_affine<T>(d, d, rng);
        layer.key = init_affine<T>(d, d, rng);
        layer.value = init_affine<T>(d, d, rng);
        layer.output = init_affine<T>(d, d, rng);
        layer.attention_norm = init_layer_norm<T>(d);
        layer.ffn_in = init_affine<T>(d, config.encoder.ffn_dim, rng);
        layer.ffn_out = init_affine<T>(config.encoder.ffn_dim, d, rng);
        layer.ffn_norm = init_layer_norm<T>(d);
        p.layers.push_back(std::move(layer));
    }
    if (config.heads.mode == HeadMode::pretrain) {
        p.heads.feature = init_affine<T>(d, config.heads.feature_vocab, rng);
        p.heads.cat_value = init_affine<T>(d, config.heads.value_vocab, rng);
        p.heads.cont_value = init_affine<T>(d, 1, rng);
    } else {
        p.heads.task = init_affine<T>(d, config.heads.task_outputs, rng);
    }
    return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& params) {
    ModelParams<T> z = params;
    z.visit([](const std::string&, Mat<T>& m) { m.setZero(); });
    return z;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
    ModelParams<To> out = init_model<To>(params.config, 0);
    std::vector<const Mat<From>*> src;
    params.visit([&](const std::string&, const Mat<From>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<To>& m) { m = src[i++]->template cast<To>(); });
    return out;
}

template <typename T>
void install_task_head(ModelParams<T>& params, int outputs, double dropout, std::uint64_t seed) {
    params.config.heads.mode = HeadMode::finetune;
    params.config.heads.task_outputs = outputs;
    params.config.heads.task_dropout = dropout;
    params.config.validate();
    params.heads = HeadParams<T>{};
    Rng rng(derive_seed(seed, 0x7A5C));
    params.heads.task = init_affine<T>(params.config.encoder.hidden, outputs, rng);
}

namespace {

template <typename T>
void softmax_rows_masked(Mat<T>& s, std::span<const std::uint8_t> mask) {
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        T max = neg_inf;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (mask[static_cast<std::size_t>(j)] == 0) {
                s(i, j) = neg_inf;
            } else {
                max = std::max(max, s(i, j));
            }
        }
        if (max == neg_inf) {
            s.row(i).setZero();
            continue;
        }
        T sum = 0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            const T e = mask[static_cast<std::size_t>(j)] == 0 ? T(0) : std::exp(s(i, j) - max);
            s(i, j) = e;
            sum += e;
        }
        s.row(i) /= sum;
    }
}

}  // namespace

template <typename T>
Mat<T> encoder_forward(const ModelParams<T>& params, const Mat<T>& x, std::span<const std::uint8_t> mask, Mode mode,
                       Rng* rng, EncoderCache<T>* cache) {
    const EncoderConfig& cfg = params.config.encoder;
    const Eigen::Index n = x.rows();
    if (x.cols() != cfg.hidden) throw Error(Errc::shape_mismatch, "input width differs from hidden size");
    if (static_cast<Eigen::Index>(mask.size()) != n) throw Error(Errc::shape_mismatch, "mask length differs from sequence");
    if (n > cfg.max_seq_len) throw Error(Errc::shape_mismatch, "sequence longer than max_seq_len");

    const int heads = cfg.heads;
    const int dh = cfg.hidden / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    if (cache) {
        cache->mask.assign(mask.begin(), mask.end());
        cache->layers.assign(params.layers.size(), {});
    }

    Mat<T> h = x;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& p = params.layers[l];
        LayerCache<T> local;
        LayerCache<T>& c = cache ? cache->layers[l] : local;

        c.input = h;
        c.q = affine_forward(p.query, h);
        c.k = affine_forward(p.key, h);
        c.v = affine_forward(p.value, h);
        c.context.resize(n, cfg.hidden);
        c.attention.resize(static_cast<std::size_t>(heads));
        for (int a = 0; a < heads; ++a) {
            Mat<T> s = (c.q.middleCols(a * dh, dh) * c.k.middleCols(a * dh, dh).transpose()) * scale;
            softmax_rows_masked(s, mask);
            c.context.middleCols(a * dh, dh).noalias() = s * c.v.middleCols(a * dh, dh);
            c.attention[static_cast<std::size_t>(a)] = std::move(s);
        }
        Mat<T> attn = affine_forward(p.output, c.context);
        c.dropout1 = dropout_mask<T>(n, cfg.hidden, cfg.dropout, mode, rng);
        apply_mask(attn, c.dropout1);
        c.hidden1 = layer_norm_forward(p.attention_norm, Mat<T>(h + attn), &c.norm1);

        c.pre_activation = affine_forward(p.ffn_in, c.hidden1);
        c.activation = c.pre_activation.unaryExpr([](T v) { return gelu(v); });
        Mat<T> ffn = affine_forward(p.ffn_out, c.activation);
        c.dropout2 = dropout_mask<T>(n, cfg.hidden, cfg.dropout, mode, rng);
        apply_mask(ffn, c.dropout2);
        h = layer_norm_forward(p.ffn_norm, Mat<T>(c.hidden1 + ffn), &c.norm2);
    }
    return h;
}

template <typename T>
Mat<T> encoder_backward(const ModelParams<T>& params, const EncoderCache<T>& cache, const Mat<T>& dy,
                        ModelParams<T>& grad, int first_layer) {
    const EncoderConfig& cfg = params.config.encoder;
    const int heads = cfg.heads;
    const int dh = cfg.hidden / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat<T> d = dy;
    for (int l = static_cast<int>(params.layers.size()) - 1; l >= first_layer; --l) {
        const auto& p = params.layers[static_cast<std::size_t>(l)];
        auto& g = grad.layers[static_cast<std::size_t>(l)];
        const LayerCache<T>& c = cache.layers[static_cast<std::size_t>(l)];

        // Feed-forward sublayer.
        Mat<T> dz2 = layer_norm_backward(p.ffn_norm, c.norm2, d, g.ffn_norm);
        Mat<T> dffn = dz2;
        apply_mask(dffn, c.dropout2);
        Mat<T> dact = affine_backward(p.ffn_out, c.activation, dffn, g.ffn_out);
        Mat<T> dpre = dact.cwiseProduct(c.pre_activation.unaryExpr([](T v) { return gelu_grad(v); }));
        Mat<T> dh1 = dz2 + affine_backward(p.ffn_in, c.hidden1, dpre, g.ffn_in);

        // Attention sublayer.
        Mat<T> dz1 = layer_norm_backward(p.attention_norm, c.norm1, dh1, g.attention_norm);
        Mat<T> dattn = dz1;
        apply_mask(dattn, c.dropout1);
        Mat<T> dcontext = affine_backward(p.output, c.context, dattn, g.output);

        Mat<T> dq(c.q.rows(), c.q.cols());
        Mat<T> dk(c.k.rows(), c.k.cols());
        Mat<T> dv(c.v.rows(), c.v.cols());
        for (int a = 0; a < heads; ++a) {
            const Mat<T>& A = c.attention[static_cast<std::size_t>(a)];
            const auto dctx = dcontext.middleCols(a * dh, dh);
            Mat<T> dA = dctx * c.v.middleCols(a * dh, dh).transpose();
            dv.middleCols(a * dh, dh).noalias() = A.transpose() * dctx;
            Mat<T> dS = A.cwiseProduct(dA);
            const auto row_dot = dS.rowwise().sum().eval();
            dS.noalias() -= (A.array().colwise() * row_dot.array()).matrix();
            dS *= scale;
            dq.middleCols(a * dh, dh).noalias() = dS * c.k.middleCols(a * dh, dh);
            dk.middleCols(a * dh, dh).noalias() = dS.transpose() * c.q.middleCols(a * dh, dh);
        }
        d = dz1;
        d += affine_backward(p.query, c.input, dq, g.query);
        d += affine_backward(p.key, c.input, dk, g.key);
        d += affine_backward(p.value, c.input, dv, g.value);
    }
    return d;
}

template <typename T>
std::vector<Mat<T>> forward(const ModelParams<T>& params, const std::vector<Mat<T>>& batch,
                            const std::vector<std::vector<std::uint8_t>>& masks, Mode mode, Rng* rng) {
    if (batch.size() != masks.size()) throw Error(Errc::shape_mismatch, "batch and mask counts differ");
    std::vector<Mat<T>> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) out.push_back(encoder_forward(params, batch[b], masks[b], mode, rng));
    return out;
}

template <typename T>
MlvmOutputs<T> mlvm_outputs(const ModelParams<T>& params, const Mat<T>& hidden) {
    if (params.config.heads.mode != HeadMode::pretrain) throw Error(Errc::mode_mismatch, "model has a task head");
    if (hidden.cols() != params.config.encoder.hidden) throw Error(Errc::shape_mismatch, "hidden width");
    return {affine_forward(params.heads.feature, hidden), affine_forward(params.heads.cat_value, hidden),
            affine_forward(params.heads.cont_value, hidden)};
}

template <typename T>
Mat<T> mlvm_heads_backward(const ModelParams<T>& params, const Mat<T>& hidden, const MlvmOutputs<T>& d_outputs,
                           ModelParams<T>& grad) {
    Mat<T> d = affine_backward(params.heads.feature, hidden, d_outputs.feature_logits, grad.heads.feature);
    d += affine_backward(params.heads.cat_value, hidden, d_outputs.cat_logits, grad.heads.cat_value);
    d += affine_backward(params.heads.cont_value, hidden, d_outputs.cont, grad.heads.cont_value);
    return d;
}

template <typename T>
Mat<T> cls_output(const std::vector<Mat<T>>& hidden) {
    if (hidden.empty()) return {};
    Mat<T> out(static_cast<Eigen::Index>(hidden.size()), hidden.front().cols());
    for (std::size_t b = 0; b < hidden.size(); ++b) {
        if (hidden[b].rows() < 1 || hidden[b].cols() != out.cols()) throw Error(Errc::shape_mismatch, "hidden shape");
        out.row(static_cast<Eigen::Index>(b)) = hidden[b].row(0);
    }
    return out;
}

template <typename T>
Mat<T> task_forward(const ModelParams<T>& params, const Mat<T>& cls, Mode mode, Rng* rng, TaskHeadCache<T>* cache) {
    if (params.config.heads.mode != HeadMode::finetune) throw Error(Errc::mode_mismatch, "model has no task head");
    Mat<T> x = cls;
    Mat<T> drop = dropout_mask<T>(x.rows(), x.cols(), params.config.heads.task_dropout, mode, rng);
    apply_mask(x, drop);
    Mat<T> y = affine_forward(params.heads.task, x);
    if (cache) {
        cache->input = std::move(x);
        cache->dropout = std::move(drop);
    }
    return y;
}

template <typename T>
Mat<T> task_backward(const ModelParams<T>& params, const TaskHeadCache<T>& cache, const Mat<T>& d_logits,
                     ModelParams<T>& grad) {
    Mat<T> d = affine_backward(params.heads.task, cache.input, d_logits, grad.heads.task);
    apply_mask(d, cache.dropout);
    return d;
}

#define ICUBERT_INSTANTIATE_ENCODER(T)                                                                               \
    template struct ModelParams<T>;                                                                                  \
    template ModelParams<T> init_model<T>(const ModelConfig&, std::uint64_t);                                        \
    template ModelParams<T> zeros_like<T>(const ModelParams<T>&);                                                    \
    template void install_task_head<T>(ModelParams<T>&, int, double, std::uint64_t);                                 \
    template Mat<T> encoder_forward<T>(const ModelParams<T>&, const Mat<T>&, std::span<const std::uint8_t>, Mode,    \
                                       Rng*, EncoderCache<T>*);                                                      \
    template Mat<T> encoder_backward<T>(const ModelParams<T>&, const EncoderCache<T>&, const Mat<T>&,                \
                                        ModelParams<T>&, int);                                                       \
    template std::vector<Mat<T>> forward<T>(const ModelParams<T>&, const std::vector<Mat<T>>&,                       \
                                            const std::vector<std::vector<std::uint8_t>>&, Mode, Rng*);              \
    template MlvmOutputs<T> mlvm_outputs<T>(const ModelParams<T>&, const Mat<T>&);                                   \
    template Mat<T> mlvm_heads_backward<T>(const ModelParams<T>&, const Mat<T>&, const MlvmOutputs<T>&,              \
                                           ModelParams<T>&);                                                         \
    template Mat<T> cls_output<T>(const std::vector<Mat<T>>&);                                                       \
    template Mat<T> task_forward<T>(const ModelParams<T>&, const Mat<T>&, Mode, Rng*, TaskHeadCache<T>*);            \
    template Mat<T> task_backward<T>(const ModelParams<T>&, const TaskHeadCache<T>&, const Mat<T>&, ModelParams<T>&);

ICUBERT_INSTANTIATE_ENCODER(float)
ICUBERT_INSTANTIATE_ENCODER(double)

template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "ICUB1";
constexpr std::uint32_t kConfigVersion = 1;

void put_f64(ByteWriter& w, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    w.put_u32(static_cast<std::uint32_t>(bits & 0xFFFFFFFFu));
    w.put_u32(static_cast<std::uint32_t>(bits >> 32));
}

bool get_f64(ByteReader& r, double& v) {
    std::uint32_t lo = 0;
    std::uint32_t hi = 0;
    if (!r.get_u32(lo) || !r.get_u32(hi)) return false;
    v = std::bit_cast<double>(static_cast<std::uint64_t>(hi) << 32 | lo);
    return true;
}

[[noreturn]] void truncated() { throw Error(Errc::format_error, "checkpoint truncated"); }

}  // namespace

std::string encode_checkpoint(const ModelParams<float>& params) {
    const ModelConfig& c = params.config;
    ByteWriter w;
    w.put_bytes(kCheckpointMagic);
    w.put_u32(kConfigVersion);
    for (int v : {c.encoder.layers, c.encoder.hidden, c.encoder.heads, c.encoder.ffn_dim, c.encoder.max_seq_len,
                  c.embedder.pretrained_dim, c.embedder.window_minutes, static_cast<int>(c.heads.mode),
                  c.heads.feature_vocab, c.heads.value_vocab, c.heads.task_outputs}) {
        w.put_u32(static_cast<std::uint32_t>(v));
    }
    put_f64(w, c.encoder.dropout);
    put_f64(w, c.embedder.dropout);
    put_f64(w, c.heads.task_dropout);

    std::uint32_t count = 0;
    params.visit([&](const std::string&, const Mat<float>&) { ++count; });
    w.put_u32(count);
    params.visit([&](const std::string& name, const Mat<float>& m) {
        w.put_u32(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name);
        w.put_u32(2);
        w.put_u32(static_cast<std::uint32_t>(m.rows()));
        w.put_u32(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) w.put_f32(m.data()[i]);
    });
    return w.bytes();
}

ModelParams<float> decode_checkpoint(std::string_view bytes) {
    ByteReader r(bytes);
    std::string_view magic;
    if (!r.get_bytes(kCheckpointMagic.size(), magic) || magic != kCheckpointMagic) {
        throw Error(Errc::format_error, "checkpoint: bad magic");
    }
    std::uint32_t version = 0;
    if (!r.get_u32(version)) truncated();
    if (version != kConfigVersion) throw Error(Errc::format_error, "checkpoint: unsupported config version");

    std::uint32_t f[11];
    for (auto& v : f) {
        if (!r.get_u32(v)) truncated();
    }
    ModelConfig c;
    c.encoder.layers = static_cast<int>(f[0]);
    c.encoder.hidden = static_cast<int>(f[1]);
    c.encoder.heads = static_cast<int>(f[2]);
    c.encoder.ffn_dim = static_cast<int>(f[3]);
    c.encoder.max_seq_len = static_cast<int>(f[4]);
    c.embedder.pretrained_dim = static_cast<int>(f[5]);
    c.embedder.window_minutes = static_cast<int>(f[6]);
    c.embedder.hidden = c.encoder.hidden;
    if (f[7] > 1) throw Error(Errc::format_error, "checkpoint: bad head mode");
    c.heads.mode = static_cast<HeadMode>(f[7]);
    c.heads.feature_vocab = static_cast<int>(f[8]);
    c.heads.value_vocab = static_cast<int>(f[9]);
    c.heads.task_outputs = static_cast<int>(f[10]);
    if (!get_f64(r, c.encoder.dropout) || !get_f64(r, c.embedder.dropout) || !get_f64(r, c.heads.task_dropout)) {
        truncated();
    }
    for (std::uint32_t v : f) {
        if (v > (1u << 24)) throw Error(Errc::format_error, "checkpoint: implausible config value");
    }
    try {
        c.validate();
    } catch (const Error& e) {
        throw Error(Errc::format_error, "checkpoint: invalid config (" + e.reason() + ")");
    }

    // Shapes come from a skeleton of the stored config; every value is overwritten below.
    ModelParams<float> params = init_model<float>(c, 0);
    std::map<std::string, Mat<float>*> slots;
    params.visit([&](const std::string& name, Mat<float>& m) { slots.emplace(name, &m); });

    std::uint32_t count = 0;
    if (!r.get_u32(count)) truncated();
    if (count != slots.size()) throw Error(Errc::format_error, "checkpoint: parameter count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = 0;
        std::string_view name;
        if (!r.get_u32(len) || !r.get_bytes(len, name)) truncated();
        auto it = slots.find(std::string(name));
        if (it == slots.end()) throw Error(Errc::format_error, "checkpoint: unknown parameter " + std::string(name));
        Mat<float>& m = *it->second;
        std::uint32_t rank = 0;
        std::uint32_t rows = 0;
        std::uint32_t cols = 0;
        if (!r.get_u32(rank)) truncated();
        if (rank != 2) throw Error(Errc::format_error, "checkpoint: unsupported rank");
        if (!r.get_u32(rows) || !r.get_u32(cols)) truncated();
        if (rows != m.rows() || cols != m.cols()) {
            throw Error(Errc::format_error, "checkpoint: shape mismatch for " + std::string(name));
        }
        if (r.remaining() / 4 < static_cast<std::size_t>(m.size())) truncated();
        for (Eigen::Index k = 0; k < m.size(); ++k) r.get_f32(m.data()[k]);
        slots.erase(it);
    }
    if (!r.at_end()) throw Error(Errc::format_error, "checkpoint: trailing bytes");
    return params;
}

void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
    write_file_atomic(path, encode_checkpoint(params));
}

ModelParams<float> load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

ModelParams<float> load_checkpoint(const std::string& path, const ModelConfig& expected) {
    ModelParams<float> params = load_checkpoint(path);
    if (!compatible(params.config, expected)) {
        const auto& a = params.config.encoder;
        const auto& b = expected.encoder;
        throw Error(Errc::config_mismatch,
                    "checkpoint (layers " + std::to_string(a.layers) + ", hidden " + std::to_string(a.hidden) +
                        ") does not match expected (layers " + std::to_string(b.layers) + ", hidden " +
                        std::to_string(b.hidden) + ")");
    }
    return params;
}

}  // namespace icubert
