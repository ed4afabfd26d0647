#include "icubert/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "icubert/errors.hpp"
#include "icubert/optim.hpp"

namespace icubert {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kMaskStream = 0x4D41;
constexpr std::uint64_t kDropoutStream = 0x4452;
constexpr std::uint64_t kValStream = 0x5641;
constexpr std::uint64_t kFoldStream = 0x464F;
constexpr std::uint64_t kHeadStream = 0x4844;

// Runs f(chunk, begin, end) over `threads` contiguous chunks of [0, n).
// Chunk boundaries depend only on (threads, n).
template <typename F>
void parallel_chunks(int threads, std::size_t n, F&& f) {
    const std::size_t chunks = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
    auto bounds = [&](std::size_t c) { return std::pair{n * c / chunks, n * (c + 1) / chunks}; };
    if (chunks == 1) {
        f(std::size_t{0}, std::size_t{0}, n);
        return;
    }
    std::vector<std::exception_ptr> errors(chunks);
    std::vector<std::thread> pool;
    for (std::size_t c = 0; c < chunks; ++c) {
        pool.emplace_back([&, c] {
            try {
                const auto [lo, hi] = bounds(c);
                f(c, lo, hi);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

std::size_t chunk_count(int threads, std::size_t n) {
    return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
}

template <typename T>
void add_into(ModelParams<T>& dst, const ModelParams<T>& src) {
    std::vector<const Mat<T>*> s;
    src.visit([&](const std::string&, const Mat<T>& m) { s.push_back(&m); });
    std::size_t i = 0;
    dst.visit([&](const std::string&, Mat<T>& m) { m += *s[i++]; });
}

template <typename T>
void set_zero(ModelParams<T>& p) {
    p.visit([](const std::string&, Mat<T>& m) { m.setZero(); });
}

template <typename T>
bool all_finite(const ModelParams<T>& p) {
    bool ok = true;
    p.visit([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
}

bool has_eligible(const WindowSequence& seq) {
    for (const Token& t : seq.tokens) {
        if (std::holds_alternative<Special>(t.value)) continue;
        if (parse_special(t.feature_text)) continue;
        return true;
    }
    return false;
}

int plan_slots(const MaskingPlan& plan) {
    return plan.feature_slots() + plan.categorical_slots() + plan.continuous_slots();
}

template <typename T>
struct WindowPass {
    EmbedderCache<T> embed;
    EncoderCache<T> encoder;
    Mat<T> hidden;
};

template <typename T>
Mat<T> encode_window(const ModelParams<T>& params, const WindowSequence& seq, const EmbeddingProvider& provider,
                     Mode mode, std::uint64_t seed, WindowPass<T>* pass) {
    Rng rng(seed);
    Mat<T> x = embedder_forward<T>(params.embedder, params.config.embedder, prepare_input<T>(seq, provider), mode, &rng,
                                   pass ? &pass->embed : nullptr);
    const auto mask = attention_mask(seq);
    return encoder_forward(params, x, mask, mode, &rng, pass ? &pass->encoder : nullptr);
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw Error(Errc::invalid_spec, "epochs must be positive");
    if (batch_size < 1) throw Error(Errc::invalid_spec, "batch size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(Errc::invalid_spec, "learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw Error(Errc::invalid_spec, "weight decay must be non-negative");
    if (patience < 1) throw Error(Errc::invalid_spec, "patience must be positive");
    if (unfrozen_layers < 0) throw Error(Errc::invalid_spec, "unfrozen layer count must be non-negative");
    if (folds < 1) throw Error(Errc::invalid_spec, "fold count must be positive");
    if (threads < 1) throw Error(Errc::invalid_spec, "thread count must be positive");
    if (warmup_epochs > epochs) throw Error(Errc::invalid_spec, "warmup exceeds the epoch count");
    if (class_weight && !(*class_weight > 0.0)) throw Error(Errc::invalid_spec, "class weight must be positive");
    masking.validate();
}

int TrainConfig::resolved_warmup_epochs() const {
    if (warmup_epochs >= 0) return warmup_epochs;
    return static_cast<int>(std::lround(0.4 * epochs));
}

WindowSequence trim_window(WindowSequence seq, int max_seq_len) {
    seq = truncate_and_pad(std::move(seq), max_seq_len);
    while (!seq.tokens.empty() && seq.tokens.back().is_pad()) seq.tokens.pop_back();
    return seq;
}

std::vector<WindowSequence> split_windows(const Corpus& corpus, Split split, const TokenizerConfig& tokenizer,
                                          const Vocabularies& vocab) {
    std::vector<WindowSequence> out;
    for (const Stay* stay : corpus.stays_in(split)) {
        for (auto& w : segment_windows(*stay, tokenizer, &vocab)) {
            auto t = trim_window(std::move(w), tokenizer.max_seq_len);
            if (has_eligible(t)) out.push_back(std::move(t));
        }
    }
    return out;
}

template <typename T>
LossBreakdown mlvm_batch(const ModelParams<T>& params, const std::vector<MaskedWindow>& batch,
                         const EmbeddingProvider& provider, const LossWeights& weights, Mode mode,
                         std::span<const std::uint64_t> dropout_seeds, ModelParams<T>* grad, int threads,
                         std::vector<MlvmOutputs<T>>* outputs) {
    if (dropout_seeds.size() != batch.size()) throw Error(Errc::shape_mismatch, "one dropout seed per sequence");
    const std::size_t n = batch.size();
    std::vector<WindowPass<T>> passes(n);
    std::vector<MlvmOutputs<T>> outs(n);
    parallel_chunks(threads, n, [&](std::size_t, std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
            passes[b].hidden = encode_window(params, batch[b].tokens, provider, mode, dropout_seeds[b],
                                             grad ? &passes[b] : nullptr);
            outs[b] = mlvm_outputs(params, passes[b].hidden);
        }
    });
    std::vector<MaskingPlan> plans;
    plans.reserve(n);
    for (const auto& w : batch) plans.push_back(w.plan);
    std::vector<MlvmOutputs<T>> d_out;
    const LossBreakdown loss = mlvm_loss(outs, plans, weights, grad ? &d_out : nullptr);
    if (grad) {
        const std::size_t chunks = chunk_count(threads, n);
        std::vector<ModelParams<T>> partial;
        for (std::size_t c = 1; c < chunks; ++c) partial.push_back(zeros_like(params));
        parallel_chunks(threads, n, [&](std::size_t c, std::size_t lo, std::size_t hi) {
            ModelParams<T>& target = c == 0 ? *grad : partial[c - 1];
            for (std::size_t b = lo; b < hi; ++b) {
                const Mat<T> dh = mlvm_heads_backward(params, passes[b].hidden, d_out[b], target);
                const Mat<T> dx = encoder_backward(params, passes[b].encoder, dh, target);
                embedder_backward(params.embedder, passes[b].embed, dx, target.embedder);
            }
        });
        for (const auto& p : partial) add_into(*grad, p);
    }
    if (outputs) *outputs = std::move(outs);
    return loss;
}

LossBreakdown merge(const LossBreakdown& a, const LossBreakdown& b, const LossWeights& weights) {
    auto mean = [](double x, int nx, double y, int ny) {
        return nx + ny == 0 ? 0.0 : (x * nx + y * ny) / static_cast<double>(nx + ny);
    };
    LossBreakdown out;
    out.alpha = weights.alpha;
    out.beta = weights.beta;
    out.feature_count = a.feature_count + b.feature_count;
    out.cat_count = a.cat_count + b.cat_count;
    out.cont_count = a.cont_count + b.cont_count;
    out.feature_loss = mean(a.feature_loss, a.feature_count, b.feature_loss, b.feature_count);
    out.cat_loss = mean(a.cat_loss, a.cat_count, b.cat_loss, b.cat_count);
    out.cont_loss = mean(a.cont_loss, a.cont_count, b.cont_loss, b.cont_count);
    out.total = combine_losses(out.feature_loss, out.cat_loss, out.cat_count, out.cont_loss, out.cont_count,
                               weights.alpha, weights.beta);
    return out;
}

ModelConfig resolve_model_config(ModelConfig config, const Vocabularies& vocab, const EmbeddingProvider& provider,
                                 const TokenizerConfig& tokenizer) {
    config.heads.mode = HeadMode::pretrain;
    config.heads.feature_vocab = vocab.feature_count();
    config.heads.value_vocab = vocab.value_count();
    config.embedder.pretrained_dim = provider.dim();
    config.embedder.hidden = config.encoder.hidden;
    config.embedder.window_minutes = tokenizer.window_minutes;
    config.encoder.max_seq_len = tokenizer.max_seq_len;
    config.validate();
    return config;
}

namespace {

struct ValidationPass {
    LossBreakdown loss;
    double feature_accuracy = 0.0;
};

ValidationPass validate_pretrain(const ModelParams<float>& params, const std::vector<MaskedWindow>& val,
                                 const EmbeddingProvider& provider, const TrainConfig& config) {
    ValidationPass out;
    bool any = false;
    long correct = 0;
    long total = 0;
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t lo = 0; lo < val.size(); lo += bs) {
        const std::size_t hi = std::min(val.size(), lo + bs);
        std::vector<MaskedWindow> batch(val.begin() + static_cast<std::ptrdiff_t>(lo),
                                        val.begin() + static_cast<std::ptrdiff_t>(hi));
        int slots = 0;
        for (const auto& w : batch) slots += plan_slots(w.plan);
        if (slots == 0) continue;
        std::vector<std::uint64_t> seeds(batch.size(), 0);
        std::vector<MlvmOutputs<float>> outs;
        const LossBreakdown l = mlvm_batch<float>(params, batch, provider, config.loss, Mode::eval, seeds, nullptr,
                                                  config.threads, &outs);
        out.loss = any ? merge(out.loss, l, config.loss) : l;
        any = true;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto& slots_b = batch[b].plan.slots;
            for (std::size_t i = 0; i < slots_b.size(); ++i) {
                if (!slots_b[i].mask_feature || !slots_b[i].feature_target) continue;
                Eigen::Index arg = 0;
                outs[b].feature_logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
                correct += arg == *slots_b[i].feature_target ? 1 : 0;
                ++total;
            }
        }
    }
    if (!any) throw Error(Errc::no_masked_slots, "validation split has no masked slots");
    out.feature_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return out;
}

}  // namespace

PretrainResult pretrain(const Corpus& corpus, const Vocabularies& vocab, const EmbeddingProvider& provider,
                        const ModelConfig& model, const TokenizerConfig& tokenizer, const TrainConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
    config.validate();
    const ModelConfig mc = resolve_model_config(model, vocab, provider, tokenizer);
    const auto train = split_windows(corpus, Split::train, tokenizer, vocab);
    const auto val = split_windows(corpus, Split::val, tokenizer, vocab);
    if (train.empty()) throw Error(Errc::empty_train_split, "train split has no windows");
    if (val.empty()) throw Error(Errc::empty_train_split, "validation split has no windows");

    PretrainResult result;
    std::vector<MaskedWindow> val_masked;
    val_masked.reserve(val.size());
    std::map<int, long> target_counts;
    long target_total = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
        Rng rng(derive_seed(config.seed, kValStream, i));
        MaskingPlan plan = plan_masking(val[i], vocab, rng, config.masking);
        WindowSequence corrupted = apply_masking(val[i], plan, vocab, rng);
        for (const auto& s : plan.slots) {
            if (s.mask_feature && s.feature_target) {
                ++target_counts[*s.feature_target];
                ++target_total;
            }
        }
        val_masked.push_back({std::move(corrupted), std::move(plan)});
    }
    long majority = 0;
    for (const auto& [k, c] : target_counts) majority = std::max(majority, c);
    result.majority_baseline = target_total > 0 ? static_cast<double>(majority) / static_cast<double>(target_total) : 0.0;

    ModelParams<float> params = init_model<float>(mc, derive_seed(config.seed, kInitStream));
    ModelParams<float> grad = zeros_like(params);
    AdamW<float> opt(params, {.weight_decay = config.weight_decay});
    const long per_epoch = static_cast<long>((train.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                                             static_cast<std::size_t>(config.batch_size));
    const LinearSchedule schedule{config.lr, config.resolved_warmup_epochs() * per_epoch, config.epochs * per_epoch};

    double best_val = INFINITY;
    long step = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        EpochRecord record;
        record.epoch = epoch;
        bool any = false;
        double lr = 0.0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
            std::vector<MaskedWindow> batch;
            std::vector<std::uint64_t> seeds;
            int slots = 0;
            for (std::size_t k = lo; k < hi; ++k) {
                const std::size_t idx = order[k];
                Rng rng(derive_seed(config.seed, kMaskStream, static_cast<std::uint64_t>(epoch), idx));
                MaskingPlan plan = plan_masking(train[idx], vocab, rng, config.masking);
                slots += plan_slots(plan);
                batch.push_back({apply_masking(train[idx], plan, vocab, rng), std::move(plan)});
                seeds.push_back(derive_seed(config.seed, kDropoutStream, static_cast<std::uint64_t>(epoch), idx));
            }
            lr = schedule.at(step++);
            if (slots == 0) continue;
            set_zero(grad);
            const LossBreakdown loss =
                mlvm_batch<float>(params, batch, provider, config.loss, Mode::train, seeds, &grad, config.threads);
            if (!std::isfinite(loss.total) || !all_finite(grad)) {
                throw Error(Errc::diverged_loss, "non-finite loss at epoch " + std::to_string(epoch));
            }
            opt.step(params, grad, lr);
            if (!all_finite(params)) {
                throw Error(Errc::diverged_loss, "non-finite parameters at epoch " + std::to_string(epoch));
            }
            record.train = any ? merge(record.train, loss, config.loss) : loss;
            any = true;
        }
        record.lr = lr;
        const ValidationPass v = validate_pretrain(params, val_masked, provider, config);
        if (!std::isfinite(v.loss.total)) {
            throw Error(Errc::diverged_loss, "non-finite validation loss at epoch " + std::to_string(epoch));
        }
        record.val = v.loss;
        record.val_feature_accuracy = v.feature_accuracy;
        if (record.val.total < best_val) {
            best_val = record.val.total;
            result.best = params;
            result.best_epoch = epoch;
        }
        result.log.push_back(record);
        if (on_epoch) on_epoch(record);
    }
    return result;
}

std::string loss_log_header() { return "epoch,split,L_f,L_cat,L_cont,L_total,lr\n"; }

std::string loss_log_rows(const EpochRecord& record) {
    std::string out;
    char buf[256];
    for (const auto& [name, l] : {std::pair<const char*, const LossBreakdown*>{"train", &record.train},
                                  std::pair<const char*, const LossBreakdown*>{"val", &record.val}}) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", record.epoch, name, l->feature_loss,
                      l->cat_loss, l->cont_loss, l->total, record.lr);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

std::vector<TaskSample> task_samples(const Corpus& corpus, Split split, const TokenizerConfig& tokenizer,
                                     const Vocabularies& vocab, const TaskSpec& task) {
    std::vector<TaskSample> out;
    for (const Stay* stay : corpus.stays_in(split)) {
        const auto it = task.labels.find(stay->stay_id);
        if (it == task.labels.end()) continue;
        if (static_cast<int>(it->second.size()) != task.outputs) {
            throw Error(Errc::shape_mismatch, "stay " + stay->stay_id + " has " + std::to_string(it->second.size()) +
                                                  " targets, task expects " + std::to_string(task.outputs));
        }
        TaskSample s;
        s.stay_id = stay->stay_id;
        s.patient_id = stay->patient_id;
        s.label = it->second;
        auto windows = segment_windows(*stay, tokenizer, &vocab);
        const auto keep = std::min<std::size_t>(windows.size(), static_cast<std::size_t>(task.windows_per_sample));
        for (std::size_t w = 0; w < keep; ++w) s.windows.push_back(trim_window(std::move(windows[w]), tokenizer.max_seq_len));
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
double task_batch(const ModelParams<T>& params, const std::vector<const TaskSample*>& batch,
                  const EmbeddingProvider& provider, TaskKind kind, const std::vector<ClassWeight>& weights, Mode mode,
                  std::uint64_t seed, ModelParams<T>* grad, int first_layer, bool embedder, Mat<T>* logits,
                  int threads) {
    if (batch.empty()) throw Error(Errc::shape_mismatch, "empty batch");
    struct Job {
        std::size_t sample;
        std::size_t window;
    };
    std::vector<Job> jobs;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        if (batch[s]->windows.empty()) throw Error(Errc::shape_mismatch, "sample " + batch[s]->stay_id + " has no windows");
        for (std::size_t w = 0; w < batch[s]->windows.size(); ++w) jobs.push_back({s, w});
    }
    const Eigen::Index d = params.config.encoder.hidden;
    const auto k = static_cast<Eigen::Index>(batch.front()->label.size());
    std::vector<WindowPass<T>> passes(jobs.size());
    parallel_chunks(threads, jobs.size(), [&](std::size_t, std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
            const auto& seq = batch[jobs[j].sample]->windows[jobs[j].window];
            passes[j].hidden = encode_window(params, seq, provider, mode,
                                             derive_seed(seed, jobs[j].sample, jobs[j].window),
                                             grad ? &passes[j] : nullptr);
        }
    });
    Mat<T> cls = Mat<T>::Zero(static_cast<Eigen::Index>(batch.size()), d);
    Mat<T> labels(static_cast<Eigen::Index>(batch.size()), k);
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        const auto s = jobs[j].sample;
        cls.row(static_cast<Eigen::Index>(s)) += passes[j].hidden.row(0) / static_cast<T>(batch[s]->windows.size());
    }
    for (std::size_t s = 0; s < batch.size(); ++s) {
        if (static_cast<Eigen::Index>(batch[s]->label.size()) != k) throw Error(Errc::shape_mismatch, "ragged labels");
        for (Eigen::Index c = 0; c < k; ++c) labels(static_cast<Eigen::Index>(s), c) = static_cast<T>(batch[s]->label[static_cast<std::size_t>(c)]);
    }
    Rng head_rng(derive_seed(seed, kHeadStream));
    TaskHeadCache<T> head_cache;
    Mat<T> z = task_forward(params, cls, mode, &head_rng, grad ? &head_cache : nullptr);
    Mat<T> dz;
    const double loss = finetune_loss(kind, z, labels, weights, grad ? &dz : nullptr);
    if (grad) {
        const Mat<T> d_cls = task_backward(params, head_cache, dz, *grad);
        const std::size_t chunks = chunk_count(threads, jobs.size());
        std::vector<ModelParams<T>> partial;
        for (std::size_t c = 1; c < chunks; ++c) partial.push_back(zeros_like(params));
        parallel_chunks(threads, jobs.size(), [&](std::size_t c, std::size_t lo, std::size_t hi) {
            ModelParams<T>& target = c == 0 ? *grad : partial[c - 1];
            for (std::size_t j = lo; j < hi; ++j) {
                const auto s = jobs[j].sample;
                Mat<T> dh = Mat<T>::Zero(passes[j].hidden.rows(), d);
                dh.row(0) = d_cls.row(static_cast<Eigen::Index>(s)) / static_cast<T>(batch[s]->windows.size());
                const Mat<T> dx = encoder_backward(params, passes[j].encoder, dh, target, first_layer);
                if (first_layer == 0 && embedder) embedder_backward(params.embedder, passes[j].embed, dx, target.embedder);
            }
        });
        for (const auto& p : partial) add_into(*grad, p);
    }
    if (logits) *logits = std::move(z);
    return loss;
}

std::function<bool(const std::string&)> finetune_filter(int layers, int unfrozen_layers, bool unfreeze_embedder) {
    const int first = std::max(0, layers - unfrozen_layers);
    return [first, layers, unfreeze_embedder](const std::string& name) {
        if (name.rfind("heads.", 0) == 0) return true;
        if (name.rfind("embedder.", 0) == 0) return unfreeze_embedder;
        if (name.rfind("encoder.", 0) == 0) {
            const int layer = std::stoi(name.substr(8));
            return layer >= first && layer < layers;
        }
        return false;
    };
}

namespace {

void check_compatible(const ModelConfig& c, const Vocabularies& vocab, const EmbeddingProvider& provider,
                      const TokenizerConfig& tokenizer) {
    auto fail = [](const std::string& what, long have, long want) {
        throw Error(Errc::config_mismatch,
                    what + ": checkpoint has " + std::to_string(have) + ", expected " + std::to_string(want));
    };
    if (c.embedder.pretrained_dim != provider.dim()) fail("pre-embedding size", c.embedder.pretrained_dim, provider.dim());
    if (c.embedder.window_minutes != tokenizer.window_minutes) fail("window minutes", c.embedder.window_minutes, tokenizer.window_minutes);
    if (c.encoder.max_seq_len < tokenizer.max_seq_len) fail("max sequence length", c.encoder.max_seq_len, tokenizer.max_seq_len);
    if (c.heads.feature_vocab != vocab.feature_count()) fail("feature vocabulary", c.heads.feature_vocab, vocab.feature_count());
    if (c.heads.value_vocab != vocab.value_count()) fail("value vocabulary", c.heads.value_vocab, vocab.value_count());
}

std::vector<ClassWeight> class_weights(const TaskSpec& task, const TrainConfig& config,
                                       const std::vector<const TaskSample*>& train) {
    if (task.kind == TaskKind::regression) return {};
    std::vector<ClassWeight> out(static_cast<std::size_t>(task.outputs));
    for (int c = 0; c < task.outputs; ++c) {
        if (config.class_weight) {
            out[static_cast<std::size_t>(c)].positive = *config.class_weight;
            continue;
        }
        double pos = 0;
        for (const auto* s : train) pos += s->label[static_cast<std::size_t>(c)];
        const double neg = static_cast<double>(train.size()) - pos;
        out[static_cast<std::size_t>(c)].positive = pos > 0 && neg > 0 ? neg / pos : 1.0;
    }
    return out;
}

Mat<double> predict(const ModelParams<float>& model, const std::vector<const TaskSample*>& samples,
                    const EmbeddingProvider& provider, TaskKind kind, int batch_size, int threads, double* loss,
                    const std::vector<ClassWeight>& weights, Mat<double>* labels) {
    const auto k = static_cast<Eigen::Index>(samples.front()->label.size());
    Mat<double> out(static_cast<Eigen::Index>(samples.size()), k);
    if (labels) labels->resize(out.rows(), k);
    double total = 0.0;
    const auto bs = static_cast<std::size_t>(batch_size);
    for (std::size_t lo = 0; lo < samples.size(); lo += bs) {
        const std::size_t hi = std::min(samples.size(), lo + bs);
        std::vector<const TaskSample*> batch(samples.begin() + static_cast<std::ptrdiff_t>(lo),
                                             samples.begin() + static_cast<std::ptrdiff_t>(hi));
        Mat<float> z;
        const double l = task_batch<float>(model, batch, provider, kind, weights, Mode::eval, 0, nullptr, 0, false, &z,
                                           threads);
        total += l * static_cast<double>(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto row = static_cast<Eigen::Index>(lo + i);
            out.row(row) = z.row(static_cast<Eigen::Index>(i)).cast<double>();
            if (labels) {
                for (Eigen::Index c = 0; c < k; ++c) (*labels)(row, c) = batch[i]->label[static_cast<std::size_t>(c)];
            }
        }
    }
    if (loss) *loss = total / static_cast<double>(samples.size());
    return out;
}

FoldResult train_fold(const ModelParams<float>& pretrained, const std::vector<const TaskSample*>& train,
                      const std::vector<const TaskSample*>& val, const std::vector<const TaskSample*>& test,
                      const EmbeddingProvider& provider, const TaskSpec& task, const TrainConfig& config,
                      double task_dropout, std::size_t fold,
                      const std::function<void(int, const FinetuneEpoch&)>& on_epoch) {
    ModelParams<float> params = pretrained;
    install_task_head(params, task.outputs, task_dropout, derive_seed(config.seed, kHeadStream, fold));
    const int layers = params.config.encoder.layers;
    const auto trainable = finetune_filter(layers, config.unfrozen_layers, config.unfreeze_embedder);
    const int first_layer = config.unfreeze_embedder ? 0 : std::max(0, layers - config.unfrozen_layers);
    const auto weights = class_weights(task, config, train);

    ModelParams<float> grad = zeros_like(params);
    AdamW<float> opt(params, {.weight_decay = config.weight_decay});
    const long per_epoch = static_cast<long>((train.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                                             static_cast<std::size_t>(config.batch_size));
    const LinearSchedule schedule{config.lr, config.resolved_warmup_epochs() * per_epoch, config.epochs * per_epoch};

    FoldResult result;
    result.model = params;
    result.best_val_loss = INFINITY;
    long step = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<const TaskSample*> order = train;
        Rng shuffle(derive_seed(config.seed, kShuffleStream, fold, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        FinetuneEpoch record;
        record.epoch = epoch;
        double sum = 0.0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
            std::vector<const TaskSample*> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                                 order.begin() + static_cast<std::ptrdiff_t>(hi));
            set_zero(grad);
            const double loss = task_batch<float>(
                params, batch, provider, task.kind, weights, Mode::train,
                derive_seed(config.seed, kDropoutStream, fold, static_cast<std::uint64_t>(step)), &grad, first_layer,
                config.unfreeze_embedder, nullptr, config.threads);
            if (!std::isfinite(loss) || !all_finite(grad)) {
                throw Error(Errc::diverged_loss, "non-finite fine-tuning loss at epoch " + std::to_string(epoch));
            }
            record.lr = schedule.at(step++);
            opt.step(params, grad, record.lr, trainable);
            if (!all_finite(params)) throw Error(Errc::diverged_loss, "non-finite parameters at epoch " + std::to_string(epoch));
            sum += loss * static_cast<double>(batch.size());
        }
        record.train_loss = sum / static_cast<double>(order.size());
        predict(params, val, provider, task.kind, config.batch_size, config.threads, &record.val_loss, weights, nullptr);
        if (!std::isfinite(record.val_loss)) throw Error(Errc::diverged_loss, "non-finite validation loss");
        result.log.push_back(record);
        if (on_epoch) on_epoch(static_cast<int>(fold), record);
        if (record.val_loss < result.best_val_loss) {
            result.best_val_loss = record.val_loss;
            result.best_epoch = epoch;
            result.model = params;
        } else if (epoch - result.best_epoch >= config.patience) {
            break;
        }
    }
    Mat<double> labels;
    const Mat<double> z = predict(result.model, test, provider, task.kind, config.batch_size, config.threads, nullptr,
                                  weights, &labels);
    result.test = score_predictions(task.kind, z, labels);
    result.test.task = task.name;
    return result;
}

std::vector<const TaskSample*> pointers(const std::vector<TaskSample>& samples) {
    std::vector<const TaskSample*> out;
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

}  // namespace

FinetuneResult finetune(const ModelParams<float>& pretrained, const Corpus& corpus, const Vocabularies& vocab,
                        const EmbeddingProvider& provider, const TokenizerConfig& tokenizer, const TaskSpec& task,
                        const TrainConfig& config, double task_dropout,
                        const std::function<void(int, const FinetuneEpoch&)>& on_epoch) {
    config.validate();
    if (task.outputs < 1 || task.windows_per_sample < 1) throw Error(Errc::invalid_spec, "task needs outputs and windows");
    if (task.kind == TaskKind::binary && task.outputs != 1) throw Error(Errc::invalid_spec, "binary task has one output");
    check_compatible(pretrained.config, vocab, provider, tokenizer);
    if (task.labels.empty()) throw Error(Errc::missing_labels, "task has no labels");

    std::vector<TaskSample> pool = task_samples(corpus, Split::train, tokenizer, vocab, task);
    const std::size_t train_count = pool.size();
    for (auto& s : task_samples(corpus, Split::val, tokenizer, vocab, task)) pool.push_back(std::move(s));
    const std::vector<TaskSample> test = task_samples(corpus, Split::test, tokenizer, vocab, task);
    if (pool.empty()) throw Error(Errc::missing_labels, "no labelled stays in the train and validation splits");
    if (test.empty()) throw Error(Errc::missing_labels, "no labelled stays in the test split");

    std::vector<std::pair<std::vector<const TaskSample*>, std::vector<const TaskSample*>>> folds;
    if (config.folds == 1) {
        std::vector<const TaskSample*> tr;
        std::vector<const TaskSample*> va;
        for (std::size_t i = 0; i < pool.size(); ++i) (i < train_count ? tr : va).push_back(&pool[i]);
        if (tr.empty() || va.empty()) throw Error(Errc::missing_labels, "train or validation split has no labels");
        folds.emplace_back(std::move(tr), std::move(va));
    } else {
        std::vector<std::string> patients;
        for (const auto& s : pool) patients.push_back(s.patient_id);
        std::sort(patients.begin(), patients.end());
        patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
        if (patients.size() < static_cast<std::size_t>(config.folds)) {
            throw Error(Errc::invalid_spec, "fewer labelled patients than folds");
        }
        Rng rng(derive_seed(config.seed, kFoldStream));
        for (std::size_t i = patients.size(); i > 1; --i) std::swap(patients[i - 1], patients[rng.below(i)]);
        std::map<std::string, int> fold_of;
        for (std::size_t i = 0; i < patients.size(); ++i) fold_of[patients[i]] = static_cast<int>(i % static_cast<std::size_t>(config.folds));
        for (int f = 0; f < config.folds; ++f) {
            std::vector<const TaskSample*> tr;
            std::vector<const TaskSample*> va;
            for (const auto& s : pool) (fold_of[s.patient_id] == f ? va : tr).push_back(&s);
            folds.emplace_back(std::move(tr), std::move(va));
        }
    }

    FinetuneResult result;
    const auto test_ptrs = pointers(test);
    std::vector<double> auroc_v, auprc_v, mae_v;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        FoldResult fr = train_fold(pretrained, folds[f].first, folds[f].second, test_ptrs, provider, task, config,
                                   task_dropout, f, on_epoch);
        if (!fr.test.auroc.per_fold.empty()) auroc_v.push_back(fr.test.auroc.mean);
        if (!fr.test.auprc.per_fold.empty()) auprc_v.push_back(fr.test.auprc.mean);
        if (!fr.test.mae.per_fold.empty()) mae_v.push_back(fr.test.mae.mean);
        if (f == 0 || fr.best_val_loss < result.folds[result.best_fold].best_val_loss) result.best_fold = f;
        result.folds.push_back(std::move(fr));
    }
    result.report.task = task.name;
    result.report.auroc = summarize(std::move(auroc_v));
    result.report.auprc = summarize(std::move(auprc_v));
    result.report.mae = summarize(std::move(mae_v));
    return result;
}

MetricReport evaluate(const ModelParams<float>& model, const Corpus& corpus, const Vocabularies& vocab,
                      const EmbeddingProvider& provider, const TokenizerConfig& tokenizer, const TaskSpec& task,
                      Split split, int threads) {
    if (model.config.heads.mode != HeadMode::finetune) throw Error(Errc::mode_mismatch, "model has no task head");
    if (model.config.heads.task_outputs != task.outputs) {
        throw Error(Errc::config_mismatch, "task head width differs from the task outputs");
    }
    check_compatible(model.config, vocab, provider, tokenizer);
    const auto samples = task_samples(corpus, split, tokenizer, vocab, task);
    if (samples.empty()) throw Error(Errc::missing_labels, std::string("no labelled stays in the ") + std::string(split_name(split)) + " split");
    Mat<double> labels;
    const Mat<double> z = predict(model, pointers(samples), provider, task.kind, 32, threads, nullptr, {}, &labels);
    MetricReport r = score_predictions(task.kind, z, labels);
    r.task = task.name;
    return r;
}

MetricReport score_predictions(TaskKind kind, const Mat<double>& predictions, const Mat<double>& labels) {
    MetricReport r;
    r.task = std::string(task_kind_name(kind));
    if (kind == TaskKind::regression) {
        std::vector<double> p(predictions.data(), predictions.data() + predictions.size());
        std::vector<double> t(labels.data(), labels.data() + labels.size());
        r.mae = summarize({mae(p, t)});
        return r;
    }
    double roc = 0.0;
    double pr = 0.0;
    int used = 0;
    for (Eigen::Index c = 0; c < predictions.cols(); ++c) {
        std::vector<double> s(static_cast<std::size_t>(predictions.rows()));
        std::vector<int> y(s.size());
        int pos = 0;
        for (Eigen::Index i = 0; i < predictions.rows(); ++i) {
            s[static_cast<std::size_t>(i)] = predictions(i, c);
            y[static_cast<std::size_t>(i)] = labels(i, c) >= 0.5 ? 1 : 0;
            pos += y[static_cast<std::size_t>(i)];
        }
        // Multi-label columns with one class are left out of the macro average.
        if (kind == TaskKind::multilabel && (pos == 0 || pos == static_cast<int>(y.size()))) continue;
        roc += auroc(s, y);
        pr += auprc(s, y);
        ++used;
    }
    if (used == 0) throw Error(Errc::degenerate_labels, "no output column has both classes");
    r.auroc = summarize({roc / used});
    r.auprc = summarize({pr / used});
    return r;
}

std::map<std::string, std::vector<double>> read_labels(const std::string& path, const std::vector<std::string>& columns) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_error, "cannot open " + path);
    auto split_csv = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };
    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        header = split_csv(line);
        break;
    }
    if (header.empty() || header[0] != "stay_id") throw Error(Errc::format_error, path + ": header must start with stay_id");
    std::vector<std::size_t> cols;
    if (columns.empty()) {
        for (std::size_t c = 1; c < header.size(); ++c) cols.push_back(c);
    } else {
        for (const auto& name : columns) {
            const auto it = std::find(header.begin() + 1, header.end(), name);
            if (it == header.end()) throw Error(Errc::missing_labels, path + ": no column '" + name + "'");
            cols.push_back(static_cast<std::size_t>(it - header.begin()));
        }
    }
    if (cols.empty()) throw Error(Errc::missing_labels, path + ": no label columns");
    std::map<std::string, std::vector<double>> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto cells = split_csv(line);
        std::vector<double> row;
        bool complete = true;
        for (std::size_t c : cols) {
            if (c >= cells.size() || cells[c].empty()) {
                complete = false;
                break;
            }
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[c].size() || !std::isfinite(v)) {
                throw Error(Errc::format_error, path + ":" + std::to_string(line_no) + ": bad number '" + cells[c] + "'");
            }
            row.push_back(v);
        }
        if (complete) out[cells[0]] = std::move(row);
    }
    return out;
}

template LossBreakdown mlvm_batch<float>(const ModelParams<float>&, const std::vector<MaskedWindow>&,
                                         const EmbeddingProvider&, const LossWeights&, Mode,
                                         std::span<const std::uint64_t>, ModelParams<float>*, int,
                                         std::vector<MlvmOutputs<float>>*);
template LossBreakdown mlvm_batch<double>(const ModelParams<double>&, const std::vector<MaskedWindow>&,
                                          const EmbeddingProvider&, const LossWeights&, Mode,
                                          std::span<const std::uint64_t>, ModelParams<double>*, int,
                                          std::vector<MlvmOutputs<double>>*);
template double task_batch<float>(const ModelParams<float>&, const std::vector<const TaskSample*>&,
                                  const EmbeddingProvider&, TaskKind, const std::vector<ClassWeight>&, Mode,
                                  std::uint64_t, ModelParams<float>*, int, bool, Mat<float>*, int);
template double task_batch<double>(const ModelParams<double>&, const std::vector<const TaskSample*>&,
                                   const EmbeddingProvider&, TaskKind, const std::vector<ClassWeight>&, Mode,
                                   std::uint64_t, ModelParams<double>*, int, bool, Mat<double>*, int);

}  // namespace icubert
