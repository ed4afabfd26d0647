#include "icubert/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "icubert/errors.hpp"
#include "icubert/random.hpp"
#include "icubert/train.hpp"

namespace icubert {

GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<ParamSlot>& params,
                           const GradCheckOptions& options) {
    GradCheckReport report;
    std::vector<GradCheckEntry> all;
    Rng rng(options.seed);
    for (const ParamSlot& slot : params) {
        if (!slot.value || !slot.grad || slot.value->size() != slot.grad->size()) {
            throw Error(Errc::shape_mismatch, "gradient slot '" + slot.name + "' does not match its parameter");
        }
        const Eigen::Index n = slot.value->size();
        std::vector<Eigen::Index> indices(static_cast<std::size_t>(n));
        std::iota(indices.begin(), indices.end(), Eigen::Index{0});
        if (options.samples_per_param > 0 && n > options.samples_per_param) {
            for (Eigen::Index i = 0; i < options.samples_per_param; ++i) {
                const auto j = i + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n - i)));
                std::swap(indices[static_cast<std::size_t>(i)], indices[static_cast<std::size_t>(j)]);
            }
            indices.resize(static_cast<std::size_t>(options.samples_per_param));
        }
        double& group_max = report.max_by_param[slot.name];
        for (Eigen::Index idx : indices) {
            double& x = slot.value->data()[idx];
            const double saved = x;
            x = saved + options.epsilon;
            const double up = loss();
            x = saved - options.epsilon;
            const double down = loss();
            x = saved;
            GradCheckEntry e;
            e.param = slot.name;
            e.index = idx;
            e.analytic = slot.grad->data()[idx];
            e.numeric = (up - down) / (2.0 * options.epsilon);
            e.rel_err = std::abs(e.analytic - e.numeric) / std::max(1.0, std::abs(e.analytic));
            if (!std::isfinite(e.rel_err)) e.rel_err = INFINITY;
            group_max = std::max(group_max, e.rel_err);
            ++report.checked;
            all.push_back(e);
        }
    }
    const auto keep = std::min<std::size_t>(all.size(), static_cast<std::size_t>(std::max(options.report_size, 1)));
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                      [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_err > b.rel_err; });
    all.resize(keep);
    report.worst = std::move(all);
    report.max_rel_err = report.worst.empty() ? 0.0 : report.worst.front().rel_err;
    report.passed = report.max_rel_err <= options.tolerance;
    if (!report.passed && options.throw_on_failure) {
        throw GradMismatch(report.worst.front().param, report.worst.front().rel_err);
    }
    return report;
}

std::vector<ParamSlot> model_slots(ModelParams<double>& params, const ModelParams<double>& grad,
                                   const std::function<bool(const std::string&)>& keep) {
    std::vector<const Mat<double>*> grads;
    grad.visit([&](const std::string&, const Mat<double>& g) { grads.push_back(&g); });
    std::vector<ParamSlot> slots;
    std::size_t i = 0;
    params.visit([&](const std::string& name, Mat<double>& p) {
        const Mat<double>* g = grads.at(i++);
        if (!keep || keep(name)) slots.push_back({name, &p, g});
    });
    return slots;
}

std::string GradCheckReport::to_text() const {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof buf, "checked %ld entries, max rel err %.3e: %s\n", checked, max_rel_err,
                  passed ? "ok" : "FAILED");
    out += buf;
    out += "per parameter:\n";
    for (const auto& [name, err] : max_by_param) {
        std::snprintf(buf, sizeof buf, "  %-40s %.3e\n", name.c_str(), err);
        out += buf;
    }
    out += "worst entries:\n";
    for (const auto& e : worst) {
        std::snprintf(buf, sizeof buf, "  %-40s [%ld] analytic %+.8e numeric %+.8e rel %.3e\n", e.param.c_str(),
                      static_cast<long>(e.index), e.analytic, e.numeric, e.rel_err);
        out += buf;
    }
    return out;
}

namespace {

Vocabularies tiny_vocab(int features, int values) {
    Vocabularies v;
    for (int i = Vocabularies::kReservedFeatures; i < features; ++i) v.add_feature("chartevents: feature " + std::to_string(i));
    for (int i = Vocabularies::kReservedValues; i < values; ++i) v.add_value("category " + std::to_string(i));
    return v;
}

WindowSequence random_window(const Vocabularies& vocab, const ModelCheckConfig& c, Rng& rng, int index) {
    WindowSequence w;
    w.stay_id = "check" + std::to_string(index);
    w.window_index = 0;
    w.tokens.push_back(make_special_token(Special::cls));
    const int real = c.max_seq_len - 1 - (index % 2);  // odd windows are one token short
    for (int i = 0; i < real; ++i) {
        Token t;
        const int f = Vocabularies::kReservedFeatures +
                      static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.feature_count() - Vocabularies::kReservedFeatures)));
        t.feature_text = vocab.feature_at(f);
        if (i % 2 == 0) {
            t.value = rng.normal();
            t.is_continuous = true;
        } else {
            const int v = Vocabularies::kReservedValues +
                          static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.value_count() - Vocabularies::kReservedValues)));
            t.value = vocab.value_at(v);
        }
        t.tau_minutes = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c.window_minutes)));
        t.delta_minutes = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c.window_minutes - t.tau_minutes)));
        w.tokens.push_back(std::move(t));
    }
    return w;
}

ModelConfig tiny_model_config(const ModelCheckConfig& c) {
    ModelConfig m;
    m.encoder.layers = c.layers;
    m.encoder.hidden = c.hidden;
    m.encoder.heads = c.heads;
    m.encoder.ffn_dim = c.ffn_dim;
    m.encoder.max_seq_len = c.max_seq_len;
    m.embedder.pretrained_dim = c.pretrained_dim;
    m.embedder.hidden = c.hidden;
    m.embedder.window_minutes = c.window_minutes;
    m.heads.feature_vocab = c.feature_vocab;
    m.heads.value_vocab = c.value_vocab;
    m.validate();
    return m;
}

}  // namespace

ModelCheckReport check_model_gradients(const ModelCheckConfig& c) {
    if (c.feature_vocab <= Vocabularies::kReservedFeatures || c.value_vocab <= Vocabularies::kReservedValues) {
        throw Error(Errc::shape_mismatch, "vocabularies need at least one non-reserved entry");
    }
    if (c.max_seq_len < 3 || c.windows < 1) throw Error(Errc::shape_mismatch, "check needs windows of at least 3 tokens");
    const Vocabularies vocab = tiny_vocab(c.feature_vocab, c.value_vocab);
    const StubProvider provider(c.pretrained_dim, c.seed);
    const ModelConfig mc = tiny_model_config(c);
    Rng rng(derive_seed(c.seed, 0x6C));

    // Masking with a high selection rate until every loss term has slots.
    MaskingRates rates;
    rates.select = 0.9;
    std::vector<MaskedWindow> batch;
    std::vector<WindowSequence> clean;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        batch.clear();
        clean.clear();
        int f = 0, cat = 0, cont = 0;
        for (int i = 0; i < c.windows; ++i) {
            clean.push_back(random_window(vocab, c, rng, i));
            MaskingPlan plan = plan_masking(clean.back(), vocab, rng, rates);
            f += plan.feature_slots();
            cat += plan.categorical_slots();
            cont += plan.continuous_slots();
            batch.push_back({apply_masking(clean.back(), plan, vocab, rng), std::move(plan)});
        }
        if (f > 0 && cat > 0 && cont > 0) break;
    }

    ModelCheckReport report;
    const LossWeights weights{c.alpha, c.beta, FeatureNormalization::masked_slots};
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < c.windows; ++i) seeds.push_back(derive_seed(c.seed, 0xD0, static_cast<std::uint64_t>(i)));
    {
        ModelParams<double> params = init_model<double>(mc, c.seed);
        ModelParams<double> grad = zeros_like(params);
        mlvm_batch<double>(params, batch, provider, weights, Mode::train, seeds, &grad);
        const auto loss = [&] {
            return mlvm_batch<double>(params, batch, provider, weights, Mode::train, seeds, nullptr).total;
        };
        report.pretrain = grad_check(loss, model_slots(params, grad), c.options);
    }
    {
        ModelParams<double> params = init_model<double>(mc, c.seed);
        install_task_head(params, 1, 0.5, derive_seed(c.seed, 0x7A));
        // Two samples of up to two windows each so CLS averaging is exercised.
        std::vector<TaskSample> samples;
        for (int i = 0; i < c.windows; ++i) {
            if (i % 2 == 0) {
                samples.emplace_back();
                samples.back().stay_id = "check" + std::to_string(i);
                samples.back().label = {static_cast<double>(samples.size() % 2)};
            }
            samples.back().windows.push_back(clean[static_cast<std::size_t>(i)]);
        }
        std::vector<const TaskSample*> ptrs;
        for (const auto& s : samples) ptrs.push_back(&s);
        const std::vector<ClassWeight> cw{{3.0, 1.0}};
        const std::uint64_t seed = derive_seed(c.seed, 0xF7);
        ModelParams<double> grad = zeros_like(params);
        task_batch<double>(params, ptrs, provider, TaskKind::binary, cw, Mode::train, seed, &grad, 0, true);
        const auto loss = [&] {
            return task_batch<double>(params, ptrs, provider, TaskKind::binary, cw, Mode::train, seed, nullptr, 0, true);
        };
        report.finetune = grad_check(loss, model_slots(params, grad), c.options);
    }
    return report;
}

}  // namespace icubert
