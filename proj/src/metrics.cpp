#include "icubert/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "icubert/errors.hpp"

namespace icubert {

namespace {

void check_inputs(std::size_t scores, std::size_t labels) {
    if (scores != labels) throw Error(Errc::shape_mismatch, "scores and labels differ in length");
    if (scores == 0) throw Error(Errc::shape_mismatch, "empty inputs");
}

std::pair<std::size_t, std::size_t> class_counts(std::span<const int> labels) {
    std::size_t pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw Error(Errc::degenerate_labels, "labels must be 0 or 1");
        pos += static_cast<std::size_t>(y);
    }
    if (pos == 0 || pos == labels.size()) throw Error(Errc::degenerate_labels, "both classes must be present");
    return {pos, labels.size() - pos};
}

std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores.size(), labels.size());
    const auto [pos, neg] = class_counts(labels);
    // Walk tie groups from the highest score; each positive beats every negative
    // seen later and ties the negatives in its own group.
    const auto idx = order_by_score_desc(scores);
    double wins = 0.0;
    std::size_t neg_above = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        std::size_t p = 0;
        std::size_t n = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] == 1 ? p : n) += 1;
            ++j;
        }
        wins += static_cast<double>(p) * (static_cast<double>(neg - neg_above - n) + 0.5 * static_cast<double>(n));
        neg_above += n;
        i = j;
    }
    return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores.size(), labels.size());
    const auto [pos, neg] = class_counts(labels);
    (void)neg;
    const auto idx = order_by_score_desc(scores);
    double area = 0.0;
    std::size_t tp = 0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        std::size_t group_tp = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            group_tp += static_cast<std::size_t>(labels[idx[j]]);
            ++j;
        }
        tp += group_tp;
        seen += j - i;
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        area += precision * static_cast<double>(group_tp) / static_cast<double>(pos);
        i = j;
    }
    return area;
}

double mae(std::span<const double> predictions, std::span<const double> targets) {
    check_inputs(predictions.size(), targets.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) sum += std::abs(predictions[i] - targets[i]);
    return sum / static_cast<double>(predictions.size());
}

MetricSummary summarize(std::vector<double> per_fold) {
    MetricSummary s;
    s.per_fold = std::move(per_fold);
    if (s.per_fold.empty()) return s;
    const double n = static_cast<double>(s.per_fold.size());
    s.mean = std::accumulate(s.per_fold.begin(), s.per_fold.end(), 0.0) / n;
    if (s.per_fold.size() > 1) {
        double ss = 0.0;
        for (double v : s.per_fold) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / (n - 1.0));
    }
    return s;
}

std::size_t MetricReport::folds() const {
    return std::max({auroc.per_fold.size(), auprc.per_fold.size(), mae.per_fold.size()});
}

std::string MetricReport::to_text() const {
    std::string out = "task: " + task + "\nfolds: " + std::to_string(folds()) + "\n";
    auto line = [&](const char* name, const MetricSummary& m) {
        if (m.per_fold.empty()) return;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s: %.4f +- %.4f\n", name, m.mean, m.stddev);
        out += buf;
        out += std::string(name) + "_per_fold:";
        for (double v : m.per_fold) {
            std::snprintf(buf, sizeof buf, " %.6f", v);
            out += buf;
        }
        out += "\n";
    };
    line("auroc", auroc);
    line("auprc", auprc);
    line("mae", mae);
    return out;
}

}  // namespace icubert
