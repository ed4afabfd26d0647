#pragma once

#include <span>
#include <string>
#include <vector>

namespace icubert {

// Mann-Whitney form: P(score+ > score-), ties counted 1/2.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Area under the precision-recall step curve from a descending-score sweep;
// tied scores enter as one threshold.
double auprc(std::span<const double> scores, std::span<const int> labels);

double mae(std::span<const double> predictions, std::span<const double> targets);

struct MetricSummary {
    std::vector<double> per_fold;
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 for a single fold
};

MetricSummary summarize(std::vector<double> per_fold);

struct MetricReport {
    std::string task;
    MetricSummary auroc;
    MetricSummary auprc;
    MetricSummary mae;

    std::size_t folds() const;
    // "metric mean +- stddev" lines followed by the per-fold values.
    std::string to_text() const;
};

}  // namespace icubert
