#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "icubert/encoder.hpp"

namespace icubert {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with bias-corrected moments and weight decay applied directly to the
// parameters (lr * wd * theta), not through the gradient.
template <typename T>
class AdamW {
public:
    using Filter = std::function<bool(const std::string&)>;

    AdamW(const ModelParams<T>& params, AdamWConfig config) : config_(config), m_(zeros_like(params)), v_(zeros_like(params)) {}

    // Parameters rejected by `trainable` are left untouched, moments included.
    void step(ModelParams<T>& params, ModelParams<T>& grads, double lr, const Filter& trainable = {}) {
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        std::vector<Mat<T>*> g;
        std::vector<Mat<T>*> m;
        std::vector<Mat<T>*> v;
        grads.visit([&](const std::string&, Mat<T>& x) { g.push_back(&x); });
        m_.visit([&](const std::string&, Mat<T>& x) { m.push_back(&x); });
        v_.visit([&](const std::string&, Mat<T>& x) { v.push_back(&x); });
        std::size_t i = 0;
        params.visit([&](const std::string& name, Mat<T>& p) {
            const std::size_t k = i++;
            if (trainable && !trainable(name)) return;
            T* pd = p.data();
            const T* gd = g[k]->data();
            T* md = m[k]->data();
            T* vd = v[k]->data();
            for (Eigen::Index j = 0; j < p.size(); ++j) {
                const double gj = static_cast<double>(gd[j]);
                const double mj = config_.beta1 * static_cast<double>(md[j]) + (1.0 - config_.beta1) * gj;
                const double vj = config_.beta2 * static_cast<double>(vd[j]) + (1.0 - config_.beta2) * gj * gj;
                md[j] = static_cast<T>(mj);
                vd[j] = static_cast<T>(vj);
                const double update = (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
                const double decayed = static_cast<double>(pd[j]) * (1.0 - lr * config_.weight_decay);
                pd[j] = static_cast<T>(decayed - lr * update);
            }
        });
    }

    long steps() const { return t_; }

private:
    AdamWConfig config_;
    ModelParams<T> m_;
    ModelParams<T> v_;
    long t_ = 0;
};

// Linear warmup from 0 to `peak` over `warmup_steps`, then linear decay to 0 at `total_steps`.
struct LinearSchedule {
    double peak = 1e-3;
    long warmup_steps = 0;
    long total_steps = 1;

    double at(long step) const {
        if (warmup_steps > 0 && step < warmup_steps) {
            return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
        }
        const long decay = total_steps - warmup_steps;
        if (decay <= 0) return peak;
        const double frac = static_cast<double>(total_steps - step) / static_cast<double>(decay);
        return peak * std::clamp(frac, 0.0, 1.0);
    }
};

}  // namespace icubert
