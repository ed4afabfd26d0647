#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icubert/random.hpp"

namespace icubert {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Mode : std::uint8_t { train, eval };

// y = x W + b with W stored in x out and b as a 1 x out row.
template <typename T>
struct Affine {
    Mat<T> weight;
    Mat<T> bias;

    int in() const { return static_cast<int>(weight.rows()); }
    int out() const { return static_cast<int>(weight.cols()); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormParams {
    Mat<T> gain;
    Mat<T> bias;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gain", gain);
        f(prefix + ".bias", bias);
    }
};

inline constexpr double kLayerNormEps = 1e-12;

template <typename T>
Affine<T> init_affine(int in, int out, Rng& rng) {
    Affine<T> a;
    a.weight.resize(in, out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < a.weight.size(); ++i) a.weight.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    a.bias = Mat<T>::Zero(1, out);
    return a;
}

template <typename T>
LayerNormParams<T> init_layer_norm(int dim) {
    return {Mat<T>::Ones(1, dim), Mat<T>::Zero(1, dim)};
}

template <typename T>
Mat<T> init_normal(int rows, int cols, double stddev, Rng& rng) {
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
    return m;
}

template <typename T>
Mat<T> affine_forward(const Affine<T>& a, const Mat<T>& x) {
    Mat<T> y = x * a.weight;
    y.rowwise() += a.bias.row(0);
    return y;
}

// Accumulates parameter gradients into `grad`; returns dL/dx.
template <typename T>
Mat<T> affine_backward(const Affine<T>& a, const Mat<T>& x, const Mat<T>& dy, Affine<T>& grad) {
    grad.weight.noalias() += x.transpose() * dy;
    grad.bias.row(0) += dy.colwise().sum();
    return dy * a.weight.transpose();
}

template <typename T>
struct LayerNormCache {
    Mat<T> normalized;  // (x - mean) * rstd
    std::vector<T> rstd;
};

template <typename T>
Mat<T> layer_norm_forward(const LayerNormParams<T>& p, const Mat<T>& x, LayerNormCache<T>* cache) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Mat<T> xhat(n, d);
    std::vector<T> rstd(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const auto centered = (x.row(i).array() - mean).eval();
        const T var = centered.square().mean();
        const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        xhat.row(i) = centered * r;
        rstd[static_cast<std::size_t>(i)] = r;
    }
    Mat<T> y = (xhat.array().rowwise() * p.gain.row(0).array()).matrix();
    y.rowwise() += p.bias.row(0);
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const LayerNormParams<T>& p, const LayerNormCache<T>& cache, const Mat<T>& dy,
                           LayerNormParams<T>& grad) {
    grad.gain.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    grad.bias.row(0) += dy.colwise().sum();
    const Mat<T> dxhat = (dy.array().rowwise() * p.gain.row(0).array()).matrix();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const T mean_d = dxhat.row(i).mean();
        const T mean_dx = (dxhat.row(i).array() * cache.normalized.row(i).array()).mean();
        dx.row(i) = (cache.rstd[static_cast<std::size_t>(i)] *
                     (dxhat.row(i).array() - mean_d - cache.normalized.row(i).array() * mean_dx))
                        .matrix();
    }
    return dx;
}

// Exact (erf) GELU.
template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5) * x * (T(1) + std::erf(x * static_cast<T>(0.70710678118654752440)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x * static_cast<T>(0.70710678118654752440)));
    const T pdf = static_cast<T>(0.39894228040143267794) * std::exp(static_cast<T>(-0.5) * x * x);
    return cdf + x * pdf;
}

// Inverted dropout mask (entries 0 or 1/(1-p)). Empty when p == 0 or in eval mode.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Mode mode, Rng* rng) {
    if (mode == Mode::eval || p <= 0.0 || rng == nullptr) return {};
    Mat<T> m(rows, cols);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < p ? T(0) : scale;
    return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
    if (mask.size() != 0) x.array() *= mask.array();
}

}  // namespace icubert
