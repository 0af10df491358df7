#pragma once

#include <cmath>

#include "fvae/rng.hpp"
#include "fvae/tape.hpp"
#include "fvae/tensor.hpp"

namespace fvae {

// Log-variance clamp. Keeps the learned-variance likelihood finite while
// spanning ~9 orders of magnitude in variance.
inline constexpr double kLogVarMin = -14.0;
inline constexpr double kLogVarMax = 6.0;
inline constexpr double kLog2Pi = 1.8378770664093454836;

// Diagonal Gaussian over batched tensors: mean/log_var are (N, ...) with the
// leading dim treated as the sample index.
template <typename T>
struct DiagGaussian {
    Tensor<T> mean;
    Tensor<T> log_var;

    DiagGaussian(Tensor<T> mu, Tensor<T> lv) : mean(std::move(mu)), log_var(std::move(lv)) {
        require_same_shape("diag_gaussian", mean, log_var);
        if (mean.rank() < 2)
            throw std::invalid_argument("diag_gaussian: expected batched (N,...) tensors, got " +
                                        shape_str(mean.shape));
        for (auto& v : log_var.data)
            v = v < T(kLogVarMin) ? T(kLogVarMin) : (v > T(kLogVarMax) ? T(kLogVarMax) : v);
    }

    int64_t batch() const { return mean.shape[0]; }
    int64_t dims_per_sample() const { return mean.numel() / mean.shape[0]; }
};

// Per-sample log density, shape (N).
template <typename T>
Tensor<T> log_prob(const DiagGaussian<T>& d, const Tensor<T>& x) {
    require_same_shape("log_prob", d.mean, x);
    const int64_t n = d.batch(), per = d.dims_per_sample();
    Tensor<T> out({n});
    for (int64_t i = 0; i < n; ++i) {
        T acc = 0;
        const T* mu = d.mean.ptr() + i * per;
        const T* lv = d.log_var.ptr() + i * per;
        const T* xp = x.ptr() + i * per;
        for (int64_t j = 0; j < per; ++j) {
            const T diff = xp[j] - mu[j];
            acc += T(-0.5) * (T(kLog2Pi) + lv[j] + diff * diff * std::exp(-lv[j]));
        }
        out[i] = acc;
    }
    return out;
}

// mean + T * sigma * eps, eps ~ N(0, I). temperature 0 returns the mean
// exactly; temperature 1 is the reparameterized posterior draw.
template <typename T>
Tensor<T> sample(const DiagGaussian<T>& d, T temperature, RngStream& rng) {
    if (temperature < T(0))
        throw std::invalid_argument("sample: negative temperature " + std::to_string(temperature));
    Tensor<T> out(d.mean.shape);
    if (temperature == T(0)) {
        out.data = d.mean.data;
        return out;
    }
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = d.mean[i] +
                 temperature * std::exp(T(0.5) * d.log_var[i]) * static_cast<T>(rng.normal());
    return out;
}

// Closed-form KL(d || N(0, I)) per sample, shape (N).
template <typename T>
Tensor<T> kl_standard(const DiagGaussian<T>& d) {
    const int64_t n = d.batch(), per = d.dims_per_sample();
    Tensor<T> out({n});
    for (int64_t i = 0; i < n; ++i) {
        T acc = 0;
        const T* mu = d.mean.ptr() + i * per;
        const T* lv = d.log_var.ptr() + i * per;
        for (int64_t j = 0; j < per; ++j)
            acc += T(0.5) * (mu[j] * mu[j] + std::exp(lv[j]) - T(1) - lv[j]);
        out[i] = acc;
    }
    return out;
}

// ---- taped variants (for losses) -------------------------------------------

// Per-sample log N(x | mu, exp(log_var)), shape (N). All three arguments are
// tape vars; log_var is assumed already clamped by the producing head.
template <typename T>
Var<T> gaussian_log_prob(Tape<T>& t, Var<T> mu, Var<T> log_var, Var<T> x) {
    Var<T> diff = t.sub(x, mu);
    Var<T> quad = t.mul(t.mul(diff, diff), t.exp(t.neg(log_var)));
    Var<T> per_elem = t.mul_scalar(t.add_scalar(t.add(log_var, quad), T(kLog2Pi)), T(-0.5));
    return t.sum_samples(per_elem);
}

// Per-sample closed-form KL against the standard normal, shape (N).
template <typename T>
Var<T> kl_standard(Tape<T>& t, Var<T> mu, Var<T> log_var) {
    Var<T> term = t.sub(t.add(t.mul(mu, mu), t.exp(log_var)), t.add_scalar(log_var, T(1)));
    return t.sum_samples(t.mul_scalar(term, T(0.5)));
}

// Reparameterized draw: mu + exp(log_var / 2) * eps with eps fixed (no grad).
template <typename T>
Var<T> reparam_sample(Tape<T>& t, Var<T> mu, Var<T> log_var, const Tensor<T>& eps) {
    Var<T> sigma = t.exp(t.mul_scalar(log_var, T(0.5)));
    return t.add(mu, t.mul(sigma, t.constant(eps)));
}

}  // namespace fvae
