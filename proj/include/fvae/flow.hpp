#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fvae/gaussian.hpp"
#include "fvae/linalg.hpp"
#include "fvae/nets.hpp"
#include "fvae/rng.hpp"
#include "fvae/tape.hpp"

namespace fvae {

// An invertible layer. forward runs on a tape and accumulates the per-sample
// log|det| into logdet (shape (N)); inverse is a plain closed-form map.
template <typename T>
struct FlowLayer {
    virtual ~FlowLayer() = default;
    virtual Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) = 0;
    virtual Tensor<T> inverse(const Tensor<T>& y) = 0;
    virtual void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) = 0;
    virtual const char* kind() const = 0;

    Tensor<T> forward_plain(const Tensor<T>& x) {
        Tape<T> t(/*enable_grad=*/false);
        Var<T> xv = t.leaf(x);
        Var<T> ld = t.leaf(Tensor<T>({x.shape[0]}));
        return forward(t, xv, ld).value();
    }
};

// Per-channel affine y = s * x + b with data-dependent init to zero mean /
// unit variance. log-det = H*W * sum_c log|s_c|.
template <typename T>
struct ActNorm final : FlowLayer<T> {
    Parameter<T> scale;
    Parameter<T> bias;
    bool initialized = false;

    explicit ActNorm(int64_t channels, bool init_as_identity = false)
        : scale(Tensor<T>::full({channels}, T(1))), bias(Tensor<T>({channels})),
          initialized(init_as_identity) {}

    // Sets scale/bias so the init batch comes out with per-channel mean 0 and
    // variance 1. Variance is floored at 1e-8 (scale capped at 1e4).
    void init_from_batch(const Tensor<T>& x) {
        require_rank("actnorm_init", x, 4);
        if (x.shape[0] < 2)
            throw std::invalid_argument("actnorm_init: need >= 2 samples, got " +
                                        std::to_string(x.shape[0]));
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        for (int64_t c = 0; c < C; ++c) {
            double sum = 0, sq = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    sum += static_cast<double>(p[i]);
                    sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
                }
            }
            const double count = static_cast<double>(N * HW);
            const double mean = sum / count;
            double var = sq / count - mean * mean;
            if (var < 1e-8) {
                std::fprintf(stderr, "actnorm_init: channel %lld has near-zero variance, flooring\n",
                             static_cast<long long>(c));
                var = 1e-8;
            }
            const double s = 1.0 / std::sqrt(var);
            scale.value[c] = static_cast<T>(s);
            bias.value[c] = static_cast<T>(-mean * s);
        }
        initialized = true;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        require_initialized();
        const int64_t HW = x.shape()[2] * x.shape()[3];
        Var<T> s = t.param(scale);
        Var<T> y = t.add_channel_bias(t.mul_channel_scale(x, s), t.param(bias));
        Var<T> ld = t.mul_scalar(t.sum(t.log_abs(s)), static_cast<T>(HW));
        logdet = t.add(logdet, t.broadcast_scalar(ld, {x.shape()[0]}));
        return y;
    }

    Tensor<T> inverse(const Tensor<T>& y) override {
        require_initialized();
        require_rank("actnorm", y, 4);
        const int64_t N = y.shape[0], C = y.shape[1], HW = y.shape[2] * y.shape[3];
        Tensor<T> x(y.shape);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T s = scale.value[c], b = bias.value[c];
                const T* yp = y.ptr() + (n * C + c) * HW;
                T* xp = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) xp[i] = (yp[i] - b) / s;
            }
        return x;
    }

    // Keeps |scale| >= 1e-8; call after each optimizer step.
    void clamp_scale() {
        for (auto& s : scale.value.data)
            if (std::abs(s) < T(1e-8)) s = s < T(0) ? T(-1e-8) : T(1e-8);
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) override {
        fn(prefix + ".scale", scale);
        fn(prefix + ".bias", bias);
    }
    const char* kind() const override { return "actnorm"; }

  private:
    void require_initialized() const {
        if (!initialized)
            throw std::logic_error("actnorm: uninitialized; run data-dependent init on a batch first");
    }
};

// Invertible 1x1 convolution in LU form: W = P * L * (U' + diag(s * exp(d)))
// with P and the diagonal signs fixed at init. log-det = H*W * sum(d), exact
// and never singular.
template <typename T>
struct Inv1x1 final : FlowLayer<T> {
    int64_t channels;
    std::vector<int64_t> perm;  // row i of W takes row perm[i] of L*U
    Tensor<T> sign;             // (C), +-1
    Parameter<T> lower;         // (C,C), strictly lower used
    Parameter<T> upper;         // (C,C), strictly upper used
    Parameter<T> log_diag;      // (C)

    Inv1x1(int64_t c, RngStream& rng, bool identity_init = false)
        : channels(c), sign(Tensor<T>::full({c}, T(1))), lower(Tensor<T>({c, c})),
          upper(Tensor<T>({c, c})), log_diag(Tensor<T>({c})) {
        perm.resize(static_cast<size_t>(c));
        for (int64_t i = 0; i < c; ++i) perm[static_cast<size_t>(i)] = i;
        if (!identity_init) init_random_rotation(rng);
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        const int64_t HW = x.shape()[2] * x.shape()[3];
        Var<T> ld_vec = t.param(log_diag);
        Var<T> w = t.reshape(assemble_taped(t, ld_vec), {channels, channels, 1, 1});
        Var<T> y = t.conv2d(x, w);
        Var<T> ld = t.mul_scalar(t.sum(ld_vec), static_cast<T>(HW));
        logdet = t.add(logdet, t.broadcast_scalar(ld, {x.shape()[0]}));
        return y;
    }

    Tensor<T> inverse(const Tensor<T>& y) override {
        require_rank("inv1x1", y, 4);
        const std::vector<T> winv = linalg::invert(assemble_plain(), channels);
        const int64_t N = y.shape[0], C = channels, HW = y.shape[2] * y.shape[3];
        Tensor<T> x(y.shape);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < C; ++co) {
                T* xp = x.ptr() + (n * C + co) * HW;
                for (int64_t ci = 0; ci < C; ++ci) {
                    const T wv = winv[static_cast<size_t>(co * C + ci)];
                    if (wv == T(0)) continue;
                    const T* yp = y.ptr() + (n * C + ci) * HW;
                    for (int64_t i = 0; i < HW; ++i) xp[i] += wv * yp[i];
                }
            }
        return x;
    }

    // Reconstructed weight matrix from the current LU parameters.
    std::vector<T> assemble_plain() const {
        const int64_t c = channels;
        std::vector<T> l(static_cast<size_t>(c * c), T(0)), u(static_cast<size_t>(c * c), T(0));
        for (int64_t i = 0; i < c; ++i) {
            l[static_cast<size_t>(i * c + i)] = T(1);
            u[static_cast<size_t>(i * c + i)] = sign[i] * std::exp(log_diag.value[i]);
            for (int64_t j = 0; j < i; ++j) l[static_cast<size_t>(i * c + j)] = lower.value[i * c + j];
            for (int64_t j = i + 1; j < c; ++j) u[static_cast<size_t>(i * c + j)] = upper.value[i * c + j];
        }
        const std::vector<T> lu = linalg::matmul(l, u, c, c, c);
        std::vector<T> w(static_cast<size_t>(c * c));
        for (int64_t i = 0; i < c; ++i)
            for (int64_t j = 0; j < c; ++j)
                w[static_cast<size_t>(i * c + j)] = lu[static_cast<size_t>(perm[static_cast<size_t>(i)] * c + j)];
        return w;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) override {
        fn(prefix + ".lower", lower);
        fn(prefix + ".upper", upper);
        fn(prefix + ".log_diag", log_diag);
    }
    const char* kind() const override { return "inv1x1"; }

  private:
    void init_random_rotation(RngStream& rng) {
        const int64_t c = channels;
        std::vector<T> q(static_cast<size_t>(c * c));
        for (auto& v : q) v = static_cast<T>(rng.normal());
        q = linalg::orthonormalize_rows(std::move(q), c);
        const linalg::LuFactors<T> f = linalg::lu_decompose(q, c);
        perm.assign(f.perm.begin(), f.perm.end());
        // invert the row permutation: PA = LU means row i of A is row inv[i] of LU
        std::vector<int64_t> inv(static_cast<size_t>(c));
        for (int64_t i = 0; i < c; ++i) inv[static_cast<size_t>(f.perm[static_cast<size_t>(i)])] = i;
        perm = inv;
        for (int64_t i = 0; i < c; ++i) {
            const T d = f.upper[static_cast<size_t>(i * c + i)];
            sign[i] = d < T(0) ? T(-1) : T(1);
            log_diag.value[i] = std::log(std::abs(d));
            for (int64_t j = 0; j < i; ++j) lower.value[i * c + j] = f.lower[static_cast<size_t>(i * c + j)];
            for (int64_t j = i + 1; j < c; ++j) upper.value[i * c + j] = f.upper[static_cast<size_t>(i * c + j)];
        }
    }

    Var<T> assemble_taped(Tape<T>& t, Var<T> ld_vec) {
        const int64_t c = channels;
        Tensor<T> mask_low({c, c}), mask_up({c, c}), eye({c, c}), pmat({c, c});
        for (int64_t i = 0; i < c; ++i) {
            eye[i * c + i] = T(1);
            pmat[i * c + perm[static_cast<size_t>(i)]] = T(1);
            for (int64_t j = 0; j < i; ++j) mask_low[i * c + j] = T(1);
            for (int64_t j = i + 1; j < c; ++j) mask_up[i * c + j] = T(1);
        }
        Var<T> l = t.add(t.mul(t.param(lower), t.constant(mask_low)), t.constant(eye));
        Var<T> diag = t.diag_embed(t.mul(t.constant(Tensor<T>({c}, sign.data)), t.exp(ld_vec)));
        Var<T> u = t.add(t.mul(t.param(upper), t.constant(mask_up)), diag);
        return t.matmul(t.constant(pmat), t.matmul(l, u));
    }
};

// Additive coupling: first channel half passes through and drives an offset
// for the rest. Unit-diagonal triangular Jacobian, log-det identically 0.
template <typename T>
struct AdditiveCoupling final : FlowLayer<T> {
    int64_t channels, split;
    ConvSubnet<T> net;

    AdditiveCoupling(int64_t c, int64_t hidden, RngStream& rng)
        : channels(c), split(c / 2), net(c / 2, hidden, c - c / 2, 3, rng) {
        if (c < 2)
            throw std::invalid_argument("additive_coupling: need >= 2 channels, got " + std::to_string(c));
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        (void)logdet;
        Var<T> x1 = t.slice_channels(x, 0, split);
        Var<T> x2 = t.slice_channels(x, split, channels);
        Var<T> y2 = t.add(x2, net.apply(t, x1));
        return t.concat_channels(x1, y2);
    }

    Tensor<T> inverse(const Tensor<T>& y) override {
        require_rank("additive_coupling", y, 4);
        Tape<T> t(/*enable_grad=*/false);
        Var<T> yv = t.leaf(y);
        Var<T> y1 = t.slice_channels(yv, 0, split);
        Var<T> x2 = t.sub(t.slice_channels(yv, split, channels), net.apply(t, y1));
        return t.concat_channels(y1, x2).value();
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) override {
        net.visit(prefix + ".m", fn);
    }
    const char* kind() const override { return "additive_coupling"; }
};

// Dense affine coupling over flat vectors with alternating even/odd masks.
// log-scale is bounded to [-4, 4] via tanh scaling.
template <typename T>
struct DenseAffineCoupling final : FlowLayer<T> {
    static constexpr T kLogScaleBound = T(4);
    int64_t dims, cond_dims;
    std::vector<int64_t> perm, inv_perm;
    MlpSubnet<T> shift_net, scale_net;

    // parity 0 conditions on even indices and transforms odd ones; parity 1 swaps.
    DenseAffineCoupling(int64_t d, int64_t hidden, int parity, RngStream& rng) : dims(d) {
        if (d < 2)
            throw std::invalid_argument("affine_coupling: need >= 2 dims, got " + std::to_string(d));
        for (int64_t i = parity % 2 == 0 ? 0 : 1; i < d; i += 2) perm.push_back(i);
        cond_dims = static_cast<int64_t>(perm.size());
        for (int64_t i = parity % 2 == 0 ? 1 : 0; i < d; i += 2) perm.push_back(i);
        inv_perm.resize(static_cast<size_t>(d));
        for (int64_t i = 0; i < d; ++i) inv_perm[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
        shift_net = MlpSubnet<T>(cond_dims, hidden, d - cond_dims, rng);
        scale_net = MlpSubnet<T>(cond_dims, hidden, d - cond_dims, rng);
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        Var<T> xp = t.permute_cols(x, perm);
        Var<T> a = t.slice_cols(xp, 0, cond_dims);
        Var<T> b = t.slice_cols(xp, cond_dims, dims);
        Var<T> ls = bounded_log_scale(t, scale_net.apply(t, a));
        Var<T> yb = t.add(t.mul(b, t.exp(ls)), shift_net.apply(t, a));
        logdet = t.add(logdet, t.sum_samples(ls));
        return t.permute_cols(t.concat_cols(a, yb), inv_perm);
    }

    Tensor<T> inverse(const Tensor<T>& y) override {
        require_rank("affine_coupling", y, 2);
        Tape<T> t(/*enable_grad=*/false);
        Var<T> yp = t.permute_cols(t.leaf(y), perm);
        Var<T> a = t.slice_cols(yp, 0, cond_dims);
        Var<T> yb = t.slice_cols(yp, cond_dims, dims);
        Var<T> ls = bounded_log_scale(t, scale_net.apply(t, a));
        Var<T> b = t.mul(t.sub(yb, shift_net.apply(t, a)), t.exp(t.neg(ls)));
        return t.permute_cols(t.concat_cols(a, b), inv_perm).value();
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) override {
        shift_net.visit(prefix + ".shift", fn);
        scale_net.visit(prefix + ".scale", fn);
    }
    const char* kind() const override { return "affine_coupling"; }

  private:
    Var<T> bounded_log_scale(Tape<T>& t, Var<T> raw) {
        return t.mul_scalar(t.tanh(t.mul_scalar(raw, T(1) / kLogScaleBound)), kLogScaleBound);
    }
};

// Space-to-channel fold (2x2 -> 4 channels). Volume-preserving permutation;
// pairs 1-channel images up so couplings and 1x1 convolutions stay non-degenerate.
template <typename T>
struct Fold2x2 final : FlowLayer<T> {
    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        (void)logdet;
        return t.fold2x2(x);
    }
    Tensor<T> inverse(const Tensor<T>& y) override {
        Tape<T> t(false);
        return t.unfold2x2(t.leaf(y)).value();
    }
    void visit_params(const std::string&, const ParamVisitor<T>&) override {}
    const char* kind() const override { return "fold2x2"; }
};

template <typename T>
struct Unfold2x2 final : FlowLayer<T> {
    Var<T> forward(Tape<T>& t, Var<T> x, Var<T>& logdet) override {
        (void)logdet;
        return t.unfold2x2(x);
    }
    Tensor<T> inverse(const Tensor<T>& y) override {
        Tape<T> t(false);
        return t.fold2x2(t.leaf(y)).value();
    }
    void visit_params(const std::string&, const ParamVisitor<T>&) override {}
    const char* kind() const override { return "unfold2x2"; }
};

// Ordered composition of invertible layers with accumulated log-det.
template <typename T>
struct FlowStack {
    std::vector<std::unique_ptr<FlowLayer<T>>> layers;

    std::pair<Var<T>, Var<T>> forward(Tape<T>& t, Var<T> x) {
        Var<T> logdet = t.leaf(Tensor<T>({x.shape()[0]}));
        Var<T> y = x;
        for (auto& l : layers) y = l->forward(t, y, logdet);
        return {y, logdet};
    }

    std::pair<Tensor<T>, Tensor<T>> forward_plain(const Tensor<T>& x) {
        Tape<T> t(/*enable_grad=*/false);
        auto [y, ld] = forward(t, t.leaf(x));
        return {y.value(), ld.value()};
    }

    Tensor<T> inverse(const Tensor<T>& y) {
        Tensor<T> x = y;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) x = (*it)->inverse(x);
        return x;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i]->visit_params(prefix + "." + std::to_string(i) + "." + layers[i]->kind(), fn);
    }

    bool actnorms_initialized() const {
        for (const auto& l : layers)
            if (const auto* an = dynamic_cast<const ActNorm<T>*>(l.get()); an && !an->initialized)
                return false;
        return true;
    }

    // Data-dependent init: walk the stack, initializing each uninitialized
    // actnorm from the activations reaching it.
    void init_actnorms(const Tensor<T>& batch) {
        Tensor<T> x = batch;
        for (auto& l : layers) {
            if (auto* an = dynamic_cast<ActNorm<T>*>(l.get()); an && !an->initialized)
                an->init_from_batch(x);
            x = l->forward_plain(x);
        }
    }

    void clamp_constraints() {
        for (auto& l : layers)
            if (auto* an = dynamic_cast<ActNorm<T>*>(l.get())) an->clamp_scale();
    }

    int64_t depth() const { return static_cast<int64_t>(layers.size()); }
};

// log p(z) under the flow prior: push z through h, evaluate the standard
// normal at u = h(z) and add the accumulated log-det.
template <typename T>
Var<T> prior_logprob(Tape<T>& t, FlowStack<T>& h, Var<T> z) {
    auto [u, logdet] = h.forward(t, z);
    Var<T> zeros_mu = t.leaf(Tensor<T>(u.shape()));
    Var<T> zeros_lv = t.leaf(Tensor<T>(u.shape()));
    return t.add(gaussian_log_prob(t, zeros_mu, zeros_lv, u), logdet);
}

template <typename T>
Tensor<T> prior_logprob_plain(FlowStack<T>& h, const Tensor<T>& z) {
    Tape<T> t(/*enable_grad=*/false);
    return prior_logprob(t, h, t.leaf(z)).value();
}

// Glow-style pixel flow: optional fold for 1-channel inputs, then depth
// blocks of actnorm -> invertible 1x1 -> additive coupling.
template <typename T>
FlowStack<T> make_pixel_flow(int64_t channels, int64_t depth, int64_t hidden, bool fold,
                             RngStream& rng, bool identity_init = false) {
    FlowStack<T> f;
    int64_t c = channels;
    if (fold) {
        f.layers.push_back(std::make_unique<Fold2x2<T>>());
        c *= 4;
    }
    for (int64_t i = 0; i < depth; ++i) {
        f.layers.push_back(std::make_unique<ActNorm<T>>(c, /*init_as_identity=*/identity_init));
        f.layers.push_back(std::make_unique<Inv1x1<T>>(c, rng, identity_init));
        f.layers.push_back(std::make_unique<AdditiveCoupling<T>>(c, hidden, rng));
    }
    if (fold) f.layers.push_back(std::make_unique<Unfold2x2<T>>());
    return f;
}

// RealNVP-style dense prior flow with alternating even/odd masks.
template <typename T>
FlowStack<T> make_prior_flow(int64_t dims, int64_t depth, int64_t hidden, RngStream& rng) {
    FlowStack<T> h;
    for (int64_t i = 0; i < depth; ++i)
        h.layers.push_back(std::make_unique<DenseAffineCoupling<T>>(dims, hidden, static_cast<int>(i % 2), rng));
    return h;
}

}  // namespace fvae
