#pragma once

#include <functional>
#include <string>

#include "fvae/gaussian.hpp"
#include "fvae/rng.hpp"
#include "fvae/tape.hpp"

namespace fvae {

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Parameter<T>&)>;

template <typename T>
struct Conv2dLayer {
    Parameter<T> w;  // (Co, Ci, k, k)
    Parameter<T> b;  // (Co)

    Conv2dLayer() = default;

    Conv2dLayer(int64_t ci, int64_t co, int64_t k, RngStream& rng, bool zero_init = false) {
        Tensor<T> wt({co, ci, k, k});
        if (!zero_init) rng.fill_normal(wt, static_cast<T>(std::sqrt(2.0 / static_cast<double>(ci * k * k))));
        w = Parameter<T>(std::move(wt));
        b = Parameter<T>(Tensor<T>({co}));
    }

    Var<T> apply(Tape<T>& t, Var<T> x) {
        return t.add_channel_bias(t.conv2d(x, t.param(w)), t.param(b));
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

template <typename T>
struct DenseLayer {
    Parameter<T> w;  // (In, Out)
    Parameter<T> b;  // (Out)

    DenseLayer() = default;

    DenseLayer(int64_t in, int64_t out, RngStream& rng, bool zero_init = false) {
        Tensor<T> wt({in, out});
        if (!zero_init) rng.fill_normal(wt, static_cast<T>(std::sqrt(2.0 / static_cast<double>(in))));
        w = Parameter<T>(std::move(wt));
        b = Parameter<T>(Tensor<T>({out}));
    }

    Var<T> apply(Tape<T>& t, Var<T> x) {
        return t.add_row_bias(t.matmul(x, t.param(w)), t.param(b));
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

// conv -> relu -> conv, final layer zero-initialized so the subnet starts as
// the zero map (identity-initialized couplings).
template <typename T>
struct ConvSubnet {
    Conv2dLayer<T> c1, c2;

    ConvSubnet() = default;
    ConvSubnet(int64_t ci, int64_t hidden, int64_t co, int64_t k, RngStream& rng)
        : c1(ci, hidden, k, rng), c2(hidden, co, k, rng, /*zero_init=*/true) {}

    Var<T> apply(Tape<T>& t, Var<T> x) { return c2.apply(t, t.relu(c1.apply(t, x))); }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        c1.visit(prefix + ".c1", fn);
        c2.visit(prefix + ".c2", fn);
    }
};

// Two hidden fully connected layers with ReLU, zero-initialized output head.
template <typename T>
struct MlpSubnet {
    DenseLayer<T> l1, l2, head;

    MlpSubnet() = default;
    MlpSubnet(int64_t in, int64_t hidden, int64_t out, RngStream& rng)
        : l1(in, hidden, rng), l2(hidden, hidden, rng), head(hidden, out, rng, /*zero_init=*/true) {}

    Var<T> apply(Tape<T>& t, Var<T> x) {
        Var<T> h = t.relu(l1.apply(t, x));
        h = t.relu(l2.apply(t, h));
        return head.apply(t, h);
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        l1.visit(prefix + ".l1", fn);
        l2.visit(prefix + ".l2", fn);
        head.visit(prefix + ".head", fn);
    }
};

template <typename T>
struct ResConvBlock {
    Conv2dLayer<T> c1, c2;

    ResConvBlock() = default;
    ResConvBlock(int64_t width, int64_t k, RngStream& rng) : c1(width, width, k, rng), c2(width, width, k, rng) {}

    Var<T> apply(Tape<T>& t, Var<T> x) {
        Var<T> h = t.relu(c1.apply(t, x));
        h = c2.apply(t, h);
        return t.relu(t.add(x, h));
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        c1.visit(prefix + ".c1", fn);
        c2.visit(prefix + ".c2", fn);
    }
};

template <typename T>
struct GaussianHeads {
    Var<T> mean;
    Var<T> log_var;  // clamped to [kLogVarMin, kLogVarMax]
};

// Convolutional trunk with dense mean/log-var heads over the latent.
// depth 0 gives a purely linear encoder (used by analytic tests).
template <typename T>
struct Encoder {
    int64_t channels = 1, height = 8, width_px = 8, trunk_width = 32, depth = 2, d_z = 16;
    Conv2dLayer<T> stem;
    std::vector<ResConvBlock<T>> blocks;
    DenseLayer<T> head_mu, head_lv;

    Encoder() = default;

    Encoder(int64_t c, int64_t h, int64_t w, int64_t trunk, int64_t depth_, int64_t dz, RngStream& rng)
        : channels(c), height(h), width_px(w), trunk_width(trunk), depth(depth_), d_z(dz) {
        const int64_t feat_c = depth > 0 ? trunk : c;
        if (depth > 0) {
            stem = Conv2dLayer<T>(c, trunk, 3, rng);
            for (int64_t i = 0; i < depth; ++i) blocks.emplace_back(trunk, 3, rng);
        }
        head_mu = DenseLayer<T>(feat_c * h * w, dz, rng, /*zero_init=*/true);
        head_lv = DenseLayer<T>(feat_c * h * w, dz, rng, /*zero_init=*/true);
    }

    GaussianHeads<T> apply(Tape<T>& t, Var<T> x) {
        const int64_t n = x.shape()[0];
        Var<T> h = x;
        if (depth > 0) {
            h = t.relu(stem.apply(t, h));
            for (auto& b : blocks) h = b.apply(t, h);
        }
        Var<T> flat = t.reshape(h, {n, h.value().numel() / n});
        Var<T> mu = head_mu.apply(t, flat);
        Var<T> lv = t.clamp(head_lv.apply(t, flat), T(kLogVarMin), T(kLogVarMax));
        return {mu, lv};
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        if (depth > 0) {
            stem.visit(prefix + ".stem", fn);
            for (size_t i = 0; i < blocks.size(); ++i)
                blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
        }
        head_mu.visit(prefix + ".head_mu", fn);
        head_lv.visit(prefix + ".head_lv", fn);
    }
};

enum class DecoderVariance { per_pixel, scalar };

// Dense expansion plus convolutional trunk; g_mu / g_sigma heads emit the
// pixel-shaped decoder mean and log-variance. In scalar mode, a single
// learned log-variance is broadcast over all pixels.
template <typename T>
struct Decoder {
    int64_t channels = 1, height = 8, width_px = 8, trunk_width = 32, depth = 2, d_z = 16;
    DecoderVariance variance = DecoderVariance::per_pixel;
    DenseLayer<T> fc;
    std::vector<ResConvBlock<T>> blocks;
    Conv2dLayer<T> head_mu, head_lv;
    DenseLayer<T> lin_mu, lin_lv;  // depth-0 (linear) variant
    Parameter<T> gamma_log_var;    // scalar mode

    Decoder() = default;

    Decoder(int64_t c, int64_t h, int64_t w, int64_t trunk, int64_t depth_, int64_t dz,
            DecoderVariance var_mode, RngStream& rng)
        : channels(c), height(h), width_px(w), trunk_width(trunk), depth(depth_), d_z(dz),
          variance(var_mode) {
        if (depth > 0) {
            fc = DenseLayer<T>(dz, trunk * h * w, rng);
            for (int64_t i = 0; i < depth; ++i) blocks.emplace_back(trunk, 3, rng);
            head_mu = Conv2dLayer<T>(trunk, c, 3, rng, /*zero_init=*/true);
            if (variance == DecoderVariance::per_pixel)
                head_lv = Conv2dLayer<T>(trunk, c, 3, rng, /*zero_init=*/true);
        } else {
            lin_mu = DenseLayer<T>(dz, c * h * w, rng, /*zero_init=*/true);
            if (variance == DecoderVariance::per_pixel)
                lin_lv = DenseLayer<T>(dz, c * h * w, rng, /*zero_init=*/true);
        }
        if (variance == DecoderVariance::scalar) gamma_log_var = Parameter<T>(Tensor<T>({1}));
    }

    GaussianHeads<T> apply(Tape<T>& t, Var<T> z) {
        const int64_t n = z.shape()[0];
        const Shape img{n, channels, height, width_px};
        Var<T> mu{nullptr, -1}, lv_raw{nullptr, -1};
        if (depth > 0) {
            Var<T> h = t.relu(fc.apply(t, z));
            h = t.reshape(h, {n, trunk_width, height, width_px});
            for (auto& b : blocks) h = b.apply(t, h);
            mu = head_mu.apply(t, h);
            if (variance == DecoderVariance::per_pixel) lv_raw = head_lv.apply(t, h);
        } else {
            mu = t.reshape(lin_mu.apply(t, z), img);
            if (variance == DecoderVariance::per_pixel) lv_raw = t.reshape(lin_lv.apply(t, z), img);
        }
        if (variance == DecoderVariance::scalar)
            lv_raw = t.broadcast_scalar(t.param(gamma_log_var), img);
        Var<T> lv = t.clamp(lv_raw, T(kLogVarMin), T(kLogVarMax));
        return {mu, lv};
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        if (depth > 0) {
            fc.visit(prefix + ".fc", fn);
            for (size_t i = 0; i < blocks.size(); ++i)
                blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
            head_mu.visit(prefix + ".head_mu", fn);
            if (variance == DecoderVariance::per_pixel) head_lv.visit(prefix + ".head_lv", fn);
        } else {
            lin_mu.visit(prefix + ".lin_mu", fn);
            if (variance == DecoderVariance::per_pixel) lin_lv.visit(prefix + ".lin_lv", fn);
        }
        if (variance == DecoderVariance::scalar) fn(prefix + ".gamma_log_var", gamma_log_var);
    }
};

}  // namespace fvae
