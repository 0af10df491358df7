#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "fvae/adam.hpp"
#include "fvae/flow.hpp"
#include "fvae/gaussian.hpp"
#include "fvae/nets.hpp"

namespace fvae {

enum class Phase { phase1, phase2, complete };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::phase1: return "phase1";
        case Phase::phase2: return "phase2";
        default: return "complete";
    }
}

struct ModelConfig {
    int64_t channels = 1;
    int64_t height = 8;
    int64_t width = 8;
    int64_t d_z = 16;
    int64_t enc_width = 32;
    int64_t enc_depth = 2;
    int64_t dec_width = 32;
    int64_t dec_depth = 2;
    DecoderVariance decoder_variance = DecoderVariance::per_pixel;
    int64_t prior_depth = 16;
    int64_t prior_hidden = 64;
    int64_t glow_depth = 8;
    int64_t glow_hidden = 48;
    bool fold = true;               // resolved: space-to-channel fold before the pixel flow
    bool glow_identity_init = false;

    int64_t pixel_dims() const { return channels * height * width; }
};

template <typename T>
struct ElboVars {
    Var<T> recon;  // (N) E_q[log p(x|z)], 1+ sample MC
    Var<T> kl;     // (N) E_q[log q(z|x) - log p(z)]
    Var<T> elbo;   // recon - kl
};

template <typename T>
struct ElboTerms {
    Tensor<T> recon, kl, elbo;  // per-sample, shape (N)

    double mean_elbo() const { return mean_of(elbo); }
    double mean_recon() const { return mean_of(recon); }
    double mean_kl() const { return mean_of(kl); }

    static double mean_of(const Tensor<T>& v) {
        double acc = 0;
        for (const T& x : v.data) acc += static_cast<double>(x);
        return acc / static_cast<double>(v.numel());
    }
};

// The full hybrid generative model: encoder, Gaussian decoder (g_mu, g_sigma),
// dense flow prior h over the latent, and Glow-style pixel flow f whose base
// density is the decoder distribution.
template <typename T>
struct HybridModel {
    ModelConfig cfg;
    Encoder<T> encoder;
    Decoder<T> decoder;
    FlowStack<T> prior_flow;
    FlowStack<T> pixel_flow;
    Phase phase = Phase::phase1;

    HybridModel(const ModelConfig& c, RngStream& rng)
        : cfg(c),
          encoder(c.channels, c.height, c.width, c.enc_width, c.enc_depth, c.d_z, rng),
          decoder(c.channels, c.height, c.width, c.dec_width, c.dec_depth, c.d_z,
                  c.decoder_variance, rng),
          prior_flow(make_prior_flow<T>(c.d_z, c.prior_depth, c.prior_hidden, rng)),
          pixel_flow(make_pixel_flow<T>(c.channels, c.glow_depth, c.glow_hidden, c.fold, rng,
                                        c.glow_identity_init)) {}

    // ---- parameter traversal ----------------------------------------------

    void visit_phase1_params(const ParamVisitor<T>& fn) {
        encoder.visit("enc", fn);
        decoder.visit("dec", fn);
        prior_flow.visit_params("prior", fn);
    }
    void visit_glow_params(const ParamVisitor<T>& fn) { pixel_flow.visit_params("glow", fn); }
    void visit_params(const ParamVisitor<T>& fn) {
        visit_phase1_params(fn);
        visit_glow_params(fn);
    }

    std::vector<NamedParam<T>> phase1_params() { return collect([this](auto& fn) { visit_phase1_params(fn); }); }
    std::vector<NamedParam<T>> glow_params() { return collect([this](auto& fn) { visit_glow_params(fn); }); }
    std::vector<NamedParam<T>> all_params() { return collect([this](auto& fn) { visit_params(fn); }); }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&](const std::string&, Parameter<T>& p) { n += p.value.numel(); });
        return n;
    }

    // FNV-1a over names and raw value bytes; used for the freeze contract.
    uint64_t phase1_param_hash() {
        uint64_t h = 14695981039346656037ULL;
        auto mix = [&h](const void* data, size_t len) {
            const unsigned char* p = static_cast<const unsigned char*>(data);
            for (size_t i = 0; i < len; ++i) {
                h ^= p[i];
                h *= 1099511628211ULL;
            }
        };
        visit_phase1_params([&](const std::string& name, Parameter<T>& p) {
            mix(name.data(), name.size());
            mix(p.value.data.data(), p.value.data.size() * sizeof(T));
        });
        return h;
    }

    // ---- plain (no-grad) inference ------------------------------------------

    DiagGaussian<T> encode(const Tensor<T>& x) {
        check_data_shape("encode", x);
        Tape<T> t(/*enable_grad=*/false);
        auto heads = encoder.apply(t, t.leaf(x));
        return DiagGaussian<T>(heads.mean.value(), heads.log_var.value());
    }

    DiagGaussian<T> decode(const Tensor<T>& z) {
        Tape<T> t(/*enable_grad=*/false);
        auto heads = decoder.apply(t, t.leaf(z));
        return DiagGaussian<T>(heads.mean.value(), heads.log_var.value());
    }

    // log p(x|z) through the pixel flow, per sample (N).
    Tensor<T> conditional_loglik(const Tensor<T>& x, const Tensor<T>& z) {
        require_past_phase1("conditional_loglik");
        Tape<T> t(/*enable_grad=*/false);
        return build_conditional_loglik(t, x, z).value();
    }

    ElboTerms<T> elbo(const Tensor<T>& x, RngStream& rng, int n_mc, bool use_pixel_flow = false) {
        Tape<T> t(/*enable_grad=*/false);
        ElboVars<T> v = build_elbo(t, x, rng, n_mc, use_pixel_flow);
        return {v.recon.value(), v.kl.value(), v.elbo.value()};
    }

    // ---- taped builders (losses) --------------------------------------------

    // Eq. 1 terms with the flow prior; KL is the shared-sample Monte Carlo
    // estimate log q(z|x) - log p(z). With use_pixel_flow the reconstruction
    // term evaluates the conditional flow likelihood instead of the plain
    // decoder density (f(x) and its log-det are z-independent and hoisted).
    ElboVars<T> build_elbo(Tape<T>& t, const Tensor<T>& x, RngStream& rng, int n_mc,
                           bool use_pixel_flow = false) {
        check_data_shape("elbo", x);
        if (n_mc < 1) throw std::invalid_argument("elbo: n_mc must be >= 1");
        if (use_pixel_flow) require_past_phase1("elbo");
        const int64_t n = x.shape[0];
        Var<T> x_leaf = t.constant(x);
        GaussianHeads<T> q = encoder.apply(t, x_leaf);

        Var<T> fx{nullptr, -1}, fld{nullptr, -1};
        if (use_pixel_flow) {
            auto [y, ld] = pixel_flow.forward(t, x_leaf);
            fx = y;
            fld = ld;
        }

        Var<T> recon_acc{nullptr, -1}, kl_acc{nullptr, -1};
        for (int j = 0; j < n_mc; ++j) {
            Tensor<T> eps({n, cfg.d_z});
            rng.fill_normal(eps);
            Var<T> z = reparam_sample(t, q.mean, q.log_var, eps);
            Var<T> log_q = gaussian_log_prob(t, q.mean, q.log_var, z);
            Var<T> log_pz = prior_logprob(t, prior_flow, z);
            GaussianHeads<T> d = decoder.apply(t, z);
            Var<T> recon_j = use_pixel_flow
                                 ? t.add(gaussian_log_prob(t, d.mean, d.log_var, fx), fld)
                                 : gaussian_log_prob(t, d.mean, d.log_var, x_leaf);
            Var<T> kl_j = t.sub(log_q, log_pz);
            recon_acc = j == 0 ? recon_j : t.add(recon_acc, recon_j);
            kl_acc = j == 0 ? kl_j : t.add(kl_acc, kl_j);
        }
        const T inv = T(1) / static_cast<T>(n_mc);
        Var<T> recon = t.mul_scalar(recon_acc, inv);
        Var<T> kl = t.mul_scalar(kl_acc, inv);
        return {recon, kl, t.sub(recon, kl)};
    }

    // Eq. 4: log p(x|z) = log N(f(x); g_mu(z), g_sigma(z)) + log|det df/dx|.
    Var<T> build_conditional_loglik(Tape<T>& t, const Tensor<T>& x, const Tensor<T>& z) {
        check_data_shape("conditional_loglik", x);
        GaussianHeads<T> d = decoder.apply(t, t.constant(z));
        auto [fx, ld] = pixel_flow.forward(t, t.constant(x));
        return t.add(gaussian_log_prob(t, d.mean, d.log_var, fx), ld);
    }

    // Phase-2 objective: z ~ q(z|x) and decoder heads frozen; only the pixel
    // flow's parameters are on the tape.
    Var<T> build_phase2_loglik(Tape<T>& t, const Tensor<T>& x, RngStream& rng) {
        DiagGaussian<T> q = encode(x);
        Tensor<T> z = fvae::sample(q, T(1), rng);
        DiagGaussian<T> base = decode(z);
        auto [fx, ld] = pixel_flow.forward(t, t.constant(x));
        return t.add(
            gaussian_log_prob(t, t.constant(base.mean), t.constant(base.log_var), fx), ld);
    }

    // ---- sampling ------------------------------------------------------------

    // Ancestral chain: u ~ N(0,I) -> z = h^{-1}(u) -> xbar ~ N(g_mu, T^2 g_sigma)
    // -> xhat = f^{-1}(xbar). Temperature applies only to the xbar draw.
    Tensor<T> sample(int64_t n, T temperature_glow, RngStream& rng) {
        require_complete("sample");
        Tensor<T> u({n, cfg.d_z});
        rng.fill_normal(u);
        Tensor<T> z = prior_flow.inverse(u);
        return sample_given_z(z, temperature_glow, rng);
    }

    Tensor<T> sample_given_z(const Tensor<T>& z, T temperature_glow, RngStream& rng) {
        DiagGaussian<T> base = decode(z);
        Tensor<T> xbar = fvae::sample(base, temperature_glow, rng);
        return pixel_flow.inverse(xbar);
    }

    // Linear interpolation in latent space, decoded through the decoder mean
    // and pulled back through f^{-1} at the given temperature.
    Tensor<T> interpolate(const Tensor<T>& z_a, const Tensor<T>& z_b, int64_t steps,
                          T temperature_glow, RngStream& rng) {
        require_complete("interpolate");
        if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
        require_rank("interpolate", z_a, 1);
        require_same_shape("interpolate", z_a, z_b);
        const int64_t dz = z_a.shape[0];
        Tensor<T> zs({steps, dz});
        for (int64_t s = 0; s < steps; ++s) {
            const T lam = static_cast<T>(s) / static_cast<T>(steps - 1);
            for (int64_t j = 0; j < dz; ++j)
                zs[s * dz + j] = (T(1) - lam) * z_a[j] + lam * z_b[j];
        }
        return sample_given_z(zs, temperature_glow, rng);
    }

    // (g_mu(z), f^{-1}(xbar)) for the side-by-side sharpening comparison.
    std::pair<Tensor<T>, Tensor<T>> sharpen_pair(const Tensor<T>& z, T temperature_glow,
                                                 RngStream& rng) {
        require_complete("sharpen_pair");
        DiagGaussian<T> base = decode(z);
        Tensor<T> vae_image = base.mean;
        Tensor<T> glow_image = pixel_flow.inverse(fvae::sample(base, temperature_glow, rng));
        return {vae_image, glow_image};
    }

    void clamp_constraints() { pixel_flow.clamp_constraints(); }

    void check_data_shape(const char* op, const Tensor<T>& x) const {
        if (x.rank() != 4 || x.shape[1] != cfg.channels || x.shape[2] != cfg.height ||
            x.shape[3] != cfg.width)
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(x.shape) +
                                        " vs [N," + std::to_string(cfg.channels) + "," +
                                        std::to_string(cfg.height) + "," + std::to_string(cfg.width) +
                                        "]");
    }

    void require_past_phase1(const char* op) const {
        if (phase == Phase::phase1)
            throw std::logic_error(std::string(op) +
                                   ": pixel flow untrained; finish phase 1 and run train-glow");
    }
    void require_complete(const char* op) const {
        if (phase != Phase::complete)
            throw std::logic_error(std::string(op) + ": model not complete (phase is " +
                                   phase_name(phase) + ")");
    }

  private:
    template <typename Visit>
    std::vector<NamedParam<T>> collect(Visit&& visit) {
        std::vector<NamedParam<T>> out;
        ParamVisitor<T> fn = [&out](const std::string& name, Parameter<T>& p) {
            out.push_back({name, &p});
        };
        visit(fn);
        return out;
    }
};

// Auxiliary dense VAE over first-stage latents with a standard-normal prior
// (the closed-form KL baseline the flow prior is compared against).
template <typename T>
struct SecondStageVae {
    int64_t d_z, d_u, hidden;
    DenseLayer<T> enc_trunk, enc_mu, enc_lv;
    DenseLayer<T> dec_trunk, dec_mu, dec_lv;

    SecondStageVae(int64_t dz, int64_t du, int64_t hidden_, RngStream& rng)
        : d_z(dz), d_u(du), hidden(hidden_),
          enc_trunk(dz, hidden_, rng), enc_mu(hidden_, du, rng, true), enc_lv(hidden_, du, rng, true),
          dec_trunk(du, hidden_, rng), dec_mu(hidden_, dz, rng, true), dec_lv(hidden_, dz, rng, true) {}

    ElboVars<T> build_elbo(Tape<T>& t, const Tensor<T>& z_batch, RngStream& rng) {
        require_rank("second_stage_elbo", z_batch, 2);
        const int64_t n = z_batch.shape[0];
        Var<T> z = t.constant(z_batch);
        Var<T> h = t.relu(enc_trunk.apply(t, z));
        Var<T> qmu = enc_mu.apply(t, h);
        Var<T> qlv = t.clamp(enc_lv.apply(t, h), T(kLogVarMin), T(kLogVarMax));
        Tensor<T> eps({n, d_u});
        rng.fill_normal(eps);
        Var<T> u = reparam_sample(t, qmu, qlv, eps);
        Var<T> g = t.relu(dec_trunk.apply(t, u));
        Var<T> pmu = dec_mu.apply(t, g);
        Var<T> plv = t.clamp(dec_lv.apply(t, g), T(kLogVarMin), T(kLogVarMax));
        Var<T> recon = gaussian_log_prob(t, pmu, plv, z);
        Var<T> kl = kl_standard(t, qmu, qlv);
        return {recon, kl, t.sub(recon, kl)};
    }

    // Ancestral latent samples: u ~ N(0, I) -> z ~ N(dec_mu(u), dec_sigma(u)).
    Tensor<T> sample_z(int64_t n, RngStream& rng) {
        Tensor<T> u({n, d_u});
        rng.fill_normal(u);
        Tape<T> t(/*enable_grad=*/false);
        Var<T> g = t.relu(dec_trunk.apply(t, t.leaf(u)));
        DiagGaussian<T> d(dec_mu.apply(t, g).value(),
                          t.clamp(dec_lv.apply(t, g), T(kLogVarMin), T(kLogVarMax)).value());
        return fvae::sample(d, T(1), rng);
    }

    void visit_params(const ParamVisitor<T>& fn) {
        enc_trunk.visit("ss.enc_trunk", fn);
        enc_mu.visit("ss.enc_mu", fn);
        enc_lv.visit("ss.enc_lv", fn);
        dec_trunk.visit("ss.dec_trunk", fn);
        dec_mu.visit("ss.dec_mu", fn);
        dec_lv.visit("ss.dec_lv", fn);
    }

    std::vector<NamedParam<T>> params() {
        std::vector<NamedParam<T>> out;
        visit_params([&out](const std::string& name, Parameter<T>& p) { out.push_back({name, &p}); });
        return out;
    }
};

}  // namespace fvae
