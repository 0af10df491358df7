#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fvae/linalg.hpp"
#include "fvae/model.hpp"
#include "fvae/train.hpp"

using namespace fvae;

namespace {

constexpr double kPi = 3.14159265358979323846;

ModelConfig tiny_config() {
    ModelConfig c;
    c.channels = 1;
    c.height = 4;
    c.width = 4;
    c.d_z = 2;
    c.enc_width = 4;
    c.enc_depth = 1;
    c.dec_width = 4;
    c.dec_depth = 1;
    c.prior_depth = 2;
    c.prior_hidden = 4;
    c.glow_depth = 1;
    c.glow_hidden = 4;
    c.fold = true;
    return c;
}

template <typename T>
void perturb_all(HybridModel<T>& m, RngStream& rng, T scale) {
    m.visit_params([&](const std::string&, Parameter<T>& p) {
        for (auto& v : p.value.data) v += static_cast<T>(rng.normal()) * scale;
    });
}

template <typename T>
std::vector<T> snapshot(HybridModel<T>& m) {
    std::vector<T> out;
    m.visit_params([&](const std::string&, Parameter<T>& p) {
        out.insert(out.end(), p.value.data.begin(), p.value.data.end());
    });
    return out;
}

}  // namespace

TEST_CASE("posteriors are per-sample: perturbing one sample leaves the other bitwise unchanged") {
    RngStream rng(40);
    HybridModel<double> m(tiny_config(), rng);
    perturb_all(m, rng, 0.1);
    Tensor<double> x({2, 1, 4, 4});
    rng.fill_normal(x);
    DiagGaussian<double> before = m.encode(x);
    for (int64_t i = 0; i < 16; ++i) x[i] += 0.5;  // perturb sample 0 only
    DiagGaussian<double> after = m.encode(x);
    for (int64_t j = 0; j < 2; ++j) {
        CHECK(before.mean[2 + j] == after.mean[2 + j]);
        CHECK(before.log_var[2 + j] == after.log_var[2 + j]);
    }
    CHECK(before.mean[0] != after.mean[0]);
}

TEST_CASE("zero-initialized heads emit the standard normal posterior for any input") {
    RngStream rng(41);
    HybridModel<double> m(tiny_config(), rng);  // heads are zero-initialized by construction
    Tensor<double> x({3, 1, 4, 4});
    rng.fill_normal(x);
    DiagGaussian<double> q = m.encode(x);
    for (int64_t i = 0; i < q.mean.numel(); ++i) {
        CHECK(q.mean[i] == 0.0);
        CHECK(q.log_var[i] == 0.0);
    }
}

TEST_CASE("with q forced equal to the prior the KL estimate is zero in expectation") {
    RngStream rng(42);
    HybridModel<double> m(tiny_config(), rng);  // q = p = N(0, I) at init
    Tensor<double> x({4, 1, 4, 4});
    rng.fill_normal(x);
    double sum = 0, sq = 0;
    int64_t count = 0;
    for (int rep = 0; rep < 2500; ++rep) {
        ElboTerms<double> terms = m.elbo(x, rng, 1);
        for (double v : terms.kl.data) {
            sum += v;
            sq += v * v;
            ++count;
        }
    }
    const double mean = sum / static_cast<double>(count);
    const double stderr_ = std::sqrt((sq / static_cast<double>(count) - mean * mean) /
                                     static_cast<double>(count));
    CHECK(std::abs(mean) < 3.0 * stderr_ + 1e-12);
}

TEST_CASE("zero decoder with unit variance reconstructs x=0 at exactly -(D/2) log 2pi") {
    RngStream rng(43);
    ModelConfig c = tiny_config();
    c.dec_depth = 0;  // linear decoder, zero-initialized: mu = 0, log_var = 0
    HybridModel<double> m(c, rng);
    Tensor<double> x({2, 1, 4, 4});  // zeros: matches the decoder mean exactly
    ElboTerms<double> terms = m.elbo(x, rng, 1);
    const double expect = -0.5 * 16.0 * std::log(2.0 * kPi);
    CHECK(terms.recon[0] == doctest::Approx(expect).epsilon(1e-14));
    CHECK(terms.recon[1] == doctest::Approx(expect).epsilon(1e-14));
    // elbo = recon - kl holds exactly per sample
    for (int i = 0; i < 2; ++i)
        CHECK(terms.elbo[i] == doctest::Approx(terms.recon[i] - terms.kl[i]).epsilon(1e-14));
}

TEST_CASE("n_mc=256 agrees with 256 single-sample estimates within 2 stderr") {
    RngStream rng(44);
    HybridModel<double> m(tiny_config(), rng);
    perturb_all(m, rng, 0.1);
    Tensor<double> x({1, 1, 4, 4});
    rng.fill_normal(x, 0.5);
    const double big = m.elbo(x, rng, 256).mean_elbo();
    double sum = 0, sq = 0;
    for (int rep = 0; rep < 256; ++rep) {
        const double v = m.elbo(x, rng, 1).mean_elbo();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / 256.0;
    const double var = sq / 256.0 - mean * mean;
    const double stderr_ = std::sqrt(var / 256.0);
    CHECK(std::abs(big - mean) < 2.0 * 2.0 * stderr_);  // both sides are noisy
}

TEST_CASE("batch evaluation equals per-sample evaluation with the same draws") {
    const uint64_t seed = 45;
    RngStream init_rng(seed);
    HybridModel<double> m(tiny_config(), init_rng);
    perturb_all(m, init_rng, 0.1);
    const int64_t n = 8, dz = m.cfg.d_z;
    Tensor<double> x({n, 1, 4, 4});
    init_rng.fill_normal(x, 0.5);

    RngStream batch_rng(777);
    ElboTerms<double> batched = m.elbo(x, batch_rng, 1);
    for (int64_t i = 0; i < n; ++i) {
        Tensor<double> xi({1, 1, 4, 4});
        std::copy(x.ptr() + i * 16, x.ptr() + (i + 1) * 16, xi.ptr());
        // each normal draw consumes two counter steps, so sample i's noise
        // starts at counter 2*dz*i within the batch draw
        RngStream one_rng(777, 2 * dz * i);
        ElboTerms<double> single = m.elbo(xi, one_rng, 1);
        CHECK(std::abs(single.elbo[0] - batched.elbo[i]) /
                  std::max(std::abs(batched.elbo[i]), 1.0) <
              1e-6);
    }
}

TEST_CASE("learning rate 0 leaves parameters bitwise unchanged") {
    RngStream rng(46);
    HybridModel<float> m(tiny_config(), rng);
    perturb_all(m, rng, 0.1f);
    const std::vector<float> before = snapshot(m);
    Dataset<float> data = synth_dataset<float>("blobs", 16, 4, 4, rng);
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch_size = 8;
    opt.lr = 0.0;
    Adam<float> adam(0.0f);
    RngStream train_rng(47);
    train_vae_phase1(m, data, opt, adam, train_rng);
    CHECK(snapshot(m) == before);
}

TEST_CASE("training improves the ELBO and shrinks the decoder variance on fittable data") {
    RngStream rng(48);
    ModelConfig c = tiny_config();
    c.height = 8;
    c.width = 8;
    c.enc_width = 8;
    c.dec_width = 8;
    c.d_z = 4;
    HybridModel<float> m(c, rng);
    RngStream data_rng(7);
    Dataset<float> data = synth_dataset<float>("blobs", 128, 8, 8, data_rng);
    TrainOptions opt;
    opt.epochs = 40;
    opt.batch_size = 32;
    opt.lr = 2e-3;
    Adam<float> adam;
    RngStream train_rng(49);

    RngStream probe(50);
    const Tensor<float> probe_batch = dequantize(data.images, probe);
    auto mean_dec_logvar = [&]() {
        DiagGaussian<float> q = m.encode(probe_batch);
        DiagGaussian<float> d = m.decode(q.mean);
        double acc = 0;
        for (float v : d.log_var.data) acc += v;
        return acc / static_cast<double>(d.log_var.numel());
    };
    const double lv_before = mean_dec_logvar();
    const auto stats = train_vae_phase1(m, data, opt, adam, train_rng);
    const double lv_after = mean_dec_logvar();
    CHECK(stats.back().elbo > stats.front().elbo + 50.0);
    CHECK(lv_after < lv_before);
}

TEST_CASE("linear-Gaussian VAE: ELBO lower-bounds the exact marginal, gap < 0.5 nats") {
    // d_z=1, D=2; linear encoder/decoder, scalar decoder variance, standard
    // normal prior (prior_depth 0), so the trained model's exact marginal is
    // N(b, w w^T + gamma I) and the true posterior is representable.
    RngStream rng(51);
    ModelConfig c;
    c.channels = 1;
    c.height = 1;
    c.width = 2;
    c.d_z = 1;
    c.enc_depth = 0;
    c.dec_depth = 0;
    c.decoder_variance = DecoderVariance::scalar;
    c.prior_depth = 0;
    c.glow_depth = 0;
    c.fold = false;
    HybridModel<double> m(c, rng);

    const double w_true[2] = {1.5, -0.8};
    const double b_true[2] = {0.3, -0.2};
    const double sigma_true = 0.4;
    const int64_t n = 400;
    Tensor<double> x({n, 1, 1, 2});
    RngStream data_rng(52);
    for (int64_t i = 0; i < n; ++i) {
        const double z = data_rng.normal();
        for (int j = 0; j < 2; ++j)
            x[i * 2 + j] = w_true[j] * z + b_true[j] + sigma_true * data_rng.normal();
    }

    Adam<double> adam(0.02);
    auto params = m.phase1_params();
    RngStream train_rng(53);
    for (int step = 0; step < 4000; ++step) {
        Tape<double> t;
        ElboVars<double> ev = m.build_elbo(t, x, train_rng, 1);
        t.backward(t.mul_scalar(t.mean(ev.elbo), -1.0));
        adam.step(params);
    }

    // exact marginal of the *trained* generative model
    const Tensor<double>& w = m.decoder.lin_mu.w.value;   // (1, 2)
    const Tensor<double>& b = m.decoder.lin_mu.b.value;   // (2)
    double gamma = m.decoder.gamma_log_var.value[0];
    gamma = std::min(std::max(gamma, kLogVarMin), kLogVarMax);
    std::vector<double> cov = {w[0] * w[0] + std::exp(gamma), w[0] * w[1],
                               w[0] * w[1], w[1] * w[1] + std::exp(gamma)};
    const double logdet = linalg::log_abs_det(cov, 2);
    const std::vector<double> prec = linalg::invert(cov, 2);
    double exact = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d0 = x[i * 2] - b[0], d1 = x[i * 2 + 1] - b[1];
        const double quad = d0 * (prec[0] * d0 + prec[1] * d1) + d1 * (prec[2] * d0 + prec[3] * d1);
        exact += -0.5 * (2.0 * std::log(2.0 * kPi) + logdet + quad);
    }
    exact /= static_cast<double>(n);

    RngStream eval_rng(54);
    const double elbo = m.elbo(x, eval_rng, 256).mean_elbo();
    CHECK(elbo <= exact + 0.02);  // MC slack
    CHECK(exact - elbo < 0.5);
}

TEST_CASE("second-stage VAE trained on standard-normal latents reproduces them") {
    RngStream rng(55);
    const int64_t n = 4000, d = 2;
    Tensor<double> latents({n, d});
    rng.fill_normal(latents);
    SecondStageVae<double> vae =
        train_second_stage_vae<double>(latents, d, 32, 400, 500, 1e-3, rng);
    const int64_t ns = 20000;
    Tensor<double> s = vae.sample_z(ns, rng);
    double mean[2] = {0, 0};
    for (int64_t i = 0; i < ns; ++i)
        for (int64_t j = 0; j < d; ++j) mean[j] += s[i * d + j];
    for (int j = 0; j < d; ++j) mean[j] /= static_cast<double>(ns);
    double cov[4] = {0, 0, 0, 0};
    for (int64_t i = 0; i < ns; ++i)
        for (int64_t a = 0; a < d; ++a)
            for (int64_t b = 0; b < d; ++b)
                cov[a * 2 + b] += (s[i * d + a] - mean[a]) * (s[i * d + b] - mean[b]);
    for (int j = 0; j < 4; ++j) cov[j] /= static_cast<double>(ns - 1);
    CHECK(std::abs(mean[0]) < 0.05);
    CHECK(std::abs(mean[1]) < 0.05);
    CHECK(std::abs(cov[0] - 1.0) < 0.05);
    CHECK(std::abs(cov[3] - 1.0) < 0.05);
    CHECK(std::abs(cov[1]) < 0.05);
}

TEST_CASE("second-stage VAE recovers bimodal latents") {
    RngStream rng(56);
    const int64_t n = 3000;
    Tensor<double> latents({n, 2});
    for (int64_t i = 0; i < n; ++i) {
        const double cx = (i % 2 == 0) ? 2.0 : -2.0;
        latents[i * 2] = cx + 0.4 * rng.normal();
        latents[i * 2 + 1] = 0.4 * rng.normal();
    }
    SecondStageVae<double> vae = train_second_stage_vae<double>(latents, 2, 32, 300, 300, 2e-3, rng);
    Tensor<double> s = vae.sample_z(4000, rng);
    int64_t left = 0, right = 0;
    for (int64_t i = 0; i < 4000; ++i) (s[i * 2] < 0 ? left : right) += 1;
    CHECK(left >= 1000);   // >= 25% per mode bin
    CHECK(right >= 1000);
}

TEST_CASE("second-stage VAE ELBO gradients pass the finite-difference oracle") {
    RngStream rng(57);
    SecondStageVae<double> vae(2, 2, 4, rng);
    // shake the zero-initialized heads so gradients are generic
    for (auto& np : vae.params())
        for (auto& v : np.param->value.data) v += rng.normal() * 0.05;
    Tensor<double> z({3, 2});
    rng.fill_normal(z);
    const RngStream frozen(58);
    auto build = [&](Tape<double>& t) {
        RngStream r = frozen;
        ElboVars<double> ev = vae.build_elbo(t, z, r);
        return t.mean(ev.elbo);
    };
    CHECK(finite_diff_check<double>(build, vae.params(), 1e-5) < 1e-5);
}

TEST_CASE("ELBO gradients through encoder, decoder and prior pass the FD oracle") {
    RngStream rng(59);
    HybridModel<double> m(tiny_config(), rng);
    perturb_all(m, rng, 0.05);
    Tensor<double> x({2, 1, 4, 4});
    rng.fill_normal(x, 0.5);
    const RngStream frozen(60);
    auto build = [&](Tape<double>& t) {
        RngStream r = frozen;
        ElboVars<double> ev = m.build_elbo(t, x, r, 1);
        return t.mean(ev.elbo);
    };
    CHECK(finite_diff_check<double>(build, m.phase1_params(), 1e-5) < 1e-5);
}
