#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "fvae/csv.hpp"
#include "fvae/dataset.hpp"
#include "fvae/linalg.hpp"
#include "fvae/model.hpp"

namespace fvae {

// bits/dim under the declared convention: log-density measured on
// [0,1)-scaled dequantized data, plus the explicit 8-bit offset.
inline double bits_per_dim_from_nats(double nll_bound_nats_per_sample, int64_t dims) {
    return nll_bound_nats_per_sample / (static_cast<double>(dims) * std::log(2.0)) + 8.0;
}

// Mean per-sample likelihood bound (nats) over a dataset:
// E_q-estimated recon - kl with n_mc posterior draws. With use_pixel_flow the
// reconstruction term goes through the conditional flow likelihood. The test
// set is dequantized once with a fixed seed for comparability.
template <typename T>
double eval_bound_nats(HybridModel<T>& model, const Dataset<T>& data, int n_mc, RngStream& rng,
                       uint64_t dequant_seed, bool use_pixel_flow, int64_t batch_size = 50) {
    RngStream deq_rng(dequant_seed);
    const Tensor<T> deq = dequantize(data.images, deq_rng);
    const int64_t n = data.size();
    double total = 0;
    for (int64_t from = 0; from < n; from += batch_size) {
        const int64_t count = std::min(batch_size, n - from);
        const int64_t per = deq.numel() / n;
        Tensor<T> batch({count, deq.shape[1], deq.shape[2], deq.shape[3]});
        std::copy(deq.ptr() + from * per, deq.ptr() + (from + count) * per, batch.ptr());
        ElboTerms<T> terms = model.elbo(batch, rng, n_mc, use_pixel_flow);
        total += terms.mean_elbo() * static_cast<double>(count);
    }
    return total / static_cast<double>(n);
}

template <typename T>
double bits_per_dim(HybridModel<T>& model, const Dataset<T>& data, int n_mc, RngStream& rng,
                    uint64_t dequant_seed, bool use_pixel_flow = true) {
    const double bound = eval_bound_nats(model, data, n_mc, rng, dequant_seed, use_pixel_flow);
    return bits_per_dim_from_nats(-bound, model.cfg.pixel_dims());
}

// ---- Frechet proxy -------------------------------------------------------------
// Frechet distance between Gaussian fits of linear PCA features. Stands in
// for FID at desk scale; NOT comparable to Inception-based FID values.

struct PcaBasis {
    int64_t dims = 0, k = 0;
    std::vector<double> mean;        // (D)
    std::vector<double> components;  // (k, D) rows, orthonormal
};

struct GaussianStats {
    std::vector<double> mean;  // (k)
    std::vector<double> cov;   // (k, k)
};

inline PcaBasis fit_pca(const std::vector<double>& data, int64_t n, int64_t dims, int64_t k) {
    if (k > dims)
        throw std::invalid_argument("fit_pca: k " + std::to_string(k) + " exceeds dims " +
                                    std::to_string(dims));
    PcaBasis basis;
    basis.dims = dims;
    basis.k = k;
    basis.mean.assign(static_cast<size_t>(dims), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < dims; ++j)
            basis.mean[static_cast<size_t>(j)] += data[static_cast<size_t>(i * dims + j)];
    for (double& m : basis.mean) m /= static_cast<double>(n);
    std::vector<double> cov(static_cast<size_t>(dims * dims), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < dims; ++a) {
            const double da = data[static_cast<size_t>(i * dims + a)] - basis.mean[static_cast<size_t>(a)];
            if (da == 0.0) continue;
            for (int64_t b = a; b < dims; ++b)
                cov[static_cast<size_t>(a * dims + b)] +=
                    da * (data[static_cast<size_t>(i * dims + b)] - basis.mean[static_cast<size_t>(b)]);
        }
    for (int64_t a = 0; a < dims; ++a)
        for (int64_t b = a; b < dims; ++b) {
            cov[static_cast<size_t>(a * dims + b)] /= static_cast<double>(n - 1);
            cov[static_cast<size_t>(b * dims + a)] = cov[static_cast<size_t>(a * dims + b)];
        }
    const linalg::EigResult eig = linalg::eigh(cov, dims);  // ascending
    basis.components.resize(static_cast<size_t>(k * dims));
    for (int64_t c = 0; c < k; ++c) {
        const int64_t src = dims - 1 - c;  // largest first
        for (int64_t j = 0; j < dims; ++j)
            basis.components[static_cast<size_t>(c * dims + j)] =
                eig.vectors[static_cast<size_t>(src * dims + j)];
    }
    return basis;
}

inline std::vector<double> project_features(const PcaBasis& basis, const std::vector<double>& data,
                                            int64_t n) {
    std::vector<double> feats(static_cast<size_t>(n * basis.k));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < basis.k; ++c) {
            double acc = 0;
            for (int64_t j = 0; j < basis.dims; ++j)
                acc += (data[static_cast<size_t>(i * basis.dims + j)] - basis.mean[static_cast<size_t>(j)]) *
                       basis.components[static_cast<size_t>(c * basis.dims + j)];
            feats[static_cast<size_t>(i * basis.k + c)] = acc;
        }
    return feats;
}

inline GaussianStats fit_gaussian(const std::vector<double>& feats, int64_t n, int64_t k) {
    GaussianStats g;
    g.mean.assign(static_cast<size_t>(k), 0.0);
    g.cov.assign(static_cast<size_t>(k * k), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < k; ++j) g.mean[static_cast<size_t>(j)] += feats[static_cast<size_t>(i * k + j)];
    for (double& m : g.mean) m /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < k; ++a) {
            const double da = feats[static_cast<size_t>(i * k + a)] - g.mean[static_cast<size_t>(a)];
            for (int64_t b = 0; b < k; ++b)
                g.cov[static_cast<size_t>(a * k + b)] +=
                    da * (feats[static_cast<size_t>(i * k + b)] - g.mean[static_cast<size_t>(b)]);
        }
    for (double& c : g.cov) c /= static_cast<double>(n - 1);
    return g;
}

// |m1-m2|^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2), matrix square roots via
// eigendecomposition of the symmetrized product. Eigenvalues are floored at
// 1e-8 against rank-deficient covariances; the result is clamped at 0.
inline double frechet_gaussian(const GaussianStats& g1, const GaussianStats& g2) {
    const int64_t k = static_cast<int64_t>(g1.mean.size());
    if (g2.mean.size() != g1.mean.size())
        throw std::invalid_argument("frechet_gaussian: feature dims differ");
    double mean_term = 0;
    for (int64_t i = 0; i < k; ++i) {
        const double d = g1.mean[static_cast<size_t>(i)] - g2.mean[static_cast<size_t>(i)];
        mean_term += d * d;
    }
    // sqrt(C1) = V sqrt(L) V^T with floored eigenvalues
    linalg::EigResult e1 = linalg::eigh(g1.cov, k);
    std::vector<double> sqrt_c1(static_cast<size_t>(k * k), 0.0);
    for (int64_t v = 0; v < k; ++v) {
        const double lam = std::sqrt(std::max(e1.values[static_cast<size_t>(v)], 1e-8));
        for (int64_t a = 0; a < k; ++a)
            for (int64_t b = 0; b < k; ++b)
                sqrt_c1[static_cast<size_t>(a * k + b)] += lam *
                                                           e1.vectors[static_cast<size_t>(v * k + a)] *
                                                           e1.vectors[static_cast<size_t>(v * k + b)];
    }
    std::vector<double> m = linalg::matmul(linalg::matmul(sqrt_c1, g2.cov, k, k, k), sqrt_c1, k, k, k);
    for (int64_t a = 0; a < k; ++a)
        for (int64_t b = a + 1; b < k; ++b) {
            const double sym = 0.5 * (m[static_cast<size_t>(a * k + b)] + m[static_cast<size_t>(b * k + a)]);
            m[static_cast<size_t>(a * k + b)] = sym;
            m[static_cast<size_t>(b * k + a)] = sym;
        }
    const linalg::EigResult em = linalg::eigh(m, k);
    double tr_sqrt = 0;
    for (double lam : em.values) tr_sqrt += std::sqrt(std::max(lam, 0.0));
    double trace_term = -2.0 * tr_sqrt;
    for (int64_t i = 0; i < k; ++i)
        trace_term += g1.cov[static_cast<size_t>(i * k + i)] + g2.cov[static_cast<size_t>(i * k + i)];
    return std::max(0.0, mean_term + trace_term);
}

template <typename T>
std::vector<double> flatten_images(const Tensor<T>& images) {
    std::vector<double> out(static_cast<size_t>(images.numel()));
    for (int64_t i = 0; i < images.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(images[i]);
    return out;
}

// PCA basis and center come from the real set; both sides are projected with
// it (documented asymmetry of the proxy).
template <typename T>
double frechet_proxy(const Tensor<T>& real, const Tensor<T>& fake, int64_t k) {
    require_rank("frechet_proxy", real, 4);
    require_rank("frechet_proxy", fake, 4);
    const int64_t dims = real.numel() / real.shape[0];
    if (fake.numel() / fake.shape[0] != dims)
        throw std::invalid_argument("frechet_proxy: shape mismatch " + shape_str(real.shape) +
                                    " vs " + shape_str(fake.shape));
    const int64_t n_real = real.shape[0], n_fake = fake.shape[0];
    if (n_real < 2 * k || n_fake < 2 * k)
        throw std::invalid_argument("frechet_proxy: need >= 2k samples per side (k=" +
                                    std::to_string(k) + ", real=" + std::to_string(n_real) +
                                    ", fake=" + std::to_string(n_fake) + ")");
    const std::vector<double> real_flat = flatten_images(real);
    const std::vector<double> fake_flat = flatten_images(fake);
    const PcaBasis basis = fit_pca(real_flat, n_real, dims, k);
    const GaussianStats g_real = fit_gaussian(project_features(basis, real_flat, n_real), n_real, k);
    const GaussianStats g_fake = fit_gaussian(project_features(basis, fake_flat, n_fake), n_fake, k);
    return frechet_gaussian(g_real, g_fake);
}

// ---- reports --------------------------------------------------------------------

struct EvalReport {
    double bits_per_dim = 0;       // hybrid bound
    double bits_per_dim_vae = 0;   // decoder-only bound, for comparison
    double nll_bound_nats = 0;     // -mean bound, hybrid
    int n_mc = 0;
    double frechet_proxy = -1;     // < 0 when not computed
    double phase1_s_per_epoch = -1;
    double phase2_s_per_epoch = -1;
    std::string config_hash;

    std::string to_text() const {
        std::ostringstream os;
        os << "bits/dim (hybrid, bound)   <= " << bits_per_dim << "\n";
        os << "bits/dim (VAE-only, bound) <= " << bits_per_dim_vae << "\n";
        os << "nll bound [nats/sample]       " << nll_bound_nats << "\n";
        os << "posterior samples (n_mc)      " << n_mc << "\n";
        if (frechet_proxy >= 0)
            os << "frechet proxy (PCA features; proxy, not FID) " << frechet_proxy << "\n";
        if (phase1_s_per_epoch >= 0) os << "phase-1 time/epoch [s]        " << phase1_s_per_epoch << "\n";
        if (phase2_s_per_epoch >= 0) os << "phase-2 time/epoch [s]        " << phase2_s_per_epoch << "\n";
        os << "config hash                   " << config_hash << "\n";
        return os.str();
    }

    void to_csv(const std::string& path) const {
        append_csv_row(path,
                       {"bits_per_dim", "bits_per_dim_vae", "nll_bound_nats", "n_mc",
                        "frechet_proxy_not_fid", "phase1_s_per_epoch", "phase2_s_per_epoch"},
                       {bits_per_dim, bits_per_dim_vae, nll_bound_nats, static_cast<double>(n_mc),
                        frechet_proxy, phase1_s_per_epoch, phase2_s_per_epoch});
    }
};

struct TimingReport {
    double vae_s_per_epoch = -1;
    double glow_s_per_epoch = -1;

    double average() const { return 0.5 * (vae_s_per_epoch + glow_s_per_epoch); }

    std::string to_text() const {
        std::ostringstream os;
        os << "Time/epoch (seconds)\n";
        if (vae_s_per_epoch >= 0) os << "VAE   " << vae_s_per_epoch << "\n";
        if (glow_s_per_epoch >= 0) os << "Glow  " << glow_s_per_epoch << "\n";
        if (vae_s_per_epoch >= 0 && glow_s_per_epoch >= 0) os << "Avg.  " << average() << "\n";
        return os.str();
    }
};

inline double mean_csv_column(const std::string& path, const std::string& column) {
    const CsvTable t = read_csv(path);
    const std::vector<double> vals = t.column_values(column);
    if (vals.empty()) throw std::runtime_error("timing_report: '" + path + "' has no rows");
    double acc = 0;
    for (double v : vals) acc += v;
    return acc / static_cast<double>(vals.size());
}

inline TimingReport timing_report(const std::string& phase1_csv, const std::string& phase2_csv) {
    TimingReport r;
    r.vae_s_per_epoch = mean_csv_column(phase1_csv, "wall_seconds");
    r.glow_s_per_epoch = mean_csv_column(phase2_csv, "wall_seconds");
    return r;
}

}  // namespace fvae
