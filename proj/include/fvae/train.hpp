#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "fvae/adam.hpp"
#include "fvae/checkpoint.hpp"
#include "fvae/csv.hpp"
#include "fvae/dataset.hpp"
#include "fvae/model.hpp"

namespace fvae {

struct TrainOptions {
    int64_t epochs = 200;
    int64_t batch_size = 50;
    double lr = 1e-3;
    int64_t lr_halve_every = 250;  // epochs; initial rate halves at each multiple
    int n_mc = 1;
    int64_t save_every = 1;
    std::string checkpoint_path;  // empty: no checkpoints
    std::string metrics_path;     // empty: no CSV
};

struct EpochStats {
    int64_t epoch = 0;
    double elbo = 0, recon = 0, kl = 0;  // phase 2 reports loglik in `recon`
    double wall_seconds = 0;
};

namespace detail {

template <typename T>
Tensor<T> gather_batch(const Tensor<T>& images, const std::vector<int64_t>& perm, int64_t from,
                       int64_t count) {
    const int64_t per = images.numel() / images.shape[0];
    Tensor<T> out({count, images.shape[1], images.shape[2], images.shape[3]});
    for (int64_t i = 0; i < count; ++i) {
        const int64_t src = perm[static_cast<size_t>(from + i)];
        std::copy(images.ptr() + src * per, images.ptr() + (src + 1) * per, out.ptr() + i * per);
    }
    return out;
}

inline double scheduled_lr(double base, int64_t epoch, int64_t halve_every) {
    if (halve_every <= 0) return base;
    return base * std::pow(0.5, static_cast<double>(epoch / halve_every));
}

}  // namespace detail

// Phase 1: jointly trains encoder, decoder and the flow prior by maximizing
// the mean ELBO. A NaN loss aborts, leaving the last epoch checkpoint on disk.
template <typename T>
std::vector<EpochStats> train_vae_phase1(HybridModel<T>& model, const Dataset<T>& train,
                                         const TrainOptions& opt, Adam<T>& adam, RngStream& rng,
                                         int64_t start_epoch = 0) {
    const int64_t n = train.size();
    if (n < 1) throw std::invalid_argument("train_vae_phase1: empty dataset");
    std::vector<NamedParam<T>> params = model.phase1_params();
    std::vector<EpochStats> stats;
    for (int64_t epoch = start_epoch; epoch < opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        adam.lr = static_cast<T>(detail::scheduled_lr(opt.lr, epoch, opt.lr_halve_every));
        const Tensor<T> deq = dequantize(train.images, rng);
        const std::vector<int64_t> perm = rng.permutation(n);
        double sum_elbo = 0, sum_recon = 0, sum_kl = 0;
        for (int64_t from = 0; from < n; from += opt.batch_size) {
            const int64_t count = std::min(opt.batch_size, n - from);
            const Tensor<T> batch = detail::gather_batch(deq, perm, from, count);
            Tape<T> tape;
            ElboVars<T> ev = model.build_elbo(tape, batch, rng, opt.n_mc, /*use_pixel_flow=*/false);
            Var<T> loss = tape.mul_scalar(tape.mean(ev.elbo), T(-1));
            const double loss_val = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(loss_val))
                throw std::runtime_error("nan-loss: phase-1 loss diverged at epoch " +
                                         std::to_string(epoch) + "; last-good checkpoint retained");
            tape.backward(loss);
            adam.step(params);
            sum_elbo += ElboTerms<T>::mean_of(ev.elbo.value()) * static_cast<double>(count);
            sum_recon += ElboTerms<T>::mean_of(ev.recon.value()) * static_cast<double>(count);
            sum_kl += ElboTerms<T>::mean_of(ev.kl.value()) * static_cast<double>(count);
        }
        EpochStats s;
        s.epoch = epoch;
        s.elbo = sum_elbo / static_cast<double>(n);
        s.recon = sum_recon / static_cast<double>(n);
        s.kl = sum_kl / static_cast<double>(n);
        s.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        stats.push_back(s);
        if (!opt.metrics_path.empty())
            append_csv_row(opt.metrics_path, {"epoch", "elbo", "recon", "kl", "wall_seconds"},
                           {static_cast<double>(s.epoch), s.elbo, s.recon, s.kl, s.wall_seconds});
        const bool last = epoch + 1 == opt.epochs;
        if (last) model.phase = Phase::phase2;
        if (!opt.checkpoint_path.empty() &&
            (last || (opt.save_every > 0 && (epoch + 1) % opt.save_every == 0)))
            save_checkpoint(model, opt.checkpoint_path, &adam, &rng, epoch + 1);
    }
    if (model.phase == Phase::phase1) model.phase = Phase::phase2;
    return stats;
}

// Phase 2: everything from phase 1 is frozen; only the pixel flow trains on
// E_q[log p(x|z)]. Actnorms are data-initialized from the first batch.
template <typename T>
std::vector<EpochStats> train_glow_phase2(HybridModel<T>& model, const Dataset<T>& train,
                                          const TrainOptions& opt, Adam<T>& adam, RngStream& rng,
                                          int64_t start_epoch = 0) {
    if (model.phase == Phase::phase1)
        throw std::logic_error("train_glow_phase2: phase 1 incomplete; run train-vae first");
    const int64_t n = train.size();
    if (n < 1) throw std::invalid_argument("train_glow_phase2: empty dataset");
    std::vector<NamedParam<T>> params = model.glow_params();
    std::vector<EpochStats> stats;
    for (int64_t epoch = start_epoch; epoch < opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        adam.lr = static_cast<T>(detail::scheduled_lr(opt.lr, epoch, opt.lr_halve_every));
        const Tensor<T> deq = dequantize(train.images, rng);
        const std::vector<int64_t> perm = rng.permutation(n);
        double sum_ll = 0;
        for (int64_t from = 0; from < n; from += opt.batch_size) {
            const int64_t count = std::min(opt.batch_size, n - from);
            const Tensor<T> batch = detail::gather_batch(deq, perm, from, count);
            if (!model.pixel_flow.actnorms_initialized()) model.pixel_flow.init_actnorms(batch);
            Tape<T> tape;
            Var<T> ll = model.build_phase2_loglik(tape, batch, rng);
            Var<T> loss = tape.mul_scalar(tape.mean(ll), T(-1));
            const double loss_val = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(loss_val))
                throw std::runtime_error("nan-loss: phase-2 loss diverged at epoch " +
                                         std::to_string(epoch) + "; last-good checkpoint retained");
            tape.backward(loss);
            adam.step(params);
            model.clamp_constraints();
            sum_ll += -loss_val * static_cast<double>(count);
        }
        EpochStats s;
        s.epoch = epoch;
        s.recon = sum_ll / static_cast<double>(n);
        s.elbo = s.recon;
        s.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        stats.push_back(s);
        if (!opt.metrics_path.empty())
            append_csv_row(opt.metrics_path, {"epoch", "loglik", "wall_seconds"},
                           {static_cast<double>(s.epoch), s.recon, s.wall_seconds});
        const bool last = epoch + 1 == opt.epochs;
        if (last) model.phase = Phase::complete;
        if (!opt.checkpoint_path.empty() &&
            (last || (opt.save_every > 0 && (epoch + 1) % opt.save_every == 0)))
            save_checkpoint(model, opt.checkpoint_path, &adam, &rng, epoch + 1);
    }
    model.phase = Phase::complete;
    return stats;
}

// Posterior draws (temperature 1) over a whole dataset, as (N, d_z).
template <typename T>
Tensor<T> collect_posterior_latents(HybridModel<T>& model, const Dataset<T>& data, RngStream& rng,
                                    int64_t batch_size = 100) {
    const int64_t n = data.size();
    Tensor<T> deq = dequantize(data.images, rng);
    Tensor<T> out({n, model.cfg.d_z});
    std::vector<int64_t> ident(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) ident[static_cast<size_t>(i)] = i;
    for (int64_t from = 0; from < n; from += batch_size) {
        const int64_t count = std::min(batch_size, n - from);
        DiagGaussian<T> q = model.encode(detail::gather_batch(deq, ident, from, count));
        Tensor<T> z = fvae::sample(q, T(1), rng);
        std::copy(z.ptr(), z.ptr() + z.numel(), out.ptr() + from * model.cfg.d_z);
    }
    return out;
}

// Trains the auxiliary dense VAE over first-stage latents (standard-normal
// prior, closed-form KL).
template <typename T>
SecondStageVae<T> train_second_stage_vae(const Tensor<T>& latents, int64_t d_u, int64_t hidden,
                                         int64_t epochs, int64_t batch_size, double lr,
                                         RngStream& rng) {
    require_rank("train_second_stage_vae", latents, 2);
    const int64_t n = latents.shape[0], dz = latents.shape[1];
    SecondStageVae<T> vae(dz, d_u, hidden, rng);
    Adam<T> adam(static_cast<T>(lr));
    std::vector<NamedParam<T>> params = vae.params();
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        const std::vector<int64_t> perm = rng.permutation(n);
        for (int64_t from = 0; from < n; from += batch_size) {
            const int64_t count = std::min(batch_size, n - from);
            Tensor<T> batch({count, dz});
            for (int64_t i = 0; i < count; ++i)
                std::copy(latents.ptr() + perm[static_cast<size_t>(from + i)] * dz,
                          latents.ptr() + (perm[static_cast<size_t>(from + i)] + 1) * dz,
                          batch.ptr() + i * dz);
            Tape<T> tape;
            ElboVars<T> ev = vae.build_elbo(tape, batch, rng);
            Var<T> loss = tape.mul_scalar(tape.mean(ev.elbo), T(-1));
            if (!std::isfinite(static_cast<double>(loss.value()[0])))
                throw std::runtime_error("nan-loss: second-stage VAE diverged at epoch " +
                                         std::to_string(epoch));
            tape.backward(loss);
            adam.step(params);
        }
    }
    return vae;
}

}  // namespace fvae
