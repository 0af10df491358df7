#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "fvae/checkpoint.hpp"
#include "fvae/config.hpp"
#include "fvae/dataset.hpp"
#include "fvae/image_io.hpp"
#include "fvae/metrics.hpp"
#include "fvae/model.hpp"
#include "fvae/train.hpp"

namespace fvae::pipeline {

// Deterministic sub-stream seeds derived from the master seed.
enum StreamId : uint64_t {
    kStreamSplit = 2,
    kStreamModelInit = 3,
    kStreamTrainPhase1 = 4,
    kStreamTrainPhase2 = 5,
    kStreamSample = 6,
    kStreamInterpolate = 7,
    kStreamEval = 8,
    kStreamCompare = 9,
};

inline uint64_t derive_seed(uint64_t seed, uint64_t stream_id) {
    return RngStream(seed, stream_id).next_u64();
}

struct Paths {
    std::string out;
    std::string phase1_ckpt, model_ckpt;
    std::string metrics1, metrics2;

    static Paths from(const ConfigMap& cfg) {
        Paths p;
        p.out = cfg.get_str("out");
        p.phase1_ckpt = p.out + "/phase1.fvae";
        p.model_ckpt = p.out + "/model.fvae";
        p.metrics1 = p.out + "/metrics_phase1.csv";
        p.metrics2 = p.out + "/metrics_phase2.csv";
        return p;
    }
};

inline void ensure_out_dir(const Paths& p) {
    std::error_code ec;
    std::filesystem::create_directories(p.out, ec);
    if (ec) throw CliError(1, "unwritable-path", p.out + ": " + ec.message());
}

// Writes the fully-resolved config beside the artifacts; re-running with
// --config on the echo reproduces the run bitwise.
inline void write_echo(const ConfigMap& cfg, const Paths& p, const std::string& command) {
    cfg.write_file(p.out + "/" + command + ".config.cfg");
}

inline void validate_common(const ConfigMap& cfg) {
    if (cfg.get_f64("train.lr") <= 0) throw CliError(2, "config-bad-value", "train.lr must be > 0");
    if (cfg.get_i64("model.prior_depth") < 1)
        throw CliError(2, "config-bad-value", "model.prior_depth must be >= 1");
    if (cfg.get_i64("model.glow_depth") < 1)
        throw CliError(2, "config-bad-value", "model.glow_depth must be >= 1");
    if (cfg.get_i64("train.batch_size") < 1)
        throw CliError(2, "config-bad-value", "train.batch_size must be >= 1");
    const std::string prec = cfg.get_str("precision");
    if (prec != "f32" && prec != "f64")
        throw CliError(2, "config-bad-value", "precision must be f32 or f64, got " + prec);
}

inline ModelConfig model_config_from(const ConfigMap& cfg) {
    ModelConfig m;
    m.channels = 1;  // all bundled loaders produce grayscale
    m.height = cfg.get_i64("data.height");
    m.width = cfg.get_i64("data.width");
    m.d_z = cfg.get_i64("model.d_z");
    m.enc_width = cfg.get_i64("model.enc_width");
    m.enc_depth = cfg.get_i64("model.enc_depth");
    m.dec_width = cfg.get_i64("model.dec_width");
    m.dec_depth = cfg.get_i64("model.dec_depth");
    const std::string var = cfg.get_str("model.decoder_variance");
    if (var == "per_pixel")
        m.decoder_variance = DecoderVariance::per_pixel;
    else if (var == "scalar")
        m.decoder_variance = DecoderVariance::scalar;
    else
        throw CliError(2, "config-bad-value", "model.decoder_variance=" + var);
    m.prior_depth = cfg.get_i64("model.prior_depth");
    m.prior_hidden = cfg.get_i64("model.prior_hidden");
    m.glow_depth = cfg.get_i64("model.glow_depth");
    m.glow_hidden = cfg.get_i64("model.glow_hidden");
    const std::string fold = cfg.get_str("model.fold");
    if (fold == "auto")
        m.fold = m.channels == 1;
    else if (fold == "on")
        m.fold = true;
    else if (fold == "off")
        m.fold = false;
    else
        throw CliError(2, "config-bad-value", "model.fold=" + fold);
    if (m.fold && (m.height % 2 != 0 || m.width % 2 != 0))
        throw CliError(2, "config-bad-value", "model.fold requires even data extents");
    if (!m.fold && m.channels < 2)
        throw CliError(2, "config-bad-value",
                       "model.fold=off needs >= 2 channels for coupling layers");
    return m;
}

template <typename T>
Dataset<T> build_dataset(const ConfigMap& cfg) {
    const std::string kind = cfg.get_str("data.kind");
    const int64_t n = cfg.get_i64("data.n");
    const int64_t h = cfg.get_i64("data.height"), w = cfg.get_i64("data.width");
    const std::string path = cfg.get_str("data.path");
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    if (kind == "blobs" || kind == "bars") {
        RngStream rng(seed);
        return synth_dataset<T>(kind, n, h, w, rng);
    }
    if (kind == "digits-subset" || kind == "idx") {
        if (path == "_unset_" || !std::filesystem::exists(path))
            throw CliError(2, "dataset-path-missing",
                           "data.path='" + path +
                               "'; place a local IDX ubyte file there (no download is performed)");
        if (kind == "idx") {
            Dataset<T> ds = load_idx<T>(path);
            if (ds.size() == 0) throw CliError(2, "dataset-empty", path);
            return ds;
        }
        return digits_subset<T>(path, n, h, w);
    }
    throw CliError(2, "config-bad-value", "data.kind=" + kind);
}

template <typename T>
DataSplit<T> build_split(const ConfigMap& cfg) {
    Dataset<T> pool = build_dataset<T>(cfg);
    RngStream split_rng(derive_seed(static_cast<uint64_t>(cfg.get_i64("seed")), kStreamSplit));
    return split_dataset(pool, cfg.get_f64("data.test_frac"), split_rng);
}

template <typename T>
TrainOptions train_options(const ConfigMap& cfg, const Paths& p, int phase) {
    TrainOptions o;
    o.epochs = cfg.get_i64(phase == 1 ? "train.epochs_phase1" : "train.epochs_phase2");
    o.batch_size = cfg.get_i64("train.batch_size");
    o.lr = cfg.get_f64("train.lr");
    o.lr_halve_every = cfg.get_i64("train.lr_halve_every");
    o.n_mc = static_cast<int>(cfg.get_i64("train.n_mc"));
    o.save_every = cfg.get_i64("train.save_every");
    o.checkpoint_path = phase == 1 ? p.phase1_ckpt : p.model_ckpt;
    o.metrics_path = phase == 1 ? p.metrics1 : p.metrics2;
    return o;
}

// Loads a checkpoint into a config-constructed model. Missing file and wrong
// phase are distinct precondition failures.
template <typename T>
HybridModel<T> load_model(const ConfigMap& cfg, const std::string& ckpt_path,
                          const char* missing_slug, Adam<T>* opt = nullptr,
                          RngStream* rng = nullptr, int64_t* epoch_out = nullptr) {
    if (!std::filesystem::exists(ckpt_path)) throw CliError(2, missing_slug, ckpt_path);
    RngStream init_rng(derive_seed(static_cast<uint64_t>(cfg.get_i64("seed")), kStreamModelInit));
    HybridModel<T> model(model_config_from(cfg), init_rng);
    try {
        const int64_t epoch = load_checkpoint(model, ckpt_path, opt, rng);
        if (epoch_out) *epoch_out = epoch;
    } catch (const std::runtime_error& e) {
        throw CliError(2, "checkpoint-invalid", e.what());
    }
    return model;
}

// ---- commands --------------------------------------------------------------

template <typename T>
int cmd_train_vae(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "train-vae");
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    DataSplit<T> split = build_split<T>(cfg);
    const TrainOptions opt = train_options<T>(cfg, p, 1);

    RngStream init_rng(derive_seed(seed, kStreamModelInit));
    HybridModel<T> model(model_config_from(cfg), init_rng);
    Adam<T> adam(static_cast<T>(opt.lr));
    RngStream train_rng(derive_seed(seed, kStreamTrainPhase1));
    int64_t start_epoch = 0;
    if (cfg.get_bool("train.resume") && std::filesystem::exists(p.phase1_ckpt)) {
        try {
            start_epoch = load_checkpoint(model, p.phase1_ckpt, &adam, &train_rng);
        } catch (const std::runtime_error& e) {
            throw CliError(2, "checkpoint-invalid", e.what());
        }
    }
    const auto stats = train_vae_phase1(model, split.train, opt, adam, train_rng, start_epoch);
    if (!std::filesystem::exists(p.phase1_ckpt) || start_epoch >= opt.epochs)
        save_checkpoint(model, p.phase1_ckpt, &adam, &train_rng, opt.epochs);
    if (!stats.empty())
        std::cout << "phase-1 done: epochs=" << opt.epochs << " final elbo=" << stats.back().elbo
                  << " recon=" << stats.back().recon << " kl=" << stats.back().kl << "\n";
    std::cout << "checkpoint: " << p.phase1_ckpt << "\n";
    return 0;
}

template <typename T>
int cmd_train_glow(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "train-glow");
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    DataSplit<T> split = build_split<T>(cfg);
    const TrainOptions opt = train_options<T>(cfg, p, 2);

    Adam<T> adam(static_cast<T>(opt.lr));
    RngStream train_rng(derive_seed(seed, kStreamTrainPhase2));
    int64_t start_epoch = 0;
    HybridModel<T> model = [&]() {
        if (cfg.get_bool("train.resume") && std::filesystem::exists(p.model_ckpt))
            return load_model<T>(cfg, p.model_ckpt, "model-checkpoint-missing", &adam, &train_rng,
                                 &start_epoch);
        return load_model<T>(cfg, p.phase1_ckpt, "phase1-checkpoint-missing");
    }();
    if (model.phase == Phase::phase1)
        throw CliError(2, "phase1-incomplete", p.phase1_ckpt + " was saved before phase 1 finished");
    const uint64_t frozen_hash = model.phase1_param_hash();
    const auto stats = train_glow_phase2(model, split.train, opt, adam, train_rng, start_epoch);
    if (model.phase1_param_hash() != frozen_hash)
        throw CliError(1, "freeze-violation", "phase-1 parameters changed during phase 2");
    if (!std::filesystem::exists(p.model_ckpt) || start_epoch >= opt.epochs)
        save_checkpoint(model, p.model_ckpt, &adam, &train_rng, opt.epochs);
    if (!stats.empty())
        std::cout << "phase-2 done: epochs=" << opt.epochs
                  << " final loglik=" << stats.back().recon << "\n";
    std::cout << "checkpoint: " << p.model_ckpt << "\n";
    return 0;
}

template <typename T>
int cmd_sample(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "sample");
    HybridModel<T> model = load_model<T>(cfg, p.model_ckpt, "model-checkpoint-missing");
    if (model.phase != Phase::complete)
        throw CliError(2, "model-not-complete", p.model_ckpt);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    RngStream rng(derive_seed(seed, kStreamSample));
    const int64_t n = cfg.get_i64("sample.n");
    const T temp = static_cast<T>(cfg.get_f64("sample.temperature"));
    Tensor<T> samples = model.sample(n, temp, rng);
    export_grid(samples, cfg.get_i64("sample.cols"), p.out + "/samples.pgm");
    // side-by-side sharpening pairs: left g_mu(z), right f^{-1}(xbar)
    const int64_t pairs = std::min<int64_t>(8, n);
    Tensor<T> u({pairs, model.cfg.d_z});
    rng.fill_normal(u);
    Tensor<T> z = model.prior_flow.inverse(u);
    Tensor<T> grid({2 * pairs, model.cfg.channels, model.cfg.height, model.cfg.width});
    const int64_t per = model.cfg.pixel_dims();
    for (int64_t i = 0; i < pairs; ++i) {
        Tensor<T> zi({1, model.cfg.d_z});
        std::copy(z.ptr() + i * model.cfg.d_z, z.ptr() + (i + 1) * model.cfg.d_z, zi.ptr());
        auto [vae_img, glow_img] = model.sharpen_pair(zi, temp, rng);
        std::copy(vae_img.ptr(), vae_img.ptr() + per, grid.ptr() + (2 * i) * per);
        std::copy(glow_img.ptr(), glow_img.ptr() + per, grid.ptr() + (2 * i + 1) * per);
    }
    export_grid(grid, 2, p.out + "/sharpen.pgm");
    std::cout << "wrote " << p.out << "/samples.pgm and " << p.out << "/sharpen.pgm\n";
    return 0;
}

template <typename T>
int cmd_interpolate(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "interpolate");
    HybridModel<T> model = load_model<T>(cfg, p.model_ckpt, "model-checkpoint-missing");
    if (model.phase != Phase::complete)
        throw CliError(2, "model-not-complete", p.model_ckpt);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    RngStream rng(derive_seed(seed, kStreamInterpolate));
    const int64_t steps = cfg.get_i64("interpolate.steps");
    const T temp = static_cast<T>(cfg.get_f64("interpolate.temperature"));
    const int64_t rows = 4;
    Tensor<T> grid({rows * steps, model.cfg.channels, model.cfg.height, model.cfg.width});
    const int64_t per = model.cfg.pixel_dims();
    for (int64_t r = 0; r < rows; ++r) {
        Tensor<T> u({2, model.cfg.d_z});
        rng.fill_normal(u);
        Tensor<T> z = model.prior_flow.inverse(u);
        Tensor<T> za({model.cfg.d_z}), zb({model.cfg.d_z});
        std::copy(z.ptr(), z.ptr() + model.cfg.d_z, za.ptr());
        std::copy(z.ptr() + model.cfg.d_z, z.ptr() + 2 * model.cfg.d_z, zb.ptr());
        Tensor<T> row = model.interpolate(za, zb, steps, temp, rng);
        std::copy(row.ptr(), row.ptr() + steps * per, grid.ptr() + r * steps * per);
    }
    export_grid(grid, steps, p.out + "/interpolation.pgm");
    std::cout << "wrote " << p.out << "/interpolation.pgm\n";
    return 0;
}

template <typename T>
int cmd_eval(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "eval");
    HybridModel<T> model = load_model<T>(cfg, p.model_ckpt, "model-checkpoint-missing");
    if (model.phase != Phase::complete)
        throw CliError(2, "model-not-complete", p.model_ckpt);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    DataSplit<T> split = build_split<T>(cfg);
    const int n_mc = static_cast<int>(cfg.get_i64("eval.n_mc"));
    const uint64_t deq_seed = static_cast<uint64_t>(cfg.get_i64("eval.dequant_seed"));

    EvalReport report;
    report.n_mc = n_mc;
    report.config_hash = cfg.hash();
    {
        RngStream rng(derive_seed(seed, kStreamEval));
        const double bound = eval_bound_nats(model, split.test, n_mc, rng, deq_seed, true);
        report.nll_bound_nats = -bound;
        report.bits_per_dim = bits_per_dim_from_nats(-bound, model.cfg.pixel_dims());
    }
    {
        RngStream rng(derive_seed(seed, kStreamEval));
        const double bound = eval_bound_nats(model, split.test, n_mc, rng, deq_seed, false);
        report.bits_per_dim_vae = bits_per_dim_from_nats(-bound, model.cfg.pixel_dims());
    }
    {
        RngStream rng(derive_seed(seed, kStreamSample));
        const int64_t k = cfg.get_i64("eval.frechet_k");
        const int64_t n_fake = std::max<int64_t>(2 * k, split.test.size() *
                                                            cfg.get_i64("eval.fake_multiplier"));
        Tensor<T> fake =
            model.sample(n_fake, static_cast<T>(cfg.get_f64("sample.temperature")), rng);
        report.frechet_proxy = frechet_proxy(split.test.images, fake, k);
    }
    if (std::filesystem::exists(p.metrics1))
        report.phase1_s_per_epoch = mean_csv_column(p.metrics1, "wall_seconds");
    if (std::filesystem::exists(p.metrics2))
        report.phase2_s_per_epoch = mean_csv_column(p.metrics2, "wall_seconds");

    std::ofstream txt(p.out + "/eval.txt");
    txt << report.to_text();
    report.to_csv(p.out + "/eval.csv");
    std::cout << report.to_text();
    return 0;
}

// Samples the same first-stage decoder from the flow prior and from a freshly
// trained second-stage VAE, reporting the Frechet proxy for each.
template <typename T>
int cmd_compare_prior(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    ensure_out_dir(p);
    write_echo(cfg, p, "compare-prior");
    const std::string ckpt =
        std::filesystem::exists(p.model_ckpt) ? p.model_ckpt : p.phase1_ckpt;
    HybridModel<T> model = load_model<T>(cfg, ckpt, "phase1-checkpoint-missing");
    const uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
    DataSplit<T> split = build_split<T>(cfg);
    RngStream rng(derive_seed(seed, kStreamCompare));

    Tensor<T> latents = collect_posterior_latents(model, split.train, rng);
    SecondStageVae<T> second = train_second_stage_vae<T>(
        latents, model.cfg.d_z, cfg.get_i64("compare.hidden"), cfg.get_i64("compare.epochs"),
        cfg.get_i64("compare.batch_size"), cfg.get_f64("compare.lr"), rng);

    const int64_t k = cfg.get_i64("eval.frechet_k");
    const int64_t n_fake =
        std::max<int64_t>(2 * k, split.test.size() * cfg.get_i64("eval.fake_multiplier"));
    // flow prior: u -> h^{-1}(u) -> g_mu(z); second stage: u -> z -> g_mu(z)
    Tensor<T> u({n_fake, model.cfg.d_z});
    rng.fill_normal(u);
    Tensor<T> flow_images = model.decode(model.prior_flow.inverse(u)).mean;
    Tensor<T> second_images = model.decode(second.sample_z(n_fake, rng)).mean;
    const double proxy_flow = frechet_proxy(split.test.images, flow_images, k);
    const double proxy_second = frechet_proxy(split.test.images, second_images, k);

    std::ostringstream os;
    os << "prior comparison (Frechet proxy on PCA features; proxy, not FID; lower is better)\n";
    os << "flow prior        " << proxy_flow << "\n";
    os << "second-stage VAE  " << proxy_second << "\n";
    os << "note: directional result recorded, not asserted (desk-scale noise)\n";
    std::ofstream txt(p.out + "/compare_prior.txt");
    txt << os.str();
    append_csv_row(p.out + "/compare_prior.csv", {"proxy_flow_prior_not_fid", "proxy_second_stage_not_fid"},
                   {proxy_flow, proxy_second});
    const int64_t grid_n = std::min<int64_t>(16, n_fake);
    Tensor<T> flow_head({grid_n, model.cfg.channels, model.cfg.height, model.cfg.width});
    Tensor<T> second_head(flow_head.shape);
    std::copy(flow_images.ptr(), flow_images.ptr() + flow_head.numel(), flow_head.ptr());
    std::copy(second_images.ptr(), second_images.ptr() + second_head.numel(), second_head.ptr());
    export_grid(flow_head, 4, p.out + "/compare_flow_prior.pgm");
    export_grid(second_head, 4, p.out + "/compare_second_stage.pgm");
    std::cout << os.str();
    return 0;
}

inline int cmd_report(const ConfigMap& cfg) {
    const Paths p = Paths::from(cfg);
    if (!std::filesystem::exists(p.metrics1))
        throw CliError(2, "metrics-missing", p.metrics1);
    if (!std::filesystem::exists(p.metrics2))
        throw CliError(2, "metrics-missing", p.metrics2);
    const TimingReport r = timing_report(p.metrics1, p.metrics2);
    ensure_out_dir(p);
    std::ofstream txt(p.out + "/timing.txt");
    txt << r.to_text();
    std::cout << r.to_text();
    return 0;
}

inline int run_command(const std::string& command, const ConfigMap& cfg) {
    validate_common(cfg);
    const bool f64 = cfg.get_str("precision") == "f64";
    if (command == "train-vae") return f64 ? cmd_train_vae<double>(cfg) : cmd_train_vae<float>(cfg);
    if (command == "train-glow")
        return f64 ? cmd_train_glow<double>(cfg) : cmd_train_glow<float>(cfg);
    if (command == "sample") return f64 ? cmd_sample<double>(cfg) : cmd_sample<float>(cfg);
    if (command == "interpolate")
        return f64 ? cmd_interpolate<double>(cfg) : cmd_interpolate<float>(cfg);
    if (command == "eval") return f64 ? cmd_eval<double>(cfg) : cmd_eval<float>(cfg);
    if (command == "compare-prior")
        return f64 ? cmd_compare_prior<double>(cfg) : cmd_compare_prior<float>(cfg);
    if (command == "report") return cmd_report(cfg);
    throw CliError(2, "unknown-command", command);
}

}  // namespace fvae::pipeline
