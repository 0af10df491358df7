#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "fvae/adam.hpp"
#include "fvae/flow.hpp"

using namespace fvae;

namespace {

// log|det| of the numerically assembled dense Jacobian of fwd at x0.
double numerical_logdet(const std::function<Tensor<double>(const Tensor<double>&)>& fwd,
                        const Tensor<double>& x0, double h = 1e-5) {
    const int64_t d = x0.numel();
    std::vector<double> jac(static_cast<size_t>(d * d));
    for (int64_t j = 0; j < d; ++j) {
        Tensor<double> xp = x0, xm = x0;
        xp[j] += h;
        xm[j] -= h;
        const Tensor<double> yp = fwd(xp), ym = fwd(xm);
        for (int64_t i = 0; i < d; ++i)
            jac[static_cast<size_t>(i * d + j)] = (yp[i] - ym[i]) / (2.0 * h);
    }
    return linalg::log_abs_det(jac, d);
}

template <typename T>
void perturb_params(FlowStack<T>& stack, RngStream& rng, T scale) {
    stack.visit_params("p", [&](const std::string&, Parameter<T>& p) {
        for (auto& v : p.value.data) v += static_cast<T>(rng.normal()) * scale;
    });
}

void check_logdet_against_oracle(FlowStack<double>& stack, const Shape& shape, uint64_t seed,
                                 double tol = 1e-6) {
    RngStream rng(seed);
    Tensor<double> x(shape);
    rng.fill_normal(x);
    auto [y, ld] = stack.forward_plain(x);
    (void)y;
    auto fwd = [&](const Tensor<double>& flat) {
        return stack.forward_plain(Tensor<double>(shape, flat.data)).first;
    };
    Tensor<double> flat({x.numel()}, x.data);
    const double numeric = numerical_logdet(fwd, flat);
    const double closed = ld[0];
    // relative for large log-dets, absolute for the near-zero ones
    CHECK(std::abs(closed - numeric) / std::max({std::abs(closed), std::abs(numeric), 1.0}) < tol);
}

FlowStack<double> single_layer(std::unique_ptr<FlowLayer<double>> l) {
    FlowStack<double> s;
    s.layers.push_back(std::move(l));
    return s;
}

}  // namespace

TEST_CASE("actnorm data init standardizes the batch") {
    RngStream rng(21);
    Tensor<double> batch({16, 3, 4, 4});
    rng.fill_normal(batch);
    for (int64_t i = 0; i < batch.numel(); ++i) batch[i] = batch[i] * 2.0 + 5.0;  // mean 5, std 2
    ActNorm<double> an(3);
    an.init_from_batch(batch);
    const Tensor<double> out = an.forward_plain(batch);
    for (int64_t c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        int64_t count = 0;
        for (int64_t n = 0; n < 16; ++n)
            for (int64_t i = 0; i < 16; ++i) {
                const double v = out[(n * 3 + c) * 16 + i];
                sum += v;
                sq += v * v;
                ++count;
            }
        const double mean = sum / static_cast<double>(count);
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(sq / static_cast<double>(count) - mean * mean - 1.0) < 1e-4);
    }
}

TEST_CASE("actnorm init on an already standardized batch is near-identity") {
    RngStream rng(22);
    Tensor<double> batch({4096, 1, 2, 2});
    rng.fill_normal(batch);
    ActNorm<double> an(1);
    an.init_from_batch(batch);
    CHECK(an.scale.value[0] == doctest::Approx(1.0).epsilon(0.05));
    CHECK(std::abs(an.bias.value[0]) < 0.05);
}

TEST_CASE("actnorm init on a constant channel floors the variance, stays finite") {
    Tensor<double> batch = Tensor<double>::full({4, 1, 2, 2}, 0.25);
    ActNorm<double> an(1);
    an.init_from_batch(batch);
    CHECK(std::isfinite(an.scale.value[0]));
    CHECK(an.scale.value[0] <= 1e4 + 1.0);
    const Tensor<double> out = an.forward_plain(batch);
    for (double v : out.data) CHECK(std::isfinite(v));
}

TEST_CASE("actnorm preconditions") {
    ActNorm<double> an(2);
    Tensor<double> one({1, 2, 2, 2});
    CHECK_THROWS_AS(an.init_from_batch(one), std::invalid_argument);
    Tensor<double> x({3, 2, 2, 2});
    CHECK_THROWS_WITH_AS(an.forward_plain(x),
                         "actnorm: uninitialized; run data-dependent init on a batch first",
                         std::logic_error);
}

TEST_CASE("identity-initialized pixel flow is the identity with zero log-det") {
    RngStream rng(23);
    FlowStack<double> f = make_pixel_flow<double>(1, 3, 8, /*fold=*/true, rng, /*identity_init=*/true);
    Tensor<double> x({2, 1, 4, 4});
    rng.fill_normal(x);
    auto [y, ld] = f.forward_plain(x);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-12));
    CHECK(ld[0] == 0.0);
    CHECK(ld[1] == 0.0);
}

TEST_CASE("additive couplings have zero log-det for any parameters") {
    RngStream rng(24);
    FlowStack<double> f;
    f.layers.push_back(std::make_unique<AdditiveCoupling<double>>(4, 8, rng));
    f.layers.push_back(std::make_unique<AdditiveCoupling<double>>(4, 8, rng));
    perturb_params(f, rng, 0.7);
    Tensor<double> x({3, 4, 2, 2});
    rng.fill_normal(x);
    auto [y, ld] = f.forward_plain(x);
    (void)y;
    for (int64_t i = 0; i < 3; ++i) CHECK(ld[i] == 0.0);
    // holds on odd channel counts too
    FlowStack<double> g;
    g.layers.push_back(std::make_unique<AdditiveCoupling<double>>(3, 8, rng));
    perturb_params(g, rng, 0.7);
    Tensor<double> x3({2, 3, 2, 2});
    rng.fill_normal(x3);
    CHECK(g.forward_plain(x3).second[0] == 0.0);
}

TEST_CASE("per-layer closed-form log-det matches the dense numerical Jacobian") {
    RngStream rng(25);
    SUBCASE("actnorm") {
        auto an = std::make_unique<ActNorm<double>>(2, true);
        for (int i = 0; i < 2; ++i) {
            an->scale.value[i] = 0.5 + rng.uniform();
            an->bias.value[i] = rng.normal();
        }
        FlowStack<double> s = single_layer(std::move(an));
        check_logdet_against_oracle(s, {1, 2, 4, 4}, 31);
    }
    SUBCASE("inv1x1") {
        FlowStack<double> s = single_layer(std::make_unique<Inv1x1<double>>(2, rng));
        check_logdet_against_oracle(s, {1, 2, 4, 4}, 32);
    }
    SUBCASE("inv1x1 perturbed off the rotation manifold") {
        auto inv = std::make_unique<Inv1x1<double>>(4, rng);
        for (auto& v : inv->log_diag.value.data) v += rng.normal() * 0.3;
        for (auto& v : inv->lower.value.data) v += rng.normal() * 0.2;
        for (auto& v : inv->upper.value.data) v += rng.normal() * 0.2;
        FlowStack<double> s = single_layer(std::move(inv));
        check_logdet_against_oracle(s, {1, 4, 4, 2}, 33);
    }
    SUBCASE("additive coupling") {
        auto ac = std::make_unique<AdditiveCoupling<double>>(2, 6, rng);
        FlowStack<double> s = single_layer(std::move(ac));
        perturb_params(s, rng, 0.5);
        check_logdet_against_oracle(s, {1, 2, 4, 4}, 34);
    }
    SUBCASE("dense affine coupling") {
        auto dc = std::make_unique<DenseAffineCoupling<double>>(32, 16, 0, rng);
        FlowStack<double> s = single_layer(std::move(dc));
        perturb_params(s, rng, 0.08);
        check_logdet_against_oracle(s, {1, 32}, 35);
    }
    SUBCASE("fold") {
        FlowStack<double> s = single_layer(std::make_unique<Fold2x2<double>>());
        check_logdet_against_oracle(s, {1, 1, 4, 4}, 36);
    }
}

TEST_CASE("mixed 6-layer stack log-det matches the dense oracle and sums per-layer") {
    RngStream rng(26);
    FlowStack<double> f;
    for (int block = 0; block < 2; ++block) {
        auto an = std::make_unique<ActNorm<double>>(2, true);
        for (int i = 0; i < 2; ++i) an->scale.value[i] = 0.6 + rng.uniform();
        f.layers.push_back(std::move(an));
        f.layers.push_back(std::make_unique<Inv1x1<double>>(2, rng));
        auto ac = std::make_unique<AdditiveCoupling<double>>(2, 6, rng);
        f.layers.push_back(std::move(ac));
    }
    perturb_params(f, rng, 0.2);
    f.clamp_constraints();
    check_logdet_against_oracle(f, {1, 2, 4, 4}, 37);

    // composition: total log-det equals the sum over layers
    Tensor<double> x({1, 2, 4, 4});
    RngStream rng2(38);
    rng2.fill_normal(x);
    const double total = f.forward_plain(x).second[0];
    double acc = 0;
    Tensor<double> cur = x;
    for (auto& l : f.layers) {
        FlowStack<double> one;
        Tape<double> t(false);
        Var<double> ld = t.leaf(Tensor<double>({1}));
        Var<double> y = l->forward(t, t.leaf(cur), ld);
        acc += ld.value()[0];
        cur = y.value();
    }
    CHECK(total == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("dense affine stack log-det matches the dense oracle") {
    RngStream rng(27);
    FlowStack<double> h = make_prior_flow<double>(32, 4, 16, rng);
    perturb_params(h, rng, 0.08);
    check_logdet_against_oracle(h, {1, 32}, 39);
}

TEST_CASE("round trips: pixel and prior flows invert to tolerance") {
    SUBCASE("float32") {
        RngStream rng(28);
        FlowStack<float> f = make_pixel_flow<float>(1, 4, 8, true, rng);
        Tensor<float> init({8, 1, 4, 4});
        rng.fill_normal(init);
        f.init_actnorms(init);
        perturb_params(f, rng, 0.1f);
        FlowStack<float> h = make_prior_flow<float>(8, 4, 16, rng);
        perturb_params(h, rng, 0.05f);
        float worst = 0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor<float> x({1, 1, 4, 4});
            rng.fill_normal(x);
            const Tensor<float> back = f.inverse(f.forward_plain(x).first);
            for (int64_t i = 0; i < x.numel(); ++i)
                worst = std::max(worst, std::abs(back[i] - x[i]));
            Tensor<float> z({1, 8});
            rng.fill_normal(z);
            const Tensor<float> zback = h.inverse(h.forward_plain(z).first);
            for (int64_t i = 0; i < z.numel(); ++i)
                worst = std::max(worst, std::abs(zback[i] - z[i]));
        }
        CHECK(worst < 1e-4f);
    }
    SUBCASE("float64") {
        RngStream rng(29);
        FlowStack<double> f = make_pixel_flow<double>(1, 4, 8, true, rng);
        Tensor<double> init({8, 1, 4, 4});
        rng.fill_normal(init);
        f.init_actnorms(init);
        perturb_params(f, rng, 0.1);
        FlowStack<double> h = make_prior_flow<double>(8, 4, 16, rng);
        perturb_params(h, rng, 0.05);
        double worst = 0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor<double> x({1, 1, 4, 4});
            rng.fill_normal(x);
            const Tensor<double> back = f.inverse(f.forward_plain(x).first);
            for (int64_t i = 0; i < x.numel(); ++i)
                worst = std::max(worst, std::abs(back[i] - x[i]));
            Tensor<double> z({1, 8});
            rng.fill_normal(z);
            const Tensor<double> zback = h.inverse(h.forward_plain(z).first);
            for (int64_t i = 0; i < z.numel(); ++i)
                worst = std::max(worst, std::abs(zback[i] - z[i]));
        }
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("inv1x1 weight round-trips through LU re-factorization") {
    RngStream rng(30);
    Inv1x1<double> inv(6, rng);
    for (auto& v : inv.log_diag.value.data) v += rng.normal() * 0.2;
    for (auto& v : inv.lower.value.data) v += rng.normal() * 0.2;
    const std::vector<double> w = inv.assemble_plain();
    const auto f = linalg::lu_decompose(w, 6);
    // rebuild W from the factors: row perm[i] of A equals row i of L*U
    const std::vector<double> lu = linalg::matmul(f.lower, f.upper, 6, 6, 6);
    std::vector<double> rebuilt(36);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 6; ++j)
            rebuilt[static_cast<size_t>(f.perm[static_cast<size_t>(i)] * 6 + j)] =
                lu[static_cast<size_t>(i * 6 + j)];
    double num = 0, den = 0;
    for (int64_t i = 0; i < 36; ++i) {
        num += (rebuilt[static_cast<size_t>(i)] - w[static_cast<size_t>(i)]) *
               (rebuilt[static_cast<size_t>(i)] - w[static_cast<size_t>(i)]);
        den += w[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
    }
    CHECK(std::sqrt(num / den) < 1e-6);
    // and the closed-form log-det agrees with the LU of the assembled matrix
    double ld_closed = 0;
    for (int64_t i = 0; i < 6; ++i) ld_closed += inv.log_diag.value[i];
    CHECK(ld_closed == doctest::Approx(linalg::lu_log_abs_det(f, 6)).epsilon(1e-9));
}

TEST_CASE("fresh prior flow evaluates exactly as the standard normal") {
    RngStream rng(31);
    FlowStack<double> h = make_prior_flow<double>(6, 4, 16, rng);  // zero-init heads: identity
    Tensor<double> z({3, 6});
    rng.fill_normal(z);
    const Tensor<double> lp = prior_logprob_plain(h, z);
    DiagGaussian<double> std_normal(Tensor<double>({3, 6}), Tensor<double>({3, 6}));
    const Tensor<double> expect = log_prob(std_normal, z);
    for (int i = 0; i < 3; ++i) CHECK(lp[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("affine-only prior with known scale matches the analytic change of variables") {
    RngStream rng(32);
    const double a = 2.0;  // h scales every dim by 1/a
    const double raw = 4.0 * std::atanh(std::log(1.0 / a) / 4.0);
    FlowStack<double> h = make_prior_flow<double>(4, 2, 8, rng);
    for (auto& l : h.layers) {
        auto* dc = dynamic_cast<DenseAffineCoupling<double>*>(l.get());
        REQUIRE(dc != nullptr);
        for (auto& v : dc->scale_net.head.b.value.data) v = raw;
    }
    Tensor<double> z({1, 4});
    rng.fill_normal(z);
    const double lp = prior_logprob_plain(h, z)[0];
    double expect = 0;
    const double log2pi = std::log(2.0 * 3.14159265358979323846);
    for (int i = 0; i < 4; ++i) {
        const double u = z[i] / a;
        expect += -0.5 * (log2pi + u * u) - std::log(a);
    }
    CHECK(lp == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("trained 2-D toy flow integrates to 1 on a [-6,6]^2 grid") {
    RngStream rng(33);
    FlowStack<double> h = make_prior_flow<double>(2, 2, 24, rng);
    // two-blob toy data
    const int64_t n = 400;
    Tensor<double> data({n, 2});
    for (int64_t i = 0; i < n; ++i) {
        const double cx = (rng.next_u64() & 1) ? 1.5 : -1.5;
        data[i * 2 + 0] = cx + rng.normal() * 0.5;
        data[i * 2 + 1] = rng.normal() * 0.5;
    }
    Adam<double> adam(5e-3);
    std::vector<NamedParam<double>> params;
    h.visit_params("h", [&](const std::string& name, Parameter<double>& p) {
        params.push_back({name, &p});
    });
    for (int step = 0; step < 400; ++step) {
        Tape<double> t;
        Var<double> lp = prior_logprob(t, h, t.constant(data));
        t.backward(t.mul_scalar(t.mean(lp), -1.0));
        adam.step(params);
    }
    const int64_t grid = 160;
    const double lo = -6.0, hi = 6.0, step = (hi - lo) / static_cast<double>(grid);
    Tensor<double> pts({(grid + 1) * (grid + 1), 2});
    int64_t idx = 0;
    for (int64_t i = 0; i <= grid; ++i)
        for (int64_t j = 0; j <= grid; ++j) {
            pts[idx * 2 + 0] = lo + step * static_cast<double>(i);
            pts[idx * 2 + 1] = lo + step * static_cast<double>(j);
            ++idx;
        }
    const Tensor<double> lp = prior_logprob_plain(h, pts);
    double integral = 0;
    idx = 0;
    for (int64_t i = 0; i <= grid; ++i)
        for (int64_t j = 0; j <= grid; ++j) {
            double wgt = 1.0;
            if (i == 0 || i == grid) wgt *= 0.5;
            if (j == 0 || j == grid) wgt *= 0.5;
            integral += wgt * std::exp(lp[idx]);
            ++idx;
        }
    integral *= step * step;
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("fold rejects odd extents; unfold rejects non-multiple-of-4 channels") {
    Tape<double> t;
    CHECK_THROWS_AS(t.fold2x2(t.constant(Tensor<double>({1, 1, 3, 4}))), std::invalid_argument);
    CHECK_THROWS_AS(t.unfold2x2(t.constant(Tensor<double>({1, 3, 2, 2}))), std::invalid_argument);
}

TEST_CASE("flow gradients pass the finite-difference oracle") {
    RngStream rng(34);
    FlowStack<double> f = make_pixel_flow<double>(1, 2, 6, true, rng);
    Tensor<double> init({4, 1, 4, 4});
    rng.fill_normal(init);
    f.init_actnorms(init);
    Tensor<double> x({2, 1, 4, 4});
    rng.fill_normal(x);
    std::vector<NamedParam<double>> params;
    f.visit_params("f", [&](const std::string& name, Parameter<double>& p) {
        params.push_back({name, &p});
    });
    auto build = [&](Tape<double>& t) {
        auto [y, ld] = f.forward(t, t.constant(x));
        return t.mean(t.add(t.sum_samples(t.mul(y, y)), ld));
    };
    CHECK(finite_diff_check<double>(build, params, 1e-5) < 1e-6);
}
