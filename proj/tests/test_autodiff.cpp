#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fvae/adam.hpp"
#include "fvae/rng.hpp"
#include "fvae/tape.hpp"

using namespace fvae;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, RngStream& rng, T scale = T(1)) {
    Tensor<T> t(std::move(shape));
    rng.fill_normal(t, scale);
    return t;
}

// Reference convolution written directly from the definition; independent of
// the tape implementation.
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w) {
    const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    Tensor<T> out({N, Co, H, W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t oh = 0; oh < H; ++oh)
                for (int64_t ow = 0; ow < W; ++ow) {
                    T acc = 0;
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ih = oh + ky - ph, iw = ow + kx - pw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += w[((co * Ci + ci) * kh + ky) * kw + kx] *
                                       x[((n * Ci + ci) * H + ih) * W + iw];
                            }
                    out[((n * Co + co) * H + oh) * W + ow] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("matmul with identity is identity") {
    RngStream rng(1);
    Tape<double> t;
    Tensor<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Tensor<double> a = random_tensor<double>({3, 3}, rng);
    Var<double> out = t.matmul(t.constant(eye), t.constant(a));
    for (int64_t i = 0; i < 9; ++i) CHECK(out.value()[i] == doctest::Approx(a[i]).epsilon(1e-12));
}

TEST_CASE("relu definition") {
    Tape<double> t;
    Var<double> y = t.relu(t.constant(Tensor<double>({1, 2}, {-2.0, 3.5})));
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == 3.5);
}

TEST_CASE("conv2d with delta kernel is identity") {
    RngStream rng(2);
    Tape<double> t;
    Tensor<double> x = random_tensor<double>({1, 1, 4, 4}, rng);
    Tensor<double> k({1, 1, 3, 3});
    k[4] = 1.0;  // center tap
    Var<double> y = t.conv2d(t.constant(x), t.constant(k));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("conv2d matches a direct-definition reference") {
    RngStream rng(3);
    Tape<double> t;
    Tensor<double> x = random_tensor<double>({2, 3, 5, 5}, rng);
    Tensor<double> w = random_tensor<double>({4, 3, 3, 3}, rng);
    Var<double> y = t.conv2d(t.constant(x), t.constant(w));
    Tensor<double> ref = conv2d_reference(x, w);
    for (int64_t i = 0; i < ref.numel(); ++i)
        CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("backward of exp at 0 gives 1") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>::scalar(0.0), true);
    Var<double> y = t.exp(x);
    t.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({1, 3}, {1.0, 2.0, 3.0}), true);
    t.backward(t.sum(t.mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({2, 2}), true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("shape mismatch diagnostics name the primitive and shapes") {
    Tape<double> t;
    Var<double> a = t.constant(Tensor<double>({2, 3}));
    Var<double> b = t.constant(Tensor<double>({3, 2}));
    try {
        t.add(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("two-layer network gradients match central finite differences") {
    RngStream rng(5);
    Parameter<double> w1(random_tensor<double>({4, 8}, rng, 0.5));
    Parameter<double> b1(random_tensor<double>({8}, rng, 0.1));
    Parameter<double> w2(random_tensor<double>({8, 1}, rng, 0.5));
    Parameter<double> b2(random_tensor<double>({1}, rng, 0.1));
    const Tensor<double> x = random_tensor<double>({5, 4}, rng);
    const Tensor<double> target = random_tensor<double>({5, 1}, rng);

    auto build = [&](Tape<double>& t) {
        Var<double> h = t.tanh(t.add_row_bias(t.matmul(t.constant(x), t.param(w1)), t.param(b1)));
        Var<double> out = t.add_row_bias(t.matmul(h, t.param(w2)), t.param(b2));
        Var<double> diff = t.sub(out, t.constant(target));
        return t.mean(t.mul(diff, diff));
    };
    const double err = finite_diff_check<double>(
        build, {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("finite_diff_check is near-exact for a linear function") {
    RngStream rng(6);
    Parameter<double> w(random_tensor<double>({6}, rng));
    const Tensor<double> c = random_tensor<double>({1, 6}, rng);
    auto build = [&](Tape<double>& t) {
        return t.sum(t.mul(t.reshape(t.param(w), {1, 6}), t.constant(c)));
    };
    // wide step: central differences are exact for linear maps, cancellation
    // noise scales with 1/step
    CHECK(finite_diff_check<double>(build, {{"w", &w}}, 1e-3) < 1e-10);
}

TEST_CASE("conv and reduction gradients pass the finite-difference oracle") {
    RngStream rng(7);
    Parameter<double> k(random_tensor<double>({2, 1, 3, 3}, rng, 0.4));
    Parameter<double> bias(random_tensor<double>({2}, rng, 0.1));
    const Tensor<double> x = random_tensor<double>({2, 1, 4, 4}, rng);
    auto build = [&](Tape<double>& t) {
        Var<double> y = t.add_channel_bias(t.conv2d(t.constant(x), t.param(k)), t.param(bias));
        return t.mean(t.mul(y, t.tanh(y)));
    };
    CHECK(finite_diff_check<double>(build, {{"k", &k}, {"b", &bias}}, 1e-5) < 1e-6);
}

TEST_CASE("adam takes a descent step on theta^2") {
    Parameter<double> theta(Tensor<double>({1}, {1.0}));
    Adam<double> adam(0.1);
    {
        Tape<double> t;
        Var<double> th = t.param(theta);
        t.backward(t.mul(th, th));
    }
    adam.step({{"theta", &theta}});
    CHECK(std::abs(theta.value[0]) < 1.0);
    CHECK(adam.step_count() == 1);
    CHECK(theta.grad[0] == 0.0);  // grads zeroed after the step
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Parameter<double> theta(Tensor<double>({3}, {1.0, -2.0, 0.5}));
    Adam<double> adam(0.1);
    adam.step({{"theta", &theta}});
    CHECK(theta.value[0] == 1.0);
    CHECK(theta.value[1] == -2.0);
    CHECK(theta.value[2] == 0.5);
    CHECK(adam.step_count() == 1);
}

TEST_CASE("adam drives a 2-D convex quadratic to < 1e-3 of the initial loss") {
    Parameter<double> theta(Tensor<double>({2}, {4.0, -3.0}));
    Adam<double> adam(0.1);
    auto loss_value = [&]() {
        const double a = theta.value[0] - 1.0, b = theta.value[1] + 2.0;
        return a * a + 5.0 * b * b;
    };
    const double initial = loss_value();
    for (int step = 0; step < 200; ++step) {
        Tape<double> t;
        Var<double> th = t.param(theta);
        Var<double> shifted = t.sub(th, t.constant(Tensor<double>({2}, {1.0, -2.0})));
        Var<double> sq = t.mul(shifted, shifted);
        Var<double> weighted = t.mul(sq, t.constant(Tensor<double>({2}, {1.0, 5.0})));
        t.backward(t.sum(weighted));
        adam.step({{"theta", &theta}});
    }
    CHECK(loss_value() < 1e-3 * initial);
}

TEST_CASE("equal seeds give bitwise-identical parameter trajectories for 100 steps") {
    auto run = [](uint64_t seed) {
        RngStream rng(seed);
        Parameter<float> w(Tensor<float>({4, 4}));
        rng.fill_normal(w.value, 0.3f);
        Adam<float> adam(1e-2f);
        for (int step = 0; step < 100; ++step) {
            Tensor<float> x({2, 4});
            rng.fill_normal(x);
            Tape<float> t;
            Var<float> y = t.tanh(t.matmul(t.constant(x), t.param(w)));
            t.backward(t.mean(t.mul(y, y)));
            adam.step({{"w", &w}});
        }
        return w.value.data;
    };
    const auto a = run(99), b = run(99), c = run(100);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("building and discarding a tape leaves parameter values and grads unchanged") {
    RngStream rng(8);
    Parameter<double> w(random_tensor<double>({3, 3}, rng));
    const std::vector<double> before = w.value.data;
    {
        Tape<double> t;
        Var<double> y = t.exp(t.matmul(t.param(w), t.param(w)));
        (void)y;
    }
    CHECK(w.value.data == before);
    for (double g : w.grad.data) CHECK(g == 0.0);
}

TEST_CASE("rng stream is reproducible and counter-addressable") {
    RngStream a(42), b(42);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    RngStream c(42, a.counter());
    CHECK(c.next_u64() == a.next_u64());
    RngStream d(43);
    CHECK(d.next_u64() != b.next_u64());
}
