#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fvae/tensor.hpp"

namespace fvae {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; never outlives its tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int64_t idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    const Tensor<T>& value() const { return tape->value(*this); }
    const Tensor<T>& grad() const { return tape->grad(*this); }
    const Shape& shape() const { return tape->value(*this).shape; }
};

// Persistent trainable tensor. Lives in a model; placed onto a fresh tape
// each step via Tape::param. Backward accumulates into grad.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

// Reverse-mode tape. Nodes are recorded in evaluation order; backward walks
// them once in reverse. One backward call per tape.
template <typename T>
class Tape {
  public:
    // A grad-disabled tape records values only; params become plain leaves.
    explicit Tape(bool enable_grad = true) : grad_enabled_(enable_grad) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- node creation ------------------------------------------------

    Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad && grad_enabled_, nullptr, {});
    }

    Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    Var<T> scalar(T v) { return leaf(Tensor<T>::scalar(v), false); }

    Var<T> param(Parameter<T>& p) {
        return push(p.value, grad_enabled_, grad_enabled_ ? &p : nullptr, {});
    }

    // ---- elementwise --------------------------------------------------

    Var<T> add(Var<T> a, Var<T> b) {
        check("add", a, b);
        Tensor<T> out(val(a).shape);
        const auto &av = val(a), &bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a)) accumulate(a, g);
            if (needs(b)) accumulate(b, g);
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        check("sub", a, b);
        Tensor<T> out(val(a).shape);
        const auto &av = val(a), &bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a)) accumulate(a, g);
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
            }
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        check("mul", a, b);
        Tensor<T> out(val(a).shape);
        const auto &av = val(a), &bv = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a)) {
                Tensor<T>& ga = nodes_[a.idx].grad;
                const Tensor<T>& bv2 = val(b);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                const Tensor<T>& av2 = val(a);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }

    Var<T> neg(Var<T> a) { return mul_scalar(a, T(-1)); }

    Var<T> add_scalar(Var<T> a, T c) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + c;
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            accumulate(a, nodes_[y].grad);
        });
    }

    Var<T> mul_scalar(Var<T> a, T c) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * c;
        return push(std::move(out), needs(a), nullptr, [this, a, c](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
        });
    }

    Var<T> relu(Var<T> a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& av2 = val(a);
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i)
                if (av2[i] > T(0)) ga[i] += g[i];
        });
    }

    Var<T> exp(Var<T> a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(av[i]);
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& yv = nodes_[y].value;
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * yv[i];
        });
    }

    Var<T> log(Var<T> a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(av[i]);
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& av2 = val(a);
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / av2[i];
        });
    }

    Var<T> log_abs(Var<T> a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::abs(av[i]));
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& av2 = val(a);
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / av2[i];
        });
    }

    Var<T> tanh(Var<T> a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(av[i]);
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& yv = nodes_[y].value;
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (T(1) - yv[i] * yv[i]);
        });
    }

    // Gradient passes through the interior, zero outside [lo, hi].
    Var<T> clamp(Var<T> a, T lo, T hi) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a);
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
        return push(std::move(out), needs(a), nullptr, [this, a, lo, hi](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            const Tensor<T>& av2 = val(a);
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i)
                if (av2[i] >= lo && av2[i] <= hi) ga[i] += g[i];
        });
    }

    // ---- linear algebra ------------------------------------------------

    Var<T> matmul(Var<T> a, Var<T> b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
            throw std::invalid_argument("matmul: shape mismatch " + shape_str(av.shape) + " vs " +
                                        shape_str(bv.shape));
        const int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
        Tensor<T> out({m, n});
        matmul_into(out.ptr(), av.ptr(), bv.ptr(), m, k, n, false, false);
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b, m, k, n](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a))  // dA = dC * B^T
                matmul_into(nodes_[a.idx].grad.ptr(), g.ptr(), val(b).ptr(), m, n, k, false, true);
            if (needs(b))  // dB = A^T * dC
                matmul_into(nodes_[b.idx].grad.ptr(), val(a).ptr(), g.ptr(), k, m, n, true, false);
        });
    }

    // 2-D convolution, stride 1, same padding. x: (N,Ci,H,W), w: (Co,Ci,kh,kw), kh/kw odd.
    Var<T> conv2d(Var<T> x, Var<T> w) {
        const Tensor<T>&xv = val(x), &wv = val(w);
        if (xv.rank() != 4 || wv.rank() != 4 || xv.shape[1] != wv.shape[1])
            throw std::invalid_argument("conv2d: shape mismatch " + shape_str(xv.shape) + " vs " +
                                        shape_str(wv.shape));
        if (wv.shape[2] % 2 == 0 || wv.shape[3] % 2 == 0)
            throw std::invalid_argument("conv2d: kernel extents must be odd, got " + shape_str(wv.shape));
        const int64_t N = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        const int64_t Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
        const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
        Tensor<T> out({N, Co, H, W});
        conv_forward(out, xv, wv, N, Ci, Co, H, W, kh, kw, ph, pw);
        return push(std::move(out), needs(x) || needs(w), nullptr,
                    [this, x, w, N, Ci, Co, H, W, kh, kw, ph, pw](int64_t y) {
                        const Tensor<T>& g = nodes_[y].grad;
                        if (needs(x))
                            conv_backward_input(nodes_[x.idx].grad, g, val(w), N, Ci, Co, H, W, kh, kw, ph, pw);
                        if (needs(w))
                            conv_backward_kernel(nodes_[w.idx].grad, g, val(x), N, Ci, Co, H, W, kh, kw, ph, pw);
                    });
    }

    // v: (C) -> diagonal matrix (C,C)
    Var<T> diag_embed(Var<T> v) {
        const Tensor<T>& vv = val(v);
        require_rank("diag_embed", vv, 1);
        const int64_t c = vv.shape[0];
        Tensor<T> out({c, c});
        for (int64_t i = 0; i < c; ++i) out[i * c + i] = vv[i];
        return push(std::move(out), needs(v), nullptr, [this, v, c](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& gv = nodes_[v.idx].grad;
            for (int64_t i = 0; i < c; ++i) gv[i] += g[i * c + i];
        });
    }

    // ---- reductions ----------------------------------------------------

    Var<T> sum(Var<T> a) {
        T s = 0;
        for (const T& v : val(a).data) s += v;
        return push(Tensor<T>::scalar(s), needs(a), nullptr, [this, a](int64_t y) {
            const T g = nodes_[y].grad[0];
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (auto& v : ga.data) v += g;
        });
    }

    Var<T> mean(Var<T> a) {
        const int64_t n = val(a).numel();
        return mul_scalar(sum(a), T(1) / static_cast<T>(n));
    }

    // (N, ...) -> (N): sum over all non-batch dims.
    Var<T> sum_samples(Var<T> a) {
        const Tensor<T>& av = val(a);
        if (av.rank() < 2)
            throw std::invalid_argument("sum_samples: expected rank >= 2, got " + shape_str(av.shape));
        const int64_t n = av.shape[0], per = av.numel() / n;
        Tensor<T> out({n});
        for (int64_t i = 0; i < n; ++i) {
            T s = 0;
            const T* p = av.ptr() + i * per;
            for (int64_t j = 0; j < per; ++j) s += p[j];
            out[i] = s;
        }
        return push(std::move(out), needs(a), nullptr, [this, a, n, per](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < n; ++i) {
                T* p = ga.ptr() + i * per;
                for (int64_t j = 0; j < per; ++j) p[j] += g[i];
            }
        });
    }

    // ---- shape ops -----------------------------------------------------

    Var<T> reshape(Var<T> a, Shape shape) {
        const Tensor<T>& av = val(a);
        if (numel_of(shape) != av.numel())
            throw std::invalid_argument("reshape: shape mismatch " + shape_str(av.shape) + " vs " +
                                        shape_str(shape));
        Tensor<T> out(shape, av.data);
        return push(std::move(out), needs(a), nullptr, [this, a](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& ga = nodes_[a.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        });
    }

    // s: [1] broadcast to an arbitrary shape.
    Var<T> broadcast_scalar(Var<T> s, Shape shape) {
        const Tensor<T>& sv = val(s);
        if (sv.numel() != 1)
            throw std::invalid_argument("broadcast_scalar: expected [1], got " + shape_str(sv.shape));
        Tensor<T> out = Tensor<T>::full(std::move(shape), sv[0]);
        return push(std::move(out), needs(s), nullptr, [this, s](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            T acc = 0;
            for (const T& v : g.data) acc += v;
            nodes_[s.idx].grad[0] += acc;
        });
    }

    // ---- slicing / joining ----------------------------------------------

    Var<T> slice_channels(Var<T> x, int64_t c0, int64_t c1) {
        const Tensor<T>& xv = val(x);
        require_rank("slice_channels", xv, 4);
        const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
        if (c0 < 0 || c1 <= c0 || c1 > C)
            throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                        std::to_string(c1) + ") invalid for " + shape_str(xv.shape));
        Tensor<T> out({N, c1 - c0, xv.shape[2], xv.shape[3]});
        for (int64_t n = 0; n < N; ++n)
            std::copy(xv.ptr() + (n * C + c0) * HW, xv.ptr() + (n * C + c1) * HW,
                      out.ptr() + n * (c1 - c0) * HW);
        return push(std::move(out), needs(x), nullptr, [this, x, c0, c1, N, C, HW](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& gx = nodes_[x.idx].grad;
            for (int64_t n = 0; n < N; ++n) {
                const T* src = g.ptr() + n * (c1 - c0) * HW;
                T* dst = gx.ptr() + (n * C + c0) * HW;
                for (int64_t i = 0; i < (c1 - c0) * HW; ++i) dst[i] += src[i];
            }
        });
    }

    Var<T> concat_channels(Var<T> a, Var<T> b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        require_rank("concat_channels", av, 4);
        require_rank("concat_channels", bv, 4);
        if (av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3])
            throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(av.shape) +
                                        " vs " + shape_str(bv.shape));
        const int64_t N = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1];
        const int64_t HW = av.shape[2] * av.shape[3];
        Tensor<T> out({N, Ca + Cb, av.shape[2], av.shape[3]});
        for (int64_t n = 0; n < N; ++n) {
            std::copy(av.ptr() + n * Ca * HW, av.ptr() + (n + 1) * Ca * HW,
                      out.ptr() + n * (Ca + Cb) * HW);
            std::copy(bv.ptr() + n * Cb * HW, bv.ptr() + (n + 1) * Cb * HW,
                      out.ptr() + (n * (Ca + Cb) + Ca) * HW);
        }
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b, N, Ca, Cb, HW](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a)) {
                Tensor<T>& ga = nodes_[a.idx].grad;
                for (int64_t n = 0; n < N; ++n) {
                    const T* src = g.ptr() + n * (Ca + Cb) * HW;
                    T* dst = ga.ptr() + n * Ca * HW;
                    for (int64_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
                }
            }
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                for (int64_t n = 0; n < N; ++n) {
                    const T* src = g.ptr() + (n * (Ca + Cb) + Ca) * HW;
                    T* dst = gb.ptr() + n * Cb * HW;
                    for (int64_t i = 0; i < Cb * HW; ++i) dst[i] += src[i];
                }
            }
        });
    }

    Var<T> slice_cols(Var<T> x, int64_t c0, int64_t c1) {
        const Tensor<T>& xv = val(x);
        require_rank("slice_cols", xv, 2);
        const int64_t N = xv.shape[0], D = xv.shape[1];
        if (c0 < 0 || c1 <= c0 || c1 > D)
            throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                        std::to_string(c1) + ") invalid for " + shape_str(xv.shape));
        Tensor<T> out({N, c1 - c0});
        for (int64_t n = 0; n < N; ++n)
            std::copy(xv.ptr() + n * D + c0, xv.ptr() + n * D + c1, out.ptr() + n * (c1 - c0));
        return push(std::move(out), needs(x), nullptr, [this, x, c0, c1, N, D](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& gx = nodes_[x.idx].grad;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t j = 0; j < c1 - c0; ++j) gx[n * D + c0 + j] += g[n * (c1 - c0) + j];
        });
    }

    Var<T> concat_cols(Var<T> a, Var<T> b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        require_rank("concat_cols", av, 2);
        require_rank("concat_cols", bv, 2);
        if (av.shape[0] != bv.shape[0])
            throw std::invalid_argument("concat_cols: shape mismatch " + shape_str(av.shape) + " vs " +
                                        shape_str(bv.shape));
        const int64_t N = av.shape[0], Da = av.shape[1], Db = bv.shape[1];
        Tensor<T> out({N, Da + Db});
        for (int64_t n = 0; n < N; ++n) {
            std::copy(av.ptr() + n * Da, av.ptr() + (n + 1) * Da, out.ptr() + n * (Da + Db));
            std::copy(bv.ptr() + n * Db, bv.ptr() + (n + 1) * Db, out.ptr() + n * (Da + Db) + Da);
        }
        return push(std::move(out), needs(a) || needs(b), nullptr, [this, a, b, N, Da, Db](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(a)) {
                Tensor<T>& ga = nodes_[a.idx].grad;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t j = 0; j < Da; ++j) ga[n * Da + j] += g[n * (Da + Db) + j];
            }
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t j = 0; j < Db; ++j) gb[n * Db + j] += g[n * (Da + Db) + Da + j];
            }
        });
    }

    // Output column j takes input column perm[j].
    Var<T> permute_cols(Var<T> x, std::vector<int64_t> perm) {
        const Tensor<T>& xv = val(x);
        require_rank("permute_cols", xv, 2);
        const int64_t N = xv.shape[0], D = xv.shape[1];
        if (static_cast<int64_t>(perm.size()) != D)
            throw std::invalid_argument("permute_cols: permutation size " + std::to_string(perm.size()) +
                                        " vs columns " + std::to_string(D));
        Tensor<T> out({N, D});
        for (int64_t n = 0; n < N; ++n)
            for (int64_t j = 0; j < D; ++j) out[n * D + j] = xv[n * D + perm[static_cast<size_t>(j)]];
        auto p = std::make_shared<std::vector<int64_t>>(std::move(perm));
        return push(std::move(out), needs(x), nullptr, [this, x, p, N, D](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& gx = nodes_[x.idx].grad;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t j = 0; j < D; ++j) gx[n * D + (*p)[static_cast<size_t>(j)]] += g[n * D + j];
        });
    }

    // ---- parameter broadcasts -------------------------------------------

    // x: (N,D) + b: (D)
    Var<T> add_row_bias(Var<T> x, Var<T> b) {
        const Tensor<T>&xv = val(x), &bv = val(b);
        if (xv.rank() != 2 || bv.rank() != 1 || xv.shape[1] != bv.shape[0])
            throw std::invalid_argument("add_row_bias: shape mismatch " + shape_str(xv.shape) + " vs " +
                                        shape_str(bv.shape));
        const int64_t N = xv.shape[0], D = xv.shape[1];
        Tensor<T> out({N, D});
        for (int64_t n = 0; n < N; ++n)
            for (int64_t j = 0; j < D; ++j) out[n * D + j] = xv[n * D + j] + bv[j];
        return push(std::move(out), needs(x) || needs(b), nullptr, [this, x, b, N, D](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(x)) accumulate(x, g);
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t j = 0; j < D; ++j) gb[j] += g[n * D + j];
            }
        });
    }

    // x: (N,C,H,W) + b: (C)
    Var<T> add_channel_bias(Var<T> x, Var<T> b) {
        const Tensor<T>&xv = val(x), &bv = val(b);
        if (xv.rank() != 4 || bv.rank() != 1 || xv.shape[1] != bv.shape[0])
            throw std::invalid_argument("add_channel_bias: shape mismatch " + shape_str(xv.shape) +
                                        " vs " + shape_str(bv.shape));
        const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
        Tensor<T> out(xv.shape);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T bc = bv[c];
                const T* src = xv.ptr() + (n * C + c) * HW;
                T* dst = out.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + bc;
            }
        return push(std::move(out), needs(x) || needs(b), nullptr, [this, x, b, N, C, HW](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(x)) accumulate(x, g);
            if (needs(b)) {
                Tensor<T>& gb = nodes_[b.idx].grad;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* src = g.ptr() + (n * C + c) * HW;
                        T acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += src[i];
                        gb[c] += acc;
                    }
            }
        });
    }

    // x: (N,C,H,W) * s: (C)
    Var<T> mul_channel_scale(Var<T> x, Var<T> s) {
        const Tensor<T>&xv = val(x), &sv = val(s);
        if (xv.rank() != 4 || sv.rank() != 1 || xv.shape[1] != sv.shape[0])
            throw std::invalid_argument("mul_channel_scale: shape mismatch " + shape_str(xv.shape) +
                                        " vs " + shape_str(sv.shape));
        const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
        Tensor<T> out(xv.shape);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T sc = sv[c];
                const T* src = xv.ptr() + (n * C + c) * HW;
                T* dst = out.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * sc;
            }
        return push(std::move(out), needs(x) || needs(s), nullptr, [this, x, s, N, C, HW](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            if (needs(x)) {
                Tensor<T>& gx = nodes_[x.idx].grad;
                const Tensor<T>& sv2 = val(s);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T sc = sv2[c];
                        const T* src = g.ptr() + (n * C + c) * HW;
                        T* dst = gx.ptr() + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) dst[i] += src[i] * sc;
                    }
            }
            if (needs(s)) {
                Tensor<T>& gs = nodes_[s.idx].grad;
                const Tensor<T>& xv2 = val(x);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* gp = g.ptr() + (n * C + c) * HW;
                        const T* xp = xv2.ptr() + (n * C + c) * HW;
                        T acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += gp[i] * xp[i];
                        gs[c] += acc;
                    }
            }
        });
    }

    // ---- space-to-channel fold -------------------------------------------

    // (N,C,H,W) -> (N,4C,H/2,W/2); volume-preserving permutation, log-det 0.
    Var<T> fold2x2(Var<T> x) {
        const Tensor<T>& xv = val(x);
        require_rank("fold2x2", xv, 4);
        if (xv.shape[2] % 2 != 0 || xv.shape[3] % 2 != 0)
            throw std::invalid_argument("fold2x2: spatial extents must be even, got " + shape_str(xv.shape));
        const int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        Shape out_shape{N, 4 * C, H / 2, W / 2};
        return gather_bijection("fold2x2", x, fold_index_map(N, C, H, W, false), std::move(out_shape));
    }

    // (N,4C,H,W) -> (N,C,2H,2W)
    Var<T> unfold2x2(Var<T> x) {
        const Tensor<T>& xv = val(x);
        require_rank("unfold2x2", xv, 4);
        if (xv.shape[1] % 4 != 0)
            throw std::invalid_argument("unfold2x2: channels must be divisible by 4, got " +
                                        shape_str(xv.shape));
        const int64_t N = xv.shape[0], C = xv.shape[1] / 4, H = 2 * xv.shape[2], W = 2 * xv.shape[3];
        Shape out_shape{N, C, H, W};
        return gather_bijection("unfold2x2", x, fold_index_map(N, C, H, W, true), std::move(out_shape));
    }

    // ---- backward --------------------------------------------------------

    void backward(Var<T> root) {
        if (root.tape != this) throw std::invalid_argument("backward: root from another tape");
        if (val(root).numel() != 1)
            throw std::invalid_argument("backward: root must be scalar, got " +
                                        shape_str(val(root).shape));
        if (backward_done_)
            throw std::logic_error("backward: tape already traversed");
        backward_done_ = true;
        if (!nodes_[root.idx].requires_grad) return;
        nodes_[root.idx].grad[0] = T(1);
        for (int64_t i = root.idx; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backprop) n.backprop(i);
        }
        for (auto& n : nodes_)
            if (n.bound != nullptr)
                for (int64_t i = 0; i < n.grad.numel(); ++i) n.bound->grad[i] += n.grad[i];
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_[v.idx].value; }
    const Tensor<T>& grad(Var<T> v) const {
        if (!nodes_[v.idx].requires_grad)
            throw std::logic_error("grad: node does not require gradients");
        return nodes_[v.idx].grad;
    }
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Parameter<T>* bound = nullptr;
        std::function<void(int64_t)> backprop;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool backward_done_ = false;

    Var<T> push(Tensor<T> v, bool requires_grad, Parameter<T>* bound,
                std::function<void(int64_t)> backprop) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad && grad_enabled_;
        n.bound = bound;
        if (requires_grad) {
            n.grad = Tensor<T>::zeros(n.value.shape);
            n.backprop = std::move(backprop);
        }
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int64_t>(nodes_.size()) - 1};
    }

    const Tensor<T>& val(Var<T> v) const { return nodes_[v.idx].value; }
    bool needs(Var<T> v) const { return nodes_[v.idx].requires_grad; }

    void check(const char* op, Var<T> a, Var<T> b) const {
        if (!same_shape(val(a), val(b)))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) +
                                        " vs " + shape_str(val(b).shape));
    }

    void accumulate(Var<T> v, const Tensor<T>& g) {
        Tensor<T>& dst = nodes_[v.idx].grad;
        for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    // out(+)= opA(a) * opB(b); out must be pre-sized m*n. accumulate=true adds.
    static void matmul_into(T* out, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                            bool transpose_a, bool transpose_b) {
        // a is (m,k) [or (k,m) if transposed], b is (k,n) [or (n,k)].
        for (int64_t i = 0; i < m; ++i)
            for (int64_t l = 0; l < k; ++l) {
                const T av = transpose_a ? a[l * m + i] : a[i * k + l];
                if (av == T(0)) continue;
                const T* brow = transpose_b ? nullptr : b + l * n;
                T* orow = out + i * n;
                if (transpose_b) {
                    for (int64_t j = 0; j < n; ++j) orow[j] += av * b[j * k + l];
                } else {
                    for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
            }
    }

    static void conv_forward(Tensor<T>& out, const Tensor<T>& x, const Tensor<T>& w, int64_t N,
                             int64_t Ci, int64_t Co, int64_t H, int64_t W, int64_t kh, int64_t kw,
                             int64_t ph, int64_t pw) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co) {
                T* op = out.ptr() + (n * Co + co) * H * W;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xp = x.ptr() + (n * Ci + ci) * H * W;
                    const T* wp = w.ptr() + (co * Ci + ci) * kh * kw;
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const T wv = wp[ky * kw + kx];
                            if (wv == T(0)) continue;
                            const int64_t oh0 = std::max<int64_t>(0, ph - ky);
                            const int64_t oh1 = std::min<int64_t>(H, H + ph - ky);
                            const int64_t ow0 = std::max<int64_t>(0, pw - kx);
                            const int64_t ow1 = std::min<int64_t>(W, W + pw - kx);
                            for (int64_t oh = oh0; oh < oh1; ++oh) {
                                const T* xr = xp + (oh + ky - ph) * W + (kx - pw);
                                T* orow = op + oh * W;
                                for (int64_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xr[ow];
                            }
                        }
                }
            }
    }

    static void conv_backward_input(Tensor<T>& gx, const Tensor<T>& gy, const Tensor<T>& w,
                                    int64_t N, int64_t Ci, int64_t Co, int64_t H, int64_t W,
                                    int64_t kh, int64_t kw, int64_t ph, int64_t pw) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co) {
                const T* gp = gy.ptr() + (n * Co + co) * H * W;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    T* xp = gx.ptr() + (n * Ci + ci) * H * W;
                    const T* wp = w.ptr() + (co * Ci + ci) * kh * kw;
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const T wv = wp[ky * kw + kx];
                            if (wv == T(0)) continue;
                            const int64_t oh0 = std::max<int64_t>(0, ph - ky);
                            const int64_t oh1 = std::min<int64_t>(H, H + ph - ky);
                            const int64_t ow0 = std::max<int64_t>(0, pw - kx);
                            const int64_t ow1 = std::min<int64_t>(W, W + pw - kx);
                            for (int64_t oh = oh0; oh < oh1; ++oh) {
                                T* xr = xp + (oh + ky - ph) * W + (kx - pw);
                                const T* grow = gp + oh * W;
                                for (int64_t ow = ow0; ow < ow1; ++ow) xr[ow] += wv * grow[ow];
                            }
                        }
                }
            }
    }

    static void conv_backward_kernel(Tensor<T>& gw, const Tensor<T>& gy, const Tensor<T>& x,
                                     int64_t N, int64_t Ci, int64_t Co, int64_t H, int64_t W,
                                     int64_t kh, int64_t kw, int64_t ph, int64_t pw) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co) {
                const T* gp = gy.ptr() + (n * Co + co) * H * W;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xp = x.ptr() + (n * Ci + ci) * H * W;
                    T* wp = gw.ptr() + (co * Ci + ci) * kh * kw;
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t oh0 = std::max<int64_t>(0, ph - ky);
                            const int64_t oh1 = std::min<int64_t>(H, H + ph - ky);
                            const int64_t ow0 = std::max<int64_t>(0, pw - kx);
                            const int64_t ow1 = std::min<int64_t>(W, W + pw - kx);
                            T acc = 0;
                            for (int64_t oh = oh0; oh < oh1; ++oh) {
                                const T* xr = xp + (oh + ky - ph) * W + (kx - pw);
                                const T* grow = gp + oh * W;
                                for (int64_t ow = ow0; ow < ow1; ++ow) acc += grow[ow] * xr[ow];
                            }
                            wp[ky * kw + kx] += acc;
                        }
                }
            }
    }

    // Index map for fold (inverse=false): out[i] = in[map[i]] with out folded.
    // For inverse=true the same geometry is used with roles swapped.
    static std::shared_ptr<std::vector<int64_t>> fold_index_map(int64_t N, int64_t C, int64_t H,
                                                                int64_t W, bool inverse) {
        const int64_t h2 = H / 2, w2 = W / 2;
        auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * H * W));
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w) {
                        const int64_t sub = (h % 2) * 2 + (w % 2);
                        const int64_t folded =
                            ((n * 4 * C + (c * 4 + sub)) * h2 + h / 2) * w2 + w / 2;
                        const int64_t unfolded = ((n * C + c) * H + h) * W + w;
                        if (inverse)
                            (*map)[static_cast<size_t>(unfolded)] = folded;
                        else
                            (*map)[static_cast<size_t>(folded)] = unfolded;
                    }
        return map;
    }

    Var<T> gather_bijection(const char* op, Var<T> x, std::shared_ptr<std::vector<int64_t>> map,
                            Shape out_shape) {
        const Tensor<T>& xv = val(x);
        if (static_cast<int64_t>(map->size()) != xv.numel())
            throw std::invalid_argument(std::string(op) + ": index map size mismatch for " +
                                        shape_str(xv.shape));
        Tensor<T> out(std::move(out_shape));
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = xv[(*map)[static_cast<size_t>(i)]];
        return push(std::move(out), needs(x), nullptr, [this, x, map](int64_t y) {
            const Tensor<T>& g = nodes_[y].grad;
            Tensor<T>& gx = nodes_[x.idx].grad;
            for (int64_t i = 0; i < g.numel(); ++i) gx[(*map)[static_cast<size_t>(i)]] += g[i];
        });
    }
};

}  // namespace fvae
