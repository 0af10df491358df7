#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fvae::linalg {

// Row-major dense matrices as flat vectors. Sizes here are tiny (channel
// counts, PCA feature dims), so simple O(n^3) routines are fine.

template <typename T>
struct LuFactors {
    std::vector<int64_t> perm;  // row permutation: PA = LU uses row perm[i] of A
    std::vector<T> lower;       // unit lower triangular, n*n
    std::vector<T> upper;       // upper triangular, n*n
};

// LU with partial pivoting. Throws on (numerically) singular input.
template <typename T>
LuFactors<T> lu_decompose(const std::vector<T>& a, int64_t n) {
    std::vector<T> m = a;
    LuFactors<T> f;
    f.perm.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) f.perm[static_cast<size_t>(i)] = i;
    f.lower.assign(static_cast<size_t>(n * n), T(0));
    for (int64_t k = 0; k < n; ++k) {
        int64_t piv = k;
        T best = std::abs(m[static_cast<size_t>(k * n + k)]);
        for (int64_t i = k + 1; i < n; ++i) {
            const T v = std::abs(m[static_cast<size_t>(i * n + k)]);
            if (v > best) {
                best = v;
                piv = i;
            }
        }
        if (best == T(0)) throw std::runtime_error("lu_decompose: singular matrix");
        if (piv != k) {
            for (int64_t j = 0; j < n; ++j)
                std::swap(m[static_cast<size_t>(k * n + j)], m[static_cast<size_t>(piv * n + j)]);
            for (int64_t j = 0; j < k; ++j)
                std::swap(f.lower[static_cast<size_t>(k * n + j)],
                          f.lower[static_cast<size_t>(piv * n + j)]);
            std::swap(f.perm[static_cast<size_t>(k)], f.perm[static_cast<size_t>(piv)]);
        }
        for (int64_t i = k + 1; i < n; ++i) {
            const T factor = m[static_cast<size_t>(i * n + k)] / m[static_cast<size_t>(k * n + k)];
            f.lower[static_cast<size_t>(i * n + k)] = factor;
            for (int64_t j = k; j < n; ++j)
                m[static_cast<size_t>(i * n + j)] -= factor * m[static_cast<size_t>(k * n + j)];
        }
    }
    for (int64_t i = 0; i < n; ++i) f.lower[static_cast<size_t>(i * n + i)] = T(1);
    f.upper = std::move(m);
    for (int64_t i = 1; i < n; ++i)
        for (int64_t j = 0; j < i; ++j) f.upper[static_cast<size_t>(i * n + j)] = T(0);
    return f;
}

template <typename T>
T lu_log_abs_det(const LuFactors<T>& f, int64_t n) {
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += std::log(std::abs(f.upper[static_cast<size_t>(i * n + i)]));
    return acc;
}

template <typename T>
T log_abs_det(const std::vector<T>& a, int64_t n) {
    return lu_log_abs_det(lu_decompose(a, n), n);
}

// Solve A x = b for a single right-hand side using precomputed factors.
template <typename T>
std::vector<T> lu_solve(const LuFactors<T>& f, int64_t n, const std::vector<T>& b) {
    std::vector<T> y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        T acc = b[static_cast<size_t>(f.perm[static_cast<size_t>(i)])];
        for (int64_t j = 0; j < i; ++j) acc -= f.lower[static_cast<size_t>(i * n + j)] * y[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = acc;
    }
    std::vector<T> x(static_cast<size_t>(n));
    for (int64_t i = n - 1; i >= 0; --i) {
        T acc = y[static_cast<size_t>(i)];
        for (int64_t j = i + 1; j < n; ++j) acc -= f.upper[static_cast<size_t>(i * n + j)] * x[static_cast<size_t>(j)];
        x[static_cast<size_t>(i)] = acc / f.upper[static_cast<size_t>(i * n + i)];
    }
    return x;
}

template <typename T>
std::vector<T> invert(const std::vector<T>& a, int64_t n) {
    const LuFactors<T> f = lu_decompose(a, n);
    std::vector<T> inv(static_cast<size_t>(n * n));
    std::vector<T> e(static_cast<size_t>(n), T(0));
    for (int64_t c = 0; c < n; ++c) {
        e[static_cast<size_t>(c)] = T(1);
        std::vector<T> col = lu_solve(f, n, e);
        e[static_cast<size_t>(c)] = T(0);
        for (int64_t r = 0; r < n; ++r) inv[static_cast<size_t>(r * n + c)] = col[static_cast<size_t>(r)];
    }
    return inv;
}

template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b, int64_t m, int64_t k,
                      int64_t n) {
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t l = 0; l < k; ++l) {
            const T av = a[static_cast<size_t>(i * k + l)];
            if (av == T(0)) continue;
            for (int64_t j = 0; j < n; ++j)
                out[static_cast<size_t>(i * n + j)] += av * b[static_cast<size_t>(l * n + j)];
        }
    return out;
}

// Gram-Schmidt orthonormalization of the rows of a (in place semantics).
template <typename T>
std::vector<T> orthonormalize_rows(std::vector<T> a, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        T* ri = a.data() + i * n;
        for (int64_t j = 0; j < i; ++j) {
            const T* rj = a.data() + j * n;
            T dot = 0;
            for (int64_t c = 0; c < n; ++c) dot += ri[c] * rj[c];
            for (int64_t c = 0; c < n; ++c) ri[c] -= dot * rj[c];
        }
        T norm = 0;
        for (int64_t c = 0; c < n; ++c) norm += ri[c] * ri[c];
        norm = std::sqrt(norm);
        if (norm < T(1e-10)) throw std::runtime_error("orthonormalize_rows: degenerate basis");
        for (int64_t c = 0; c < n; ++c) ri[c] /= norm;
    }
    return a;
}

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues (ascending) and row-major eigenvectors (one per row).
struct EigResult {
    std::vector<double> values;
    std::vector<double> vectors;  // vectors[i*n + j]: component j of eigenvector i
};

inline EigResult eigh(std::vector<double> a, int64_t n) {
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) off += a[static_cast<size_t>(i * n + j)] * a[static_cast<size_t>(i * n + j)];
        if (off < 1e-24) break;
        for (int64_t p = 0; p < n - 1; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p * n + q)];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p * n + p)];
                const double aqq = a[static_cast<size_t>(q * n + q)];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k * n + p)];
                    const double akq = a[static_cast<size_t>(k * n + q)];
                    a[static_cast<size_t>(k * n + p)] = c * akp - s * akq;
                    a[static_cast<size_t>(k * n + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p * n + k)];
                    const double aqk = a[static_cast<size_t>(q * n + k)];
                    a[static_cast<size_t>(p * n + k)] = c * apk - s * aqk;
                    a[static_cast<size_t>(q * n + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vpk = v[static_cast<size_t>(p * n + k)];
                    const double vqk = v[static_cast<size_t>(q * n + k)];
                    v[static_cast<size_t>(p * n + k)] = c * vpk - s * vqk;
                    v[static_cast<size_t>(q * n + k)] = s * vpk + c * vqk;
                }
            }
    }
    EigResult res;
    res.values.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) res.values[static_cast<size_t>(i)] = a[static_cast<size_t>(i * n + i)];
    // sort ascending, permuting eigenvector rows alongside
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(),
              [&](int64_t x, int64_t y) { return res.values[static_cast<size_t>(x)] < res.values[static_cast<size_t>(y)]; });
    EigResult sorted;
    sorted.values.resize(static_cast<size_t>(n));
    sorted.vectors.resize(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t src = order[static_cast<size_t>(i)];
        sorted.values[static_cast<size_t>(i)] = res.values[static_cast<size_t>(src)];
        for (int64_t j = 0; j < n; ++j)
            sorted.vectors[static_cast<size_t>(i * n + j)] = v[static_cast<size_t>(src * n + j)];
    }
    return sorted;
}

}  // namespace fvae::linalg
