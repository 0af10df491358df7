#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "fvae/tape.hpp"

namespace fvae {

template <typename T>
struct NamedParam {
    std::string name;
    Parameter<T>* param;
};

// Adam with bias correction. Moments are keyed by parameter name so the
// state survives checkpointing independent of registration order.
template <typename T>
class Adam {
  public:
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

    explicit Adam(T learning_rate = T(1e-3)) : lr(learning_rate) {}

    // One update over all params; gradients are zeroed afterwards.
    void step(const std::vector<NamedParam<T>>& params) {
        ++step_count_;
        const T c1 = T(1) - std::pow(beta1, static_cast<T>(step_count_));
        const T c2 = T(1) - std::pow(beta2, static_cast<T>(step_count_));
        for (const auto& np : params) {
            Parameter<T>& p = *np.param;
            Moments& mo = state_[np.name];
            if (mo.m.numel() != p.value.numel()) {
                mo.m = Tensor<T>::zeros(p.value.shape);
                mo.v = Tensor<T>::zeros(p.value.shape);
            }
            for (int64_t i = 0; i < p.value.numel(); ++i) {
                const T g = p.grad[i];
                mo.m[i] = beta1 * mo.m[i] + (T(1) - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (T(1) - beta2) * g * g;
                const T mhat = mo.m[i] / c1;
                const T vhat = mo.v[i] / c2;
                p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            p.zero_grad();
        }
    }

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t c) { step_count_ = c; }

    Tensor<T>* moment_m(const std::string& name) {
        auto it = state_.find(name);
        return it == state_.end() ? nullptr : &it->second.m;
    }
    Tensor<T>* moment_v(const std::string& name) {
        auto it = state_.find(name);
        return it == state_.end() ? nullptr : &it->second.v;
    }
    void set_moments(const std::string& name, Tensor<T> m, Tensor<T> v) {
        state_[name] = Moments{std::move(m), std::move(v)};
    }

  private:
    struct Moments {
        Tensor<T> m, v;
    };
    std::unordered_map<std::string, Moments> state_;
    int64_t step_count_ = 0;
};

// Central-difference gradient check. `build` reconstructs the scalar loss on a
// fresh tape from the params' current values; any stochastic inputs must be
// frozen inside the closure. Returns max over elements of
// |ad - fd| / max(|ad|, |fd|, 1e-8).
template <typename T>
double finite_diff_check(const std::function<Var<T>(Tape<T>&)>& build,
                         const std::vector<NamedParam<T>>& params, T step) {
    for (const auto& np : params) np.param->zero_grad();
    std::vector<Tensor<T>> ad_grads;
    {
        Tape<T> tape;
        Var<T> root = build(tape);
        tape.backward(root);
    }
    for (const auto& np : params) ad_grads.push_back(np.param->grad);

    auto eval = [&]() -> T {
        Tape<T> tape;
        return build(tape).value()[0];
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<T>& p = *params[pi].param;
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const T saved = p.value[i];
            p.value[i] = saved + step;
            const double fp = static_cast<double>(eval());
            p.value[i] = saved - step;
            const double fm = static_cast<double>(eval());
            p.value[i] = saved;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(step));
            const double ad = static_cast<double>(ad_grads[pi][i]);
            const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
            worst = std::max(worst, std::abs(ad - fd) / denom);
        }
    }
    for (const auto& np : params) np.param->zero_grad();
    return worst;
}

}  // namespace fvae
