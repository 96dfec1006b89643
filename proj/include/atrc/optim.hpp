// SGD with momentum and weight decay, bias-corrected Adam, and the poly
// learning-rate schedule. Both optimizers key their per-parameter buffers by
// parameter name so state survives checkpoint round trips.

#pragma once

#include <cmath>
#include <map>

#include "atrc/params.hpp"

namespace atrc {

// lr0 * (1 - iter/max_iter)^power
template <typename T>
T poly_lr(std::size_t iter, std::size_t max_iter, T lr0, T power = T(0.9)) {
    if (max_iter == 0) fail("poly_lr", "max_iter must be positive");
    if (iter > max_iter) fail("poly_lr", "iter exceeds max_iter");
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
    return static_cast<T>(static_cast<double>(lr0) * std::pow(frac, static_cast<double>(power)));
}

// v <- mu*v + (g + wd*p); p <- p - lr*v
template <typename T>
class SgdT {
public:
    SgdT(T momentum = T(0.9), T weight_decay = T(0.0005))
        : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(const std::vector<ParamT<T>*>& params, T lr) {
        for (ParamT<T>* p : params) {
            TensorT<T>& value = p->var->value;
            auto [it, inserted] = velocity_.try_emplace(p->name, value.shape());
            TensorT<T>& vel = it->second;
            if (!inserted && vel.shape() != value.shape())
                fail("sgd_step", "velocity shape mismatch for '" + p->name + "'");
            const bool has_grad = p->var->has_grad();
            const T* g = has_grad ? p->var->grad.data() : nullptr;
            for (std::size_t i = 0; i < value.size(); ++i) {
                const T gi = (g ? g[i] : T(0)) + weight_decay_ * value[i];
                vel[i] = momentum_ * vel[i] + gi;
                value[i] -= lr * vel[i];
            }
        }
    }

    std::map<std::string, TensorT<T>>& velocity() { return velocity_; }
    const std::map<std::string, TensorT<T>>& velocity() const { return velocity_; }

    T momentum() const { return momentum_; }
    T weight_decay() const { return weight_decay_; }

private:
    T momentum_, weight_decay_;
    std::map<std::string, TensorT<T>> velocity_;
};

// Standard Adam without weight decay. Step counts are per parameter so the
// bias correction stays consistent when some parameters stop updating.
template <typename T>
class AdamT {
public:
    AdamT(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamT<T>*>& params, T lr) {
        for (ParamT<T>* p : params) {
            TensorT<T>& value = p->var->value;
            auto [mit, m_new] = m_.try_emplace(p->name, value.shape());
            auto [vit, v_new] = v_.try_emplace(p->name, value.shape());
            (void)m_new;
            (void)v_new;
            TensorT<T>& m = mit->second;
            TensorT<T>& v = vit->second;
            const std::size_t t = ++steps_[p->name];
            const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t)));
            const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t)));
            const bool has_grad = p->var->has_grad();
            const T* g = has_grad ? p->var->grad.data() : nullptr;
            for (std::size_t i = 0; i < value.size(); ++i) {
                const T gi = g ? g[i] : T(0);
                m[i] = beta1_ * m[i] + (T(1) - beta1_) * gi;
                v[i] = beta2_ * v[i] + (T(1) - beta2_) * gi * gi;
                const T mh = m[i] / bc1;
                const T vh = v[i] / bc2;
                value[i] -= lr * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    std::map<std::string, TensorT<T>>& moment1() { return m_; }
    std::map<std::string, TensorT<T>>& moment2() { return v_; }
    std::map<std::string, std::size_t>& steps() { return steps_; }

private:
    T beta1_, beta2_, eps_;
    std::map<std::string, TensorT<T>> m_;
    std::map<std::string, TensorT<T>> v_;
    std::map<std::string, std::size_t> steps_;
};

template <typename T>
void zero_grads(const std::vector<ParamT<T>*>& params) {
    for (ParamT<T>* p : params)
        if (p->var->has_grad()) p->var->grad.fill(T(0));
}

}  // namespace atrc
