#pragma once

#include "anonydiff/nn.hpp"

#include <cmath>
#include <map>
#include <string>

namespace anonydiff {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay: p <- p - lr*wd*p, then the Adam step.
/// Parameters that received no gradient this step are left untouched.
template <class T>
class AdamW {
public:
    struct Slot {
        Tensor<T> m, v;
    };

    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }
    std::map<std::string, Slot>& slots() { return slots_; }
    const std::map<std::string, Slot>& slots() const { return slots_; }
    void set_steps(std::int64_t t) { t_ = t; }
    void set_lr(double lr) { cfg_.lr = lr; }

    /// `grad_scale` multiplies every gradient first (1/accumulation for averaging).
    void step(ParameterStore<T>& store, double grad_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : store.all()) {
            if (!p.trainable || p.grad.empty()) continue;
            auto& s = slots_[p.name];
            if (s.m.empty()) {
                s.m = Tensor<T>(p.value.shape);
                s.v = Tensor<T>(p.value.shape);
            }
            const T decay = static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
            const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
            const T gs = static_cast<T>(grad_scale);
            const T step = static_cast<T>(cfg_.lr / bc1);
            const T ibc2 = static_cast<T>(1.0 / bc2);
            const T eps = static_cast<T>(cfg_.eps);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const T g = p.grad.data[i] * gs;
                T& m = s.m.data[i];
                T& v = s.v.data[i];
                m = b1 * m + (T(1) - b1) * g;
                v = b2 * v + (T(1) - b2) * g * g;
                T& w = p.value.data[i];
                w *= decay;
                w -= step * m / (std::sqrt(v * ibc2) + eps);
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

}  // namespace anonydiff
