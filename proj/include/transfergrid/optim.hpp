#pragma once

#include <cmath>
#include <vector>

#include "transfergrid/errors.hpp"
#include "transfergrid/rng.hpp"
#include "transfergrid/tensor.hpp"

namespace transfergrid {

// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
// Conv weights are (out, in/groups, kh, kw): fan_in = in/groups * kh * kw,
// fan_out = out * kh * kw. Affine weights are (out, in). Rank-1 tensors
// (biases, BN affine) are left at their constructed values.
template <typename S>
void xavier_init(Parameter<S>& p, Rng& rng) {
    const Shape& s = p.value.shape;
    size_t fan_in, fan_out;
    if (s.size() == 4) {
        fan_in = s[1] * s[2] * s[3];
        fan_out = s[0] * s[2] * s[3];
    } else if (s.size() == 2) {
        fan_in = s[1];
        fan_out = s[0];
    } else {
        return;
    }
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : p.value.data) v = static_cast<S>(rng.uniform(-a, a));
}

template <typename S>
void xavier_init_all(const std::vector<Parameter<S>*>& params, Rng& rng) {
    for (auto* p : params) xavier_init(*p, rng);
}

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
};

// Decoupled weight decay: the decay term is applied directly to the
// parameter, outside the adaptive gradient rescaling.
template <typename S>
class AdamW {
public:
    AdamW(std::vector<Parameter<S>*> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        if (cfg_.lr <= 0) throw UsageError("adamw: learning rate must be positive");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            Parameter<S>& p = *params_[k];
            for (size_t i = 0; i < p.value.numel(); ++i) {
                const double g = p.grad.data[i];
                const double m = cfg_.beta1 * m_[k].data[i] + (1.0 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * v_[k].data[i] + (1.0 - cfg_.beta2) * g * g;
                m_[k].data[i] = m;
                v_[k].data[i] = v;
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                const double theta = p.value.data[i];
                p.value.data[i] = static_cast<S>(
                    theta - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta));
            }
        }
    }

    size_t step_count() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<Parameter<S>*> params_;
    AdamWConfig cfg_;
    // Moment estimates kept in double regardless of the model scalar so the
    // update rule is identical across float/double instantiations.
    std::vector<Tensor<double>> m_, v_;
    size_t t_ = 0;
};

}  // namespace transfergrid
