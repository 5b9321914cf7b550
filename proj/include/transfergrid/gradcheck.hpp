#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "transfergrid/layers.hpp"
#include "transfergrid/trainer.hpp"

namespace transfergrid {

struct GradCheckReport {
    double max_rel_err = 0;
    std::string worst_param;
    size_t checked = 0;
};

// Wraps a bare layer stack in the module interface the checker (and fit)
// expects; handy for per-layer property tests.
template <typename S>
struct SequentialModule {
    Sequential<S> seq;
    Rng rng{0};

    Tensor<S> forward(const Tensor<S>& x, bool training, bool record) {
        RunContext ctx{training, record, &rng};
        return seq.forward(x, ctx);
    }
    Tensor<S> forward(const Tensor<S>& x, bool training) { return forward(x, training, training); }
    void backward(const Tensor<S>& g) { seq.backward(g); }
    std::vector<Parameter<S>*> params() {
        std::vector<Parameter<S>*> out;
        seq.collect_params(out);
        return out;
    }
    std::vector<Tensor<S>*> buffers() {
        std::vector<Tensor<S>*> out;
        seq.collect_buffers(out);
        return out;
    }
    double max_dropout() const { return seq.max_dropout(); }
};

// Central finite differences (step h) against the analytic gradients of the
// balanced cross-entropy loss, on up to samples_per_param randomly chosen
// coordinates of every parameter. The module must be deterministic in the
// chosen mode, so active dropout in training mode is rejected.
template <typename M>
GradCheckReport finite_diff_check(M& model, const Tensor<double>& x, const std::vector<size_t>& labels,
                                  bool training_mode, size_t samples_per_param, uint64_t seed,
                                  double h = 1e-4) {
    if (training_mode && model.max_dropout() > 0)
        throw std::logic_error("finite_diff_check: dropout is stochastic in train mode; run in eval mode or "
                               "build with zero dropout");

    auto params = model.params();
    auto buffers = model.buffers();
    std::vector<std::vector<double>> buffer_snap;
    for (auto* b : buffers) buffer_snap.push_back(b->data);
    auto restore_buffers = [&]() {
        for (size_t i = 0; i < buffers.size(); ++i) buffers[i]->data = buffer_snap[i];
    };

    Tensor<double> probe = model.forward(x, training_mode, false);
    const size_t K = probe.shape.at(1);
    const std::vector<double> weights = class_weights_from_labels(labels, K);

    auto loss_at = [&]() {
        restore_buffers();
        Tensor<double> scores = model.forward(x, training_mode, false);
        const double l = balanced_cross_entropy(scores, labels, weights);
        if (!std::isfinite(l)) throw std::runtime_error("finite_diff_check: non-finite loss");
        return l;
    };

    // Analytic pass.
    for (auto* p : params) p->zero_grad();
    restore_buffers();
    Tensor<double> scores = model.forward(x, training_mode, true);
    Tensor<double> grad_scores;
    const double base_loss = balanced_cross_entropy(scores, labels, weights, &grad_scores);
    if (!std::isfinite(base_loss)) throw std::runtime_error("finite_diff_check: non-finite loss");
    model.backward(grad_scores);
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad.data);

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<double>& p = *params[pi];
        const size_t n = p.value.numel();
        Rng pick(derive_seed(seed, "gradcheck", pi));
        std::vector<size_t> idx;
        if (n <= samples_per_param) {
            for (size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (size_t i = 0; i < samples_per_param; ++i) idx.push_back(pick.bounded(n));
        }
        for (size_t i : idx) {
            const double saved = p.value.data[i];
            p.value.data[i] = saved + h;
            const double lp = loss_at();
            p.value.data[i] = saved - h;
            const double lm = loss_at();
            p.value.data[i] = saved;
            const double numeric = (lp - lm) / (2 * h);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-6);
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    restore_buffers();
    return report;
}

}  // namespace transfergrid
