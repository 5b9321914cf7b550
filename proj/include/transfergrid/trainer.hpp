#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfergrid/dataio.hpp"
#include "transfergrid/errors.hpp"
#include "transfergrid/optim.hpp"
#include "transfergrid/tensor.hpp"

namespace transfergrid {

// A materialized split: all trials of the selected subjects as one NCHW
// tensor (N, 1, c, m) with per-trial labels and subject ids.
template <typename S>
struct ArraySet {
    Tensor<S> inputs;
    std::vector<size_t> labels;
    std::vector<std::string> subjects;
    size_t n_classes = 0;

    size_t size() const { return labels.size(); }
};

template <typename S = float>
ArraySet<S> make_array_set(const TaskDataset& ds, const std::vector<std::string>& subject_subset) {
    std::set<std::string> keep(subject_subset.begin(), subject_subset.end());
    std::vector<size_t> picked;
    for (size_t i = 0; i < ds.trials.size(); ++i)
        if (keep.count(ds.trials[i].subject)) picked.push_back(i);

    ArraySet<S> out;
    out.n_classes = ds.n_classes();
    out.inputs = Tensor<S>({picked.size(), 1, ds.c, ds.m});
    out.labels.reserve(picked.size());
    out.subjects.reserve(picked.size());
    for (size_t n = 0; n < picked.size(); ++n) {
        const TrialRecording& t = ds.trials[picked[n]];
        out.labels.push_back(t.label);
        out.subjects.push_back(t.subject);
        for (size_t ch = 0; ch < ds.c; ++ch)
            for (size_t tt = 0; tt < ds.m; ++tt)
                out.inputs.at4(n, 0, ch, tt) = static_cast<S>(t.samples[tt * ds.c + ch]);
    }

    // Split-level class coverage is allowed to be partial, but flag it.
    std::map<std::string, std::set<size_t>> classes_of;
    for (size_t n = 0; n < out.labels.size(); ++n) classes_of[out.subjects[n]].insert(out.labels[n]);
    for (const auto& [subj, classes] : classes_of)
        if (classes.size() < out.n_classes)
            std::fprintf(stderr, "warning: task %s subject %s is missing %zu class(es) in this split\n",
                         ds.task_id.c_str(), subj.c_str(), out.n_classes - classes.size());
    return out;
}

// w_k = N / (K * N_k), computed on the training split only.
inline std::vector<double> class_weights_from_labels(const std::vector<size_t>& labels, size_t n_classes) {
    std::vector<size_t> counts(n_classes, 0);
    for (size_t l : labels) counts.at(l)++;
    std::vector<double> w(n_classes);
    for (size_t k = 0; k < n_classes; ++k) {
        if (counts[k] == 0) throw DataError("class " + std::to_string(k) + " has zero training trials");
        w[k] = static_cast<double>(labels.size()) / (static_cast<double>(n_classes) * counts[k]);
    }
    return w;
}

// Weighted cross-entropy normalized by the sum of applied weights. Stable
// log-softmax; optionally fills d(loss)/d(scores).
template <typename S>
double balanced_cross_entropy(const Tensor<S>& scores, const std::vector<size_t>& labels,
                              const std::vector<double>& class_weights, Tensor<S>* grad = nullptr) {
    const size_t N = scores.shape.at(0), K = scores.shape.at(1);
    if (labels.size() != N) throw std::invalid_argument("balanced_cross_entropy: label count mismatch");
    if (class_weights.size() != K) throw std::invalid_argument("balanced_cross_entropy: weight count mismatch");
    if (grad) {
        grad->shape = scores.shape;
        grad->data.assign(scores.numel(), S(0));
    }
    double total = 0, sum_w = 0;
    for (size_t i = 0; i < N; ++i) sum_w += class_weights[labels[i]];
    if (sum_w <= 0) throw std::invalid_argument("balanced_cross_entropy: non-positive weight sum");
    std::vector<double> p(K);
    for (size_t i = 0; i < N; ++i) {
        const S* row = &scores.data[i * K];
        double mx = row[0];
        for (size_t k = 1; k < K; ++k) mx = std::max<double>(mx, row[k]);
        double lse = 0;
        for (size_t k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
        const double log_z = mx + std::log(lse);
        const double w = class_weights[labels[i]];
        total += w * (log_z - row[labels[i]]);
        if (grad) {
            for (size_t k = 0; k < K; ++k) p[k] = std::exp(row[k] - log_z);
            S* grow = &grad->data[i * K];
            for (size_t k = 0; k < K; ++k)
                grow[k] = static_cast<S>(w * (p[k] - (k == labels[i] ? 1.0 : 0.0)) / sum_w);
        }
    }
    return total / sum_w;
}

// Argmax with ties broken toward the lowest class index.
template <typename S>
std::vector<size_t> argmax_rows(const Tensor<S>& scores) {
    const size_t N = scores.shape.at(0), K = scores.shape.at(1);
    std::vector<size_t> out(N);
    for (size_t i = 0; i < N; ++i) {
        size_t best = 0;
        for (size_t k = 1; k < K; ++k)
            if (scores.data[i * K + k] > scores.data[i * K + best]) best = k;
        out[i] = best;
    }
    return out;
}

// Mean over classes of per-class recall.
inline double balanced_accuracy(const std::vector<size_t>& predictions, const std::vector<size_t>& labels,
                                size_t n_classes) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("balanced_accuracy: size mismatch");
    std::vector<size_t> correct(n_classes, 0), total(n_classes, 0);
    for (size_t i = 0; i < labels.size(); ++i) {
        total.at(labels[i])++;
        if (predictions[i] == labels[i]) correct[labels[i]]++;
    }
    double acc = 0;
    for (size_t k = 0; k < n_classes; ++k) {
        if (total[k] == 0) throw DataError("balanced_accuracy: class " + std::to_string(k) + " absent from labels");
        acc += static_cast<double>(correct[k]) / total[k];
    }
    return acc / static_cast<double>(n_classes);
}

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 5e-4;
    size_t max_epochs = 200;
    size_t patience = 50;
    size_t batch_size = 64;
    uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0) throw UsageError("train config: learning_rate must be positive");
        if (batch_size < 1) throw UsageError("train config: batch_size must be >= 1");
        if (patience > max_epochs) throw UsageError("train config: patience must be <= max_epochs");
    }
};

struct TrainReport {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> val_balanced_acc;
    size_t best_epoch = 0;  // 0-based index into the per-epoch vectors
    std::string stop_reason;

    size_t n_epochs() const { return train_loss.size(); }

    json to_json() const {
        return json{{"train_loss", train_loss},
                    {"val_loss", val_loss},
                    {"val_balanced_acc", val_balanced_acc},
                    {"best_epoch", best_epoch},
                    {"stop_reason", stop_reason}};
    }
};

// Audit trail: every subject that contributed to a gradient update.
struct SubjectUsageLog {
    std::set<std::string> gradient_subjects;

    void note(const std::vector<std::string>& subjects, const std::vector<size_t>& batch_indices) {
        for (size_t i : batch_indices) gradient_subjects.insert(subjects[i]);
    }
};

namespace detail {

template <typename S>
Tensor<S> gather_batch(const Tensor<S>& inputs, const std::vector<size_t>& idx, size_t lo, size_t hi) {
    const size_t row = inputs.numel() / inputs.shape[0];
    Shape batch_shape = inputs.shape;
    batch_shape[0] = hi - lo;
    Tensor<S> batch(batch_shape);
    for (size_t i = lo; i < hi; ++i)
        std::copy_n(&inputs.data[idx[i] * row], row, &batch.data[(i - lo) * row]);
    return batch;
}

template <typename S, typename M>
double eval_loss(M& model, const ArraySet<S>& set, const std::vector<double>& weights, size_t batch_size,
                 std::vector<size_t>* predictions = nullptr) {
    double total = 0, sum_w = 0;
    if (predictions) predictions->clear();
    std::vector<size_t> idx(set.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (size_t lo = 0; lo < set.size(); lo += batch_size) {
        const size_t hi = std::min(set.size(), lo + batch_size);
        Tensor<S> x = gather_batch(set.inputs, idx, lo, hi);
        Tensor<S> scores = model.forward(x, false);
        std::vector<size_t> labels(set.labels.begin() + lo, set.labels.begin() + hi);
        double batch_w = 0;
        for (size_t l : labels) batch_w += weights[l];
        total += balanced_cross_entropy(scores, labels, weights) * batch_w;
        sum_w += batch_w;
        if (predictions) {
            auto preds = argmax_rows(scores);
            predictions->insert(predictions->end(), preds.begin(), preds.end());
        }
    }
    return sum_w > 0 ? total / sum_w : 0.0;
}

}  // namespace detail

// Minimizes balanced cross-entropy with AdamW; early-stops on validation
// loss (strict improvement, `patience` epochs) and restores the best-epoch
// parameters and buffers. Works for any module exposing forward/backward/
// params/buffers, which covers both full models and head-only probes.
template <typename M, typename S>
TrainReport fit(M& model, const ArraySet<S>& train, const ArraySet<S>& val, const TrainConfig& cfg,
                SubjectUsageLog* usage = nullptr) {
    cfg.validate();
    if (train.size() == 0) throw DataError("fit: empty training split");
    if (val.size() == 0) throw DataError("fit: empty validation split");

    const std::vector<double> weights = class_weights_from_labels(train.labels, train.n_classes);
    auto params = model.params();
    AdamWConfig opt_cfg;
    opt_cfg.lr = cfg.learning_rate;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW<S> opt(params, opt_cfg);

    auto buffers = model.buffers();
    auto snapshot = [&]() {
        std::vector<std::vector<S>> snap;
        for (auto* p : params) snap.push_back(p->value.data);
        for (auto* b : buffers) snap.push_back(b->data);
        return snap;
    };
    auto restore = [&](const std::vector<std::vector<S>>& snap) {
        size_t i = 0;
        for (auto* p : params) p->value.data = snap[i++];
        for (auto* b : buffers) b->data = snap[i++];
    };

    TrainReport report;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<S>> best_state;
    size_t since_best = 0;

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, "order", epoch));
        order_rng.shuffle(order);

        double epoch_loss = 0, epoch_w = 0;
        for (size_t lo = 0; lo < train.size(); lo += cfg.batch_size) {
            const size_t hi = std::min(train.size(), lo + cfg.batch_size);
            Tensor<S> x = detail::gather_batch(train.inputs, order, lo, hi);
            std::vector<size_t> labels(hi - lo);
            for (size_t i = lo; i < hi; ++i) labels[i - lo] = train.labels[order[i]];
            if (usage) {
                std::vector<size_t> batch_idx(order.begin() + lo, order.begin() + hi);
                usage->note(train.subjects, batch_idx);
            }

            opt.zero_grad();
            Tensor<S> scores = model.forward(x, true);
            Tensor<S> grad;
            const double loss = balanced_cross_entropy(scores, labels, weights, &grad);
            if (!std::isfinite(loss))
                throw TrainingDivergence("non-finite loss at epoch " + std::to_string(epoch) + ", batch offset " +
                                         std::to_string(lo));
            model.backward(grad);
            opt.step();

            double batch_w = 0;
            for (size_t l : labels) batch_w += weights[l];
            epoch_loss += loss * batch_w;
            epoch_w += batch_w;
        }
        report.train_loss.push_back(epoch_loss / epoch_w);

        std::vector<size_t> val_preds;
        const double val_loss = detail::eval_loss(model, val, weights, cfg.batch_size, &val_preds);
        if (!std::isfinite(val_loss))
            throw TrainingDivergence("non-finite validation loss at epoch " + std::to_string(epoch));
        report.val_loss.push_back(val_loss);
        report.val_balanced_acc.push_back(balanced_accuracy(val_preds, val.labels, val.n_classes));

        if (val_loss < best_val) {
            best_val = val_loss;
            best_state = snapshot();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= cfg.patience) {
                report.stop_reason = "early_stopping";
                break;
            }
        }
    }
    if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
    if (!best_state.empty()) restore(best_state);
    return report;
}

struct EvalReport {
    double balanced_acc = 0;
    std::vector<double> per_class_recall;
    // Per-subject balanced accuracy over the classes that subject has.
    std::map<std::string, double> per_subject_acc;

    json to_json() const {
        json subj = json::object();
        for (const auto& [s, a] : per_subject_acc) subj[s] = a;
        return json{{"balanced_acc", balanced_acc}, {"per_class_recall", per_class_recall},
                    {"per_subject_acc", subj}};
    }
};

// Deterministic eval-mode evaluation: dropout off, BN running statistics.
template <typename M, typename S>
EvalReport evaluate(M& model, const ArraySet<S>& set, size_t batch_size = 64) {
    if (set.size() == 0) throw DataError("evaluate: empty set");
    std::vector<size_t> idx(set.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<size_t> preds;
    preds.reserve(set.size());
    for (size_t lo = 0; lo < set.size(); lo += batch_size) {
        const size_t hi = std::min(set.size(), lo + batch_size);
        Tensor<S> x = detail::gather_batch(set.inputs, idx, lo, hi);
        Tensor<S> scores = model.forward(x, false);
        auto batch_preds = argmax_rows(scores);
        preds.insert(preds.end(), batch_preds.begin(), batch_preds.end());
    }

    EvalReport report;
    report.balanced_acc = balanced_accuracy(preds, set.labels, set.n_classes);
    std::vector<size_t> correct(set.n_classes, 0), total(set.n_classes, 0);
    for (size_t i = 0; i < set.size(); ++i) {
        total[set.labels[i]]++;
        if (preds[i] == set.labels[i]) correct[set.labels[i]]++;
    }
    for (size_t k = 0; k < set.n_classes; ++k)
        report.per_class_recall.push_back(static_cast<double>(correct[k]) / total[k]);

    std::map<std::string, std::vector<std::pair<size_t, bool>>> by_subject;
    for (size_t i = 0; i < set.size(); ++i)
        by_subject[set.subjects[i]].push_back({set.labels[i], preds[i] == set.labels[i]});
    for (const auto& [subj, items] : by_subject) {
        std::map<size_t, std::pair<size_t, size_t>> per_class;  // class -> (correct, total)
        for (const auto& [label, ok] : items) {
            per_class[label].second++;
            if (ok) per_class[label].first++;
        }
        double acc = 0;
        for (const auto& [cls, ct] : per_class) acc += static_cast<double>(ct.first) / ct.second;
        report.per_subject_acc[subj] = acc / static_cast<double>(per_class.size());
    }
    return report;
}

}  // namespace transfergrid
