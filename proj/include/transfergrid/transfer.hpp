#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "transfergrid/checkpoint.hpp"
#include "transfergrid/models.hpp"
#include "transfergrid/trainer.hpp"

namespace transfergrid {

// Head-only training module used for linear probing: the representer is
// frozen outside, so the probe optimizes a single affine layer on cached
// representations.
template <typename S>
struct HeadOnlyModule {
    Affine<S>* head;

    Tensor<S> forward(const Tensor<S>& x, bool training, bool record) {
        RunContext ctx{training, record, nullptr};
        return head->forward(x, ctx);
    }
    Tensor<S> forward(const Tensor<S>& x, bool training) { return forward(x, training, training); }
    void backward(const Tensor<S>& g) { head->backward(g); }
    std::vector<Parameter<S>*> params() {
        std::vector<Parameter<S>*> out;
        head->collect_params(out);
        return out;
    }
    std::vector<Tensor<S>*> buffers() { return {}; }
    double max_dropout() const { return 0; }
};

// Eval-mode representer outputs for every trial of a split, batched.
inline ArraySet<float> compute_representations(Model<float>& model, const ArraySet<float>& set,
                                               size_t batch_size = 64) {
    ArraySet<float> out;
    out.labels = set.labels;
    out.subjects = set.subjects;
    out.n_classes = set.n_classes;
    out.inputs = Tensor<float>({set.size(), model.rep_dim});
    std::vector<size_t> idx(set.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (size_t lo = 0; lo < set.size(); lo += batch_size) {
        const size_t hi = std::min(set.size(), lo + batch_size);
        Tensor<float> x = detail::gather_batch(set.inputs, idx, lo, hi);
        Tensor<float> r = model.representer_forward(x, false, false);
        if (r.shape.size() != 2 || r.shape[1] != model.rep_dim)
            throw DataError("representation dimension mismatch");
        std::copy_n(r.data.data(), r.numel(), &out.inputs.data[lo * model.rep_dim]);
    }
    return out;
}

struct ProbeOutcome {
    std::unique_ptr<Affine<float>> head;  // trained target head psi_T
    TrainReport report;
    uint64_t rep_hash_before = 0;
    uint64_t rep_hash_after = 0;
};

// 3-step probe, steps 1-2: freeze the source representer (eval mode, so BN
// statistics cannot drift), train a fresh Xavier head of the target's output
// dimension on cached representations. The freeze is verified by hashing all
// representer parameters and buffers before and after.
inline ProbeOutcome linear_probe(Model<float>& source, const ArraySet<float>& target_train,
                                 const ArraySet<float>& target_val, const TrainConfig& cfg,
                                 SubjectUsageLog* usage = nullptr) {
    ProbeOutcome out;
    out.rep_hash_before = source.rep_state_hash();

    ArraySet<float> rep_train = compute_representations(source, target_train, cfg.batch_size);
    ArraySet<float> rep_val = compute_representations(source, target_val, cfg.batch_size);

    out.head = std::make_unique<Affine<float>>("head", source.rep_dim, target_train.n_classes);
    Rng head_rng(derive_seed(cfg.seed, "head"));
    xavier_init(out.head->weight(), head_rng);

    HeadOnlyModule<float> probe{out.head.get()};
    out.report = fit(probe, rep_train, rep_val, cfg, usage);

    out.rep_hash_after = source.rep_state_hash();
    if (out.rep_hash_before != out.rep_hash_after)
        throw FreezeViolation("representer state changed during linear probe");
    return out;
}

// Frozen source representer composed with a probed head, for evaluation.
struct ProbedModel {
    Model<float>* source;
    Affine<float>* head;

    Tensor<float> forward(const Tensor<float>& x, bool) {
        Tensor<float> r = source->representer_forward(x, false, false);
        RunContext ctx{false, false, nullptr};
        return head->forward(r, ctx);
    }
};

struct TransferCell {
    std::string source, target;
    std::vector<double> fold_acc;
    std::vector<std::map<std::string, double>> fold_subject_acc;

    double mean() const {
        double s = 0;
        for (double a : fold_acc) s += a;
        return fold_acc.empty() ? 0 : s / static_cast<double>(fold_acc.size());
    }
    // Population standard deviation over folds.
    double stddev() const {
        if (fold_acc.empty()) return 0;
        const double mu = mean();
        double s = 0;
        for (double a : fold_acc) s += (a - mu) * (a - mu);
        return std::sqrt(s / static_cast<double>(fold_acc.size()));
    }
};

struct TransferMatrix {
    std::string arch;
    std::vector<std::string> tasks;  // lexicographic
    std::vector<double> chance;      // per task
    size_t k = 0;
    std::vector<TransferCell> cells;  // row-major (source-major)

    size_t n() const { return tasks.size(); }
    TransferCell& cell(size_t s, size_t t) { return cells.at(s * n() + t); }
    const TransferCell& cell(size_t s, size_t t) const { return cells.at(s * n() + t); }

    size_t index_of(const std::string& task) const {
        for (size_t i = 0; i < tasks.size(); ++i)
            if (tasks[i] == task) return i;
        throw DataError("unknown task '" + task + "' in transfer matrix");
    }

    json to_json() const {
        json j;
        j["arch"] = arch;
        j["tasks"] = tasks;
        j["chance"] = chance;
        j["folds"] = k;
        j["cells"] = json::array();
        for (const auto& cl : cells) {
            json subjects = json::array();
            for (const auto& fold_map : cl.fold_subject_acc) {
                json jm = json::object();
                for (const auto& [s, a] : fold_map) jm[s] = a;
                subjects.push_back(jm);
            }
            j["cells"].push_back({{"source", cl.source},
                                  {"target", cl.target},
                                  {"fold_acc", cl.fold_acc},
                                  {"mean", cl.mean()},
                                  {"std", cl.stddev()},
                                  {"per_subject_acc", subjects}});
        }
        return j;
    }

    static TransferMatrix from_json(const json& j) {
        TransferMatrix m;
        m.arch = j.at("arch").get<std::string>();
        m.tasks = j.at("tasks").get<std::vector<std::string>>();
        m.chance = j.at("chance").get<std::vector<double>>();
        m.k = j.at("folds").get<size_t>();
        for (const auto& cj : j.at("cells")) {
            TransferCell cl;
            cl.source = cj.at("source").get<std::string>();
            cl.target = cj.at("target").get<std::string>();
            cl.fold_acc = cj.at("fold_acc").get<std::vector<double>>();
            for (const auto& fold_map : cj.at("per_subject_acc")) {
                std::map<std::string, double> sm;
                for (auto it = fold_map.begin(); it != fold_map.end(); ++it) sm[it.key()] = it.value().get<double>();
                cl.fold_subject_acc.push_back(std::move(sm));
            }
            m.cells.push_back(std::move(cl));
        }
        if (m.cells.size() != m.tasks.size() * m.tasks.size()) throw DataError("transfer matrix: cell count mismatch");
        return m;
    }

    // Rows = sources, columns = targets, cells "mean±std" to 3 decimals.
    void write_csv(std::ostream& os) const {
        os << "source\\target";
        for (const auto& t : tasks) os << "," << t;
        os << "\n";
        char buf[64];
        for (size_t s = 0; s < n(); ++s) {
            os << tasks[s];
            for (size_t t = 0; t < n(); ++t) {
                const TransferCell& cl = cell(s, t);
                std::snprintf(buf, sizeof buf, ",%.3f\xC2\xB1%.3f", cl.mean(), cl.stddev());
                os << buf;
            }
            os << "\n";
        }
    }
};

struct GridOptions {
    TrainConfig train;  // per-cell seed is derived from `seed`, not train.seed
    uint64_t seed = 0;
    size_t jobs = 1;
    std::filesystem::path cell_dir;  // non-empty: resumable cells + source checkpoints
    bool progress = true;
};

struct GridResult {
    TransferMatrix matrix;
    std::vector<std::set<std::string>> fold_gradient_subjects;  // audit, per fold
    size_t freeze_checks = 0;
    size_t cells_loaded = 0;  // resumed from disk
};

namespace detail {

inline std::string sanitize_id(const std::string& s) {
    std::string out;
    for (char ch : s)
        out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
    return out;
}

struct CellRecord {
    double balanced_acc = 0;
    std::map<std::string, double> per_subject_acc;
};

inline std::filesystem::path cell_path(const std::filesystem::path& dir, size_t fold, const std::string& src,
                                       const std::string& tgt) {
    return dir / ("cell_f" + std::to_string(fold) + "_" + sanitize_id(src) + "_" + sanitize_id(tgt) + ".json");
}

inline std::optional<CellRecord> load_cell(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    try {
        json j;
        in >> j;
        CellRecord rec;
        rec.balanced_acc = j.at("balanced_acc").get<double>();
        for (auto it = j.at("per_subject_acc").begin(); it != j.at("per_subject_acc").end(); ++it)
            rec.per_subject_acc[it.key()] = it.value().get<double>();
        return rec;
    } catch (const std::exception&) {
        return std::nullopt;  // corrupt cell: recompute
    }
}

inline void save_cell(const std::filesystem::path& path, size_t fold, const std::string& src,
                      const std::string& tgt, const CellRecord& rec) {
    json j;
    j["fold"] = fold;
    j["source"] = src;
    j["target"] = tgt;
    j["balanced_acc"] = rec.balanced_acc;
    json subj = json::object();
    for (const auto& [s, a] : rec.per_subject_acc) subj[s] = a;
    j["per_subject_acc"] = subj;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << "\n";
}

}  // namespace detail

// Full grid: per (fold, source) unit, train the source model on its fold's
// train/val subjects, fill the diagonal by evaluating on the source's test
// subjects, then linear-probe every other task and evaluate on that task's
// test subjects. Units are independent, so parallelism cannot change results.
inline GridResult run_transfer_grid(const std::map<std::string, TaskDataset>& tasks, const AlignedSplitPlan& plan,
                                    ArchitectureSpec proto, const GridOptions& opts) {
    if (tasks.empty()) throw DataError("run_transfer_grid: no tasks");
    const size_t K = plan.folds.size();
    if (K == 0) throw DataError("run_transfer_grid: empty split plan");

    std::vector<std::string> task_ids;
    for (const auto& [id, ds] : tasks) task_ids.push_back(id);  // map order = lexicographic

    const TaskDataset& first = tasks.begin()->second;
    const std::set<std::string> plan_subjects(plan.subjects.begin(), plan.subjects.end());
    for (const auto& [id, ds] : tasks) {
        ds.validate();
        if (ds.m != first.m || ds.c != first.c)
            throw DataError("run_transfer_grid: task " + id + " has (m,c) different from " + first.task_id);
        if (std::set<std::string>(ds.subjects.begin(), ds.subjects.end()) != plan_subjects)
            throw DataError("run_transfer_grid: task " + id + " subjects differ from split plan");
    }
    proto.m = first.m;
    proto.c = first.c;
    proto.sampling_rate = first.sampling_rate;

    GridResult result;
    result.matrix.arch = arch_kind_name(proto.kind);
    result.matrix.tasks = task_ids;
    result.matrix.k = K;
    for (const auto& id : task_ids) result.matrix.chance.push_back(chance_level(tasks.at(id).label_space));
    result.matrix.cells.resize(task_ids.size() * task_ids.size());
    for (size_t s = 0; s < task_ids.size(); ++s)
        for (size_t t = 0; t < task_ids.size(); ++t) {
            TransferCell& cl = result.matrix.cell(s, t);
            cl.source = task_ids[s];
            cl.target = task_ids[t];
            cl.fold_acc.resize(K, 0);
            cl.fold_subject_acc.resize(K);
        }
    result.fold_gradient_subjects.resize(K);

    const bool persist = !opts.cell_dir.empty();
    if (persist) std::filesystem::create_directories(opts.cell_dir / "models");

    struct Unit {
        size_t fold, source;
    };
    std::vector<Unit> units;
    for (size_t f = 0; f < K; ++f)
        for (size_t s = 0; s < task_ids.size(); ++s) units.push_back({f, s});

    std::mutex merge_mutex;
    std::atomic<size_t> next_unit{0};
    std::exception_ptr first_error;

    auto worker = [&]() {
        try {
            for (;;) {
                const size_t u = next_unit.fetch_add(1);
                if (u >= units.size()) return;
                const size_t f = units[u].fold, si = units[u].source;
                const std::string& src_id = task_ids[si];
                const FoldSplit& fold = plan.folds[f];
                const TaskDataset& src_ds = tasks.at(src_id);

                // Resume: collect already-computed cells for this unit.
                std::vector<std::optional<detail::CellRecord>> done(task_ids.size());
                bool all_done = true;
                for (size_t ti = 0; ti < task_ids.size(); ++ti) {
                    if (persist) done[ti] = detail::load_cell(detail::cell_path(opts.cell_dir, f, src_id, task_ids[ti]));
                    if (!done[ti]) all_done = false;
                }

                SubjectUsageLog usage;
                std::optional<Model<float>> model;
                size_t unit_freeze_checks = 0, unit_loaded = 0;

                if (!all_done) {
                    ArchitectureSpec spec = proto;
                    spec.n_classes = src_ds.n_classes();
                    const uint64_t pretrain_seed = derive_seed(opts.seed, "cell", f, src_id, src_id);
                    TrainConfig cfg = opts.train;
                    cfg.seed = pretrain_seed;

                    const auto model_dir =
                        opts.cell_dir / "models" / ("f" + std::to_string(f) + "_" + detail::sanitize_id(src_id));
                    bool loaded_model = false;
                    if (persist && std::filesystem::exists(model_dir / "manifest.json")) {
                        try {
                            model.emplace(load_checkpoint(model_dir));
                            loaded_model = true;
                        } catch (const DataError&) {
                            model.reset();  // corrupt checkpoint: retrain
                        }
                    }
                    if (!loaded_model) {
                        if (opts.progress)
                            std::fprintf(stderr, "[grid] fold %zu: training source %s\n", f, src_id.c_str());
                        ArraySet<float> s_train = make_array_set(src_ds, fold.train_subjects);
                        ArraySet<float> s_val = make_array_set(src_ds, fold.val_subjects);
                        model.emplace(build_model<float>(spec, pretrain_seed));
                        fit(*model, s_train, s_val, cfg, &usage);
                        if (persist) save_checkpoint(*model, model_dir, pretrain_seed, cfg);
                    }
                }

                for (size_t ti = 0; ti < task_ids.size(); ++ti) {
                    const std::string& tgt_id = task_ids[ti];
                    detail::CellRecord rec;
                    if (done[ti]) {
                        rec = *done[ti];
                        ++unit_loaded;
                    } else {
                        const TaskDataset& tgt_ds = tasks.at(tgt_id);
                        ArraySet<float> t_test = make_array_set(tgt_ds, fold.test_subjects);
                        EvalReport ev;
                        if (ti == si) {
                            ev = evaluate(*model, t_test, opts.train.batch_size);
                        } else {
                            if (opts.progress)
                                std::fprintf(stderr, "[grid] fold %zu: probing %s -> %s\n", f, src_id.c_str(),
                                             tgt_id.c_str());
                            TrainConfig probe_cfg = opts.train;
                            probe_cfg.seed = derive_seed(opts.seed, "cell", f, src_id, tgt_id);
                            ArraySet<float> t_train = make_array_set(tgt_ds, fold.train_subjects);
                            ArraySet<float> t_val = make_array_set(tgt_ds, fold.val_subjects);
                            ProbeOutcome probe = linear_probe(*model, t_train, t_val, probe_cfg, &usage);
                            ++unit_freeze_checks;
                            ProbedModel probed{&*model, probe.head.get()};
                            ev = evaluate(probed, t_test, opts.train.batch_size);
                        }
                        rec.balanced_acc = ev.balanced_acc;
                        rec.per_subject_acc = ev.per_subject_acc;
                        if (persist)
                            detail::save_cell(detail::cell_path(opts.cell_dir, f, src_id, tgt_id), f, src_id,
                                              tgt_id, rec);
                    }
                    TransferCell& cl = result.matrix.cell(si, ti);
                    cl.fold_acc[f] = rec.balanced_acc;
                    cl.fold_subject_acc[f] = rec.per_subject_acc;
                }

                // Leakage audit: gradient updates in this unit must never
                // have touched this fold's test subjects.
                for (const auto& subj : usage.gradient_subjects)
                    if (std::find(fold.test_subjects.begin(), fold.test_subjects.end(), subj) !=
                        fold.test_subjects.end())
                        throw DataError("leakage: fold " + std::to_string(f) + " test subject '" + subj +
                                        "' entered a gradient update (source " + src_id + ")");

                std::lock_guard<std::mutex> lock(merge_mutex);
                result.fold_gradient_subjects[f].insert(usage.gradient_subjects.begin(),
                                                        usage.gradient_subjects.end());
                result.freeze_checks += unit_freeze_checks;
                result.cells_loaded += unit_loaded;
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(merge_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };

    const size_t n_workers = std::max<size_t>(1, std::min(opts.jobs, units.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return result;
}

}  // namespace transfergrid
