#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transfergrid/analysis.hpp"
#include "transfergrid/synthgen.hpp"
#include "transfergrid/transfer.hpp"

namespace transfergrid {

// Paper-default optimizer settings per architecture; epoch/batch limits come
// from the pipeline config.
inline TrainConfig default_train_config(ArchKind kind) {
    TrainConfig cfg;
    cfg.learning_rate = kind == ArchKind::eegnet ? 6.25e-4 : 1e-4;
    cfg.weight_decay = 5e-4;
    cfg.max_epochs = 200;
    cfg.patience = 50;
    cfg.batch_size = 64;
    return cfg;
}

struct PipelineConfig {
    std::filesystem::path data_dir;
    std::filesystem::path out_dir;
    std::vector<ArchKind> archs;
    size_t folds = 5;
    uint64_t seed = 0;
    size_t jobs = 1;
    double threshold = 0.05;
    size_t permutations = 10000;
    std::string stats_unit = "subject";  // "subject" or "fold" pairing
    size_t max_epochs = 200;
    size_t patience = 50;
    size_t batch_size = 64;
    bool progress = true;

    void validate() const {
        if (archs.empty()) throw UsageError("pipeline: at least one architecture required");
        if (out_dir.empty()) throw UsageError("pipeline: output directory required");
        if (stats_unit != "subject" && stats_unit != "fold")
            throw UsageError("pipeline: stats_unit must be 'subject' or 'fold'");
    }
};

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw DataError("write failure on " + path.string());
}

// Loads every subdirectory of `dir` that holds a dataset manifest; keyed (and
// therefore ordered) by task_id.
inline std::map<std::string, TaskDataset> load_task_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("data directory " + dir.string() + " not found");
    std::vector<std::filesystem::path> subdirs;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_directory() && std::filesystem::exists(entry.path() / "manifest.json"))
            subdirs.push_back(entry.path());
    std::sort(subdirs.begin(), subdirs.end());
    std::map<std::string, TaskDataset> tasks;
    for (const auto& sd : subdirs) {
        TaskDataset ds = load_dataset(sd);
        const std::string id = ds.task_id;
        if (!tasks.emplace(id, std::move(ds)).second) throw DataError("duplicate task_id " + id + " under " + dir.string());
    }
    if (tasks.empty()) throw DataError("no task datasets found under " + dir.string());
    return tasks;
}

namespace detail {

// Paired per-unit accuracies for one task's diagonal cell under two
// architectures. Unit = (fold, test subject) or fold, per config.
inline void paired_units(const TransferMatrix& ma, const TransferMatrix& mb, size_t task_idx,
                         const std::string& unit, std::vector<double>& x, std::vector<double>& y) {
    x.clear();
    y.clear();
    const TransferCell& ca = ma.cell(task_idx, task_idx);
    const TransferCell& cb = mb.cell(task_idx, task_idx);
    if (unit == "fold") {
        x = ca.fold_acc;
        y = cb.fold_acc;
        return;
    }
    for (size_t f = 0; f < ca.fold_subject_acc.size(); ++f) {
        for (const auto& [subj, acc] : ca.fold_subject_acc[f]) {
            auto it = cb.fold_subject_acc[f].find(subj);
            if (it == cb.fold_subject_acc[f].end())
                throw DataError("stats: subject " + subj + " missing from one architecture's fold " +
                                std::to_string(f));
            x.push_back(acc);
            y.push_back(it->second);
        }
    }
}

}  // namespace detail

// Model-pair significance battery over the diagonal (standard decoding)
// accuracies: permutation signed-rank per paradigm, Stouffer combination
// weighted by sqrt(n units), Bonferroni across pairs, pooled paired SMD.
inline json build_stats(const std::map<std::string, TransferMatrix>& matrices, const std::string& unit,
                        size_t n_permutations, uint64_t seed) {
    json stats;
    stats["unit"] = unit;
    json arch_list = json::array();
    for (const auto& [arch, m] : matrices) arch_list.push_back(arch);
    stats["architectures"] = arch_list;

    json descriptives = json::object();
    for (const auto& [arch, m] : matrices) {
        json per_task = json::object();
        for (size_t t = 0; t < m.tasks.size(); ++t) {
            const TransferCell& d = m.cell(t, t);
            per_task[m.tasks[t]] = {{"mean", d.mean()}, {"std", d.stddev()}, {"chance", m.chance[t]}};
        }
        descriptives[arch] = per_task;
    }
    stats["descriptives"] = descriptives;

    std::vector<std::string> archs;
    for (const auto& [arch, m] : matrices) archs.push_back(arch);
    json pairs = json::array();
    std::vector<double> combined_ps;
    for (size_t a = 0; a < archs.size(); ++a) {
        for (size_t b = a + 1; b < archs.size(); ++b) {
            const TransferMatrix& ma = matrices.at(archs[a]);
            const TransferMatrix& mb = matrices.at(archs[b]);
            if (ma.tasks != mb.tasks) throw DataError("stats: architectures ran on different task sets");
            json per_paradigm = json::array();
            std::vector<double> ps, weights, all_x, all_y;
            for (size_t t = 0; t < ma.tasks.size(); ++t) {
                std::vector<double> x, y;
                detail::paired_units(ma, mb, t, unit, x, y);
                const SignedRankResult sr = permutation_signed_rank(
                    x, y, n_permutations, derive_seed(seed, "stats", archs[a], archs[b], ma.tasks[t]));
                const SmdResult smd = standardized_mean_difference(x, y);
                json entry = {{"task", ma.tasks[t]},
                              {"n", x.size()},
                              {"statistic", sr.statistic},
                              {"p", sr.p},
                              {"degenerate", sr.degenerate},
                              {"smd", smd.defined ? json(smd.value) : json(nullptr)}};
                per_paradigm.push_back(entry);
                ps.push_back(sr.p);
                weights.push_back(std::sqrt(static_cast<double>(x.size())));
                all_x.insert(all_x.end(), x.begin(), x.end());
                all_y.insert(all_y.end(), y.begin(), y.end());
            }
            const double combined = stouffer_combine(ps, weights);
            const SmdResult pooled = standardized_mean_difference(all_x, all_y);
            combined_ps.push_back(combined);
            pairs.push_back({{"pair", {archs[a], archs[b]}},
                             {"per_paradigm", per_paradigm},
                             {"combined_p", combined},
                             {"smd", pooled.defined ? json(pooled.value) : json(nullptr)}});
        }
    }
    const std::vector<double> adjusted = bonferroni_adjust(combined_ps);
    for (size_t i = 0; i < pairs.size(); ++i) pairs[i]["adjusted_p"] = adjusted[i];
    stats["pairs"] = pairs;
    return stats;
}

namespace detail {

inline Dendrogram trivial_dendrogram(const std::vector<std::string>& tasks) {
    Dendrogram d;
    d.leaves = tasks;
    return d;
}

// matrix.csv/json, scores.csv, graph.dot, dendrogram.json for one grid.
inline void write_grid_artifacts(const TransferMatrix& matrix, const std::filesystem::path& dir, double threshold) {
    std::filesystem::create_directories(dir);
    {
        std::ostringstream csv;
        matrix.write_csv(csv);
        write_text_file(dir / "matrix.csv", csv.str());
    }
    write_text_file(dir / "matrix.json", matrix.to_json().dump(2) + "\n");

    const TransferabilityScores scores = rescale_scores(matrix);
    {
        std::ostringstream csv;
        scores.write_csv(csv);
        write_text_file(dir / "scores.csv", csv.str());
    }
    write_text_file(dir / "graph.dot", emit_transfer_graph(scores, threshold));

    Dendrogram dendro =
        matrix.tasks.size() >= 2 ? upgma_cluster(scores) : trivial_dendrogram(matrix.tasks);
    write_text_file(dir / "dendrogram.json", dendro.to_json().dump(2) + "\n");
}

// Canonical architecture order: sorted by name, duplicates dropped. Both the
// run and its manifest use this, so equivalent invocations match byte-for-byte.
inline std::vector<ArchKind> canonical_archs(std::vector<ArchKind> archs) {
    std::sort(archs.begin(), archs.end(),
              [](ArchKind a, ArchKind b) { return std::string(arch_kind_name(a)) < arch_kind_name(b); });
    archs.erase(std::unique(archs.begin(), archs.end()), archs.end());
    return archs;
}

}  // namespace detail

inline json pipeline_manifest(const PipelineConfig& cfg, const std::vector<std::string>& task_ids) {
    json manifest;
    manifest["format_version"] = 1;
    manifest["data"] = cfg.data_dir.string();
    manifest["tasks"] = task_ids;
    json archs = json::array();
    for (ArchKind k : detail::canonical_archs(cfg.archs)) archs.push_back(arch_kind_name(k));
    manifest["architectures"] = archs;
    manifest["folds"] = cfg.folds;
    manifest["seed"] = cfg.seed;
    manifest["jobs"] = cfg.jobs;
    manifest["threshold"] = cfg.threshold;
    manifest["permutations"] = cfg.permutations;
    manifest["stats_unit"] = cfg.stats_unit;
    json train = json::object();
    for (ArchKind k : detail::canonical_archs(cfg.archs)) {
        TrainConfig tc = default_train_config(k);
        train[arch_kind_name(k)] = {{"learning_rate", tc.learning_rate},
                                    {"weight_decay", tc.weight_decay},
                                    {"max_epochs", cfg.max_epochs},
                                    {"patience", cfg.patience},
                                    {"batch_size", cfg.batch_size}};
    }
    manifest["train"] = train;
    return manifest;
}

// End-to-end: load tasks, split, run one grid per architecture, emit all
// analysis artifacts plus the run manifest. Single-architecture runs write
// flat into out_dir; multi-architecture runs use one subdirectory per
// architecture with the shared stats and manifest at the root.
inline void run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    const std::map<std::string, TaskDataset> tasks = load_task_directory(cfg.data_dir);
    std::vector<std::string> task_ids;
    for (const auto& [id, ds] : tasks) task_ids.push_back(id);

    const AlignedSplitPlan plan = make_aligned_splits(tasks.begin()->second.subjects, cfg.folds, cfg.seed);
    std::filesystem::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir / "split_plan.json", plan.to_json().dump(2) + "\n");

    const std::vector<ArchKind> archs = detail::canonical_archs(cfg.archs);
    const bool flat = archs.size() == 1;

    std::map<std::string, TransferMatrix> matrices;
    for (ArchKind kind : archs) {
        const std::string name = arch_kind_name(kind);
        const std::filesystem::path arch_dir = flat ? cfg.out_dir : cfg.out_dir / name;

        ArchitectureSpec proto;
        proto.kind = kind;
        GridOptions opts;
        opts.train = default_train_config(kind);
        opts.train.max_epochs = cfg.max_epochs;
        opts.train.patience = std::min(cfg.patience, cfg.max_epochs);
        opts.train.batch_size = cfg.batch_size;
        opts.seed = cfg.seed;
        opts.jobs = cfg.jobs;
        opts.cell_dir = arch_dir / "cells";
        opts.progress = cfg.progress;

        if (cfg.progress) std::fprintf(stderr, "[pipeline] architecture %s\n", name.c_str());
        GridResult grid = run_transfer_grid(tasks, plan, proto, opts);
        detail::write_grid_artifacts(grid.matrix, arch_dir, cfg.threshold);
        matrices.emplace(name, std::move(grid.matrix));
    }

    const json stats = build_stats(matrices, cfg.stats_unit, cfg.permutations, cfg.seed);
    write_text_file(cfg.out_dir / "stats.json", stats.dump(2) + "\n");
    write_text_file(cfg.out_dir / "manifest.json", pipeline_manifest(cfg, task_ids).dump(2) + "\n");
}

}  // namespace transfergrid
