#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "transfergrid/checkpoint.hpp"
#include "transfergrid/pipeline.hpp"

namespace tg = transfergrid;
namespace fs = std::filesystem;

namespace {

tg::json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw tg::DataError("cannot open " + path.string());
    tg::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw tg::DataError("bad JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

// Shared per-cell conventions with run_transfer_grid so standalone train and
// probe runs reproduce grid cells exactly.
uint64_t cell_seed(uint64_t master, size_t fold, const std::string& src, const std::string& tgt) {
    return tg::derive_seed(master, "cell", fold, src, tgt);
}

struct CommonTrainFlags {
    size_t max_epochs = 200;
    size_t patience = 50;
    size_t batch_size = 64;

    void attach(CLI::App* cmd) {
        cmd->add_option("--max-epochs", max_epochs, "epoch cap (default 200)");
        cmd->add_option("--patience", patience, "early-stopping patience (default 50)");
        cmd->add_option("--batch-size", batch_size, "minibatch size (default 64)");
    }
    void apply(tg::TrainConfig& cfg) const {
        cfg.max_epochs = max_epochs;
        cfg.patience = std::min(patience, max_epochs);
        cfg.batch_size = batch_size;
    }
};

void print_report(const fs::path& run_dir) {
    const fs::path stats_path = run_dir / "stats.json";
    if (!fs::exists(stats_path)) throw tg::DataError("no stats.json under " + run_dir.string());
    const tg::json stats = read_json_file(stats_path);

    std::printf("architectures:");
    for (const auto& a : stats.at("architectures")) std::printf(" %s", a.get<std::string>().c_str());
    std::printf("\nunit: %s\n\n", stats.at("unit").get<std::string>().c_str());

    std::printf("decoding performance (diagonal, mean over folds):\n");
    for (auto it = stats.at("descriptives").begin(); it != stats.at("descriptives").end(); ++it) {
        std::printf("  %s:\n", it.key().c_str());
        for (auto t = it.value().begin(); t != it.value().end(); ++t)
            std::printf("    %-16s %.3f \u00b1 %.3f (chance %.3f)\n", t.key().c_str(),
                        t.value().at("mean").get<double>(), t.value().at("std").get<double>(),
                        t.value().at("chance").get<double>());
    }
    if (!stats.at("pairs").empty()) {
        std::printf("\nmodel-pair significance (Stouffer-combined, Bonferroni-adjusted):\n");
        for (const auto& pair : stats.at("pairs")) {
            std::printf("  %s vs %s: combined p=%.4g adjusted p=%.4g", pair.at("pair").at(0).get<std::string>().c_str(),
                        pair.at("pair").at(1).get<std::string>().c_str(), pair.at("combined_p").get<double>(),
                        pair.at("adjusted_p").get<double>());
            if (!pair.at("smd").is_null()) std::printf(" smd=%.3f", pair.at("smd").get<double>());
            std::printf("\n");
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"task-transferability benchmarking for compact EEG decoders"};
    app.require_subcommand(1);
    std::function<void()> action;

    // synth
    {
        auto* cmd = app.add_subcommand("synth", "generate a synthetic multi-task cohort");
        auto spec_path = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto trials = std::make_shared<size_t>(30);
        auto seed = std::make_shared<uint64_t>(0);
        cmd->add_option("--spec", *spec_path, "cohort spec JSON")->required();
        cmd->add_option("--out", *out_dir, "output directory")->required();
        cmd->add_option("--trials", *trials, "trials per class per subject (default 30)");
        cmd->add_option("--seed", *seed, "generation seed (default 0)");
        cmd->callback([=, &action]() {
            action = [=]() {
                const tg::CohortSpec spec = tg::cohort_spec_from_json(read_json_file(*spec_path));
                const auto tasks = tg::generate_cohort(spec, *trials, *seed);
                fs::create_directories(*out_dir);
                tg::write_text_file(fs::path(*out_dir) / "cohort.json",
                                    tg::cohort_spec_to_json(spec).dump(2) + "\n");
                for (const auto& [id, ds] : tasks) {
                    tg::write_dataset(ds, fs::path(*out_dir) / id);
                    std::fprintf(stderr, "[synth] task %s: %zu trials, %zu subjects\n", id.c_str(),
                                 ds.trials.size(), ds.subjects.size());
                }
            };
        });
    }

    // split
    {
        auto* cmd = app.add_subcommand("split", "emit the subject-aligned fold plan");
        auto data_dir = std::make_shared<std::string>();
        auto folds = std::make_shared<size_t>(5);
        auto seed = std::make_shared<uint64_t>(0);
        auto out_path = std::make_shared<std::string>();
        cmd->add_option("--data", *data_dir, "task dataset directory")->required();
        cmd->add_option("--folds", *folds, "fold count (default 5)");
        cmd->add_option("--seed", *seed, "split seed (default 0)");
        cmd->add_option("--out", *out_path, "output file (default stdout)");
        cmd->callback([=, &action]() {
            action = [=]() {
                const auto tasks = tg::load_task_directory(*data_dir);
                const auto plan = tg::make_aligned_splits(tasks.begin()->second.subjects, *folds, *seed);
                const std::string doc = plan.to_json().dump(2) + "\n";
                if (out_path->empty())
                    std::fputs(doc.c_str(), stdout);
                else
                    tg::write_text_file(*out_path, doc);
            };
        });
    }

    // train
    {
        auto* cmd = app.add_subcommand("train", "train one source model for one fold");
        auto data_dir = std::make_shared<std::string>();
        auto task_id = std::make_shared<std::string>();
        auto arch = std::make_shared<std::string>("shallow");
        auto folds = std::make_shared<size_t>(5);
        auto fold = std::make_shared<size_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        auto out_dir = std::make_shared<std::string>();
        auto flags = std::make_shared<CommonTrainFlags>();
        cmd->add_option("--data", *data_dir, "task dataset directory")->required();
        cmd->add_option("--task", *task_id, "task id to train on")->required();
        cmd->add_option("--arch", *arch, "shallow|eegnet|inception");
        cmd->add_option("--folds", *folds, "fold count (default 5)");
        cmd->add_option("--fold", *fold, "fold index (default 0)");
        cmd->add_option("--seed", *seed, "master seed (default 0)");
        cmd->add_option("--out", *out_dir, "checkpoint/report directory")->required();
        flags->attach(cmd);
        cmd->callback([=, &action]() {
            action = [=]() {
                const auto tasks = tg::load_task_directory(*data_dir);
                const tg::TaskDataset& ds = tasks.count(*task_id) ? tasks.at(*task_id)
                                                                  : throw tg::DataError("unknown task " + *task_id);
                const auto plan = tg::make_aligned_splits(ds.subjects, *folds, *seed);
                if (*fold >= plan.folds.size()) throw tg::UsageError("fold index out of range");
                tg::ArchitectureSpec spec;
                spec.kind = tg::arch_kind_from_name(*arch);
                spec.m = ds.m;
                spec.c = ds.c;
                spec.sampling_rate = ds.sampling_rate;
                spec.n_classes = ds.n_classes();
                const uint64_t s = cell_seed(*seed, *fold, *task_id, *task_id);
                tg::TrainConfig cfg = tg::default_train_config(spec.kind);
                flags->apply(cfg);
                cfg.seed = s;
                auto train = tg::make_array_set(ds, plan.folds[*fold].train_subjects);
                auto val = tg::make_array_set(ds, plan.folds[*fold].val_subjects);
                auto test = tg::make_array_set(ds, plan.folds[*fold].test_subjects);
                auto model = tg::build_model<float>(spec, s);
                const tg::TrainReport report = tg::fit(model, train, val, cfg);
                const tg::EvalReport eval = tg::evaluate(model, test, cfg.batch_size);
                tg::save_checkpoint(model, *out_dir, s, cfg);
                tg::write_text_file(fs::path(*out_dir) / "train_report.json", report.to_json().dump(2) + "\n");
                tg::write_text_file(fs::path(*out_dir) / "eval.json", eval.to_json().dump(2) + "\n");
                std::fprintf(stderr, "[train] %s fold %zu: test balanced accuracy %.4f\n", task_id->c_str(), *fold,
                             eval.balanced_acc);
            };
        });
    }

    // probe
    {
        auto* cmd = app.add_subcommand("probe", "linear-probe one source->target cell");
        auto data_dir = std::make_shared<std::string>();
        auto source = std::make_shared<std::string>();
        auto target = std::make_shared<std::string>();
        auto model_dir = std::make_shared<std::string>();
        auto arch = std::make_shared<std::string>("shallow");
        auto folds = std::make_shared<size_t>(5);
        auto fold = std::make_shared<size_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        auto out_dir = std::make_shared<std::string>();
        auto flags = std::make_shared<CommonTrainFlags>();
        cmd->add_option("--data", *data_dir, "task dataset directory")->required();
        cmd->add_option("--source", *source, "source task id")->required();
        cmd->add_option("--target", *target, "target task id")->required();
        cmd->add_option("--model", *model_dir, "existing source checkpoint (skips pre-training)");
        cmd->add_option("--arch", *arch, "shallow|eegnet|inception");
        cmd->add_option("--folds", *folds, "fold count (default 5)");
        cmd->add_option("--fold", *fold, "fold index (default 0)");
        cmd->add_option("--seed", *seed, "master seed (default 0)");
        cmd->add_option("--out", *out_dir, "report directory")->required();
        flags->attach(cmd);
        cmd->callback([=, &action]() {
            action = [=]() {
                const auto tasks = tg::load_task_directory(*data_dir);
                if (!tasks.count(*source)) throw tg::DataError("unknown source task " + *source);
                if (!tasks.count(*target)) throw tg::DataError("unknown target task " + *target);
                const tg::TaskDataset& src_ds = tasks.at(*source);
                const tg::TaskDataset& tgt_ds = tasks.at(*target);
                const auto plan = tg::make_aligned_splits(src_ds.subjects, *folds, *seed);
                if (*fold >= plan.folds.size()) throw tg::UsageError("fold index out of range");
                const tg::FoldSplit& fs_fold = plan.folds[*fold];

                tg::TrainConfig cfg = tg::default_train_config(tg::arch_kind_from_name(*arch));
                flags->apply(cfg);

                tg::Model<float> model = [&]() {
                    if (!model_dir->empty()) return tg::load_checkpoint(*model_dir);
                    tg::ArchitectureSpec spec;
                    spec.kind = tg::arch_kind_from_name(*arch);
                    spec.m = src_ds.m;
                    spec.c = src_ds.c;
                    spec.sampling_rate = src_ds.sampling_rate;
                    spec.n_classes = src_ds.n_classes();
                    const uint64_t s = cell_seed(*seed, *fold, *source, *source);
                    tg::TrainConfig pre_cfg = cfg;
                    pre_cfg.seed = s;
                    auto train = tg::make_array_set(src_ds, fs_fold.train_subjects);
                    auto val = tg::make_array_set(src_ds, fs_fold.val_subjects);
                    auto m = tg::build_model<float>(spec, s);
                    tg::fit(m, train, val, pre_cfg);
                    return m;
                }();

                tg::TrainConfig probe_cfg = cfg;
                probe_cfg.seed = cell_seed(*seed, *fold, *source, *target);
                auto t_train = tg::make_array_set(tgt_ds, fs_fold.train_subjects);
                auto t_val = tg::make_array_set(tgt_ds, fs_fold.val_subjects);
                auto t_test = tg::make_array_set(tgt_ds, fs_fold.test_subjects);
                tg::ProbeOutcome probe = tg::linear_probe(model, t_train, t_val, probe_cfg);
                tg::ProbedModel probed{&model, probe.head.get()};
                const tg::EvalReport eval = tg::evaluate(probed, t_test, cfg.batch_size);

                tg::json report;
                report["source"] = *source;
                report["target"] = *target;
                report["fold"] = *fold;
                report["rep_hash_before"] = probe.rep_hash_before;
                report["rep_hash_after"] = probe.rep_hash_after;
                report["probe_training"] = probe.report.to_json();
                report["eval"] = eval.to_json();
                fs::create_directories(*out_dir);
                tg::write_text_file(fs::path(*out_dir) / "probe_report.json", report.dump(2) + "\n");
                std::fprintf(stderr, "[probe] %s -> %s fold %zu: balanced accuracy %.4f\n", source->c_str(),
                             target->c_str(), *fold, eval.balanced_acc);
            };
        });
    }

    // grid / run
    auto add_pipeline_cmd = [&](const char* name, const char* desc, bool multi_arch) {
        auto* cmd = app.add_subcommand(name, desc);
        auto data_dir = std::make_shared<std::string>();
        auto archs = std::make_shared<std::vector<std::string>>();
        auto folds = std::make_shared<size_t>(5);
        auto seed = std::make_shared<uint64_t>(0);
        auto jobs = std::make_shared<size_t>(1);
        auto out_dir = std::make_shared<std::string>();
        auto threshold = std::make_shared<double>(0.05);
        auto permutations = std::make_shared<size_t>(10000);
        auto stats_unit = std::make_shared<std::string>("subject");
        auto flags = std::make_shared<CommonTrainFlags>();
        cmd->add_option("--data", *data_dir, "task dataset directory")->required();
        auto* arch_opt = cmd->add_option("--arch", *archs, "shallow|eegnet|inception");
        if (multi_arch)
            arch_opt->required();
        else
            arch_opt->expected(1);
        cmd->add_option("--folds", *folds, "fold count (default 5)");
        cmd->add_option("--seed", *seed, "master seed (default 0)");
        cmd->add_option("--jobs", *jobs, "parallel (fold, source) workers (default 1)");
        cmd->add_option("--out", *out_dir, "run output directory")->required();
        cmd->add_option("--threshold", *threshold, "graph edge threshold on rescaled scores (default 0.05)");
        cmd->add_option("--permutations", *permutations, "Monte Carlo permutations (default 10000)");
        cmd->add_option("--stats-unit", *stats_unit, "pairing unit: subject|fold (default subject)");
        flags->attach(cmd);
        cmd->callback([=, &action]() {
            action = [=]() {
                tg::PipelineConfig cfg;
                cfg.data_dir = *data_dir;
                cfg.out_dir = *out_dir;
                if (archs->empty()) cfg.archs.push_back(tg::ArchKind::shallow);
                for (const auto& a : *archs) cfg.archs.push_back(tg::arch_kind_from_name(a));
                cfg.folds = *folds;
                cfg.seed = *seed;
                cfg.jobs = *jobs;
                cfg.threshold = *threshold;
                cfg.permutations = *permutations;
                cfg.stats_unit = *stats_unit;
                cfg.max_epochs = flags->max_epochs;
                cfg.patience = flags->patience;
                cfg.batch_size = flags->batch_size;
                tg::run_pipeline(cfg);
            };
        });
    };
    add_pipeline_cmd("grid", "full transfer grid for one architecture", false);
    add_pipeline_cmd("run", "transfer grids plus cross-architecture statistics", true);

    // analyze
    {
        auto* cmd = app.add_subcommand("analyze", "recompute analysis artifacts from a matrix.json");
        auto matrix_path = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto threshold = std::make_shared<double>(0.05);
        auto permutations = std::make_shared<size_t>(10000);
        auto stats_unit = std::make_shared<std::string>("subject");
        auto seed = std::make_shared<uint64_t>(0);
        cmd->add_option("--matrix", *matrix_path, "matrix.json from a grid run")->required();
        cmd->add_option("--out", *out_dir, "output directory")->required();
        cmd->add_option("--threshold", *threshold, "graph edge threshold (default 0.05)");
        cmd->add_option("--permutations", *permutations, "Monte Carlo permutations (default 10000)");
        cmd->add_option("--stats-unit", *stats_unit, "pairing unit: subject|fold (default subject)");
        cmd->add_option("--seed", *seed, "seed for Monte Carlo permutations (default 0)");
        cmd->callback([=, &action]() {
            action = [=]() {
                const tg::TransferMatrix matrix = tg::TransferMatrix::from_json(read_json_file(*matrix_path));
                tg::detail::write_grid_artifacts(matrix, *out_dir, *threshold);
                std::map<std::string, tg::TransferMatrix> matrices;
                matrices.emplace(matrix.arch, matrix);
                const tg::json stats = tg::build_stats(matrices, *stats_unit, *permutations, *seed);
                tg::write_text_file(fs::path(*out_dir) / "stats.json", stats.dump(2) + "\n");
            };
        });
    }

    // report
    {
        auto* cmd = app.add_subcommand("report", "summarize a finished run directory");
        auto run_dir = std::make_shared<std::string>();
        cmd->add_option("--run", *run_dir, "run output directory")->required();
        cmd->callback([=, &action]() {
            action = [=]() { print_report(*run_dir); };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }

    try {
        action();
    } catch (const tg::UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const tg::TrainingDivergence& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
