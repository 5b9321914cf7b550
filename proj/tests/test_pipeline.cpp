#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "transfergrid/pipeline.hpp"

using namespace transfergrid;
using namespace tgtest;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "tg_pipeline_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_cohort(const fs::path& dir, const CohortSpec& spec, size_t trials, uint64_t seed) {
    for (const auto& [id, ds] : generate_cohort(spec, trials, seed)) write_dataset(ds, dir / id);
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TransferMatrix one_task_matrix(const std::string& arch, const std::string& task, std::vector<double> folds,
                               std::vector<std::map<std::string, double>> subjects) {
    TransferMatrix m;
    m.arch = arch;
    m.tasks = {task};
    m.chance = {0.5};
    m.k = folds.size();
    TransferCell cl;
    cl.source = cl.target = task;
    cl.fold_acc = std::move(folds);
    cl.fold_subject_acc = std::move(subjects);
    m.cells = {cl};
    return m;
}

const std::vector<std::string> kGridArtifacts = {"matrix.json", "matrix.csv", "scores.csv",
                                                 "graph.dot", "dendrogram.json"};

}  // namespace

TEST_CASE("pipeline writes every artifact, reruns identically, and resumes") {
    const fs::path data = fresh_dir("data_single");
    write_cohort(data, easy_cohort(4, 64, 4, 64.0, 10.0), 10, 21);

    PipelineConfig cfg;
    cfg.data_dir = data;
    cfg.archs = {ArchKind::eegnet};
    cfg.folds = 2;
    cfg.seed = 5;
    cfg.permutations = 200;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    cfg.batch_size = 32;
    cfg.progress = false;

    std::vector<std::string> artifacts = kGridArtifacts;
    artifacts.insert(artifacts.end(), {"split_plan.json", "stats.json", "manifest.json"});

    const fs::path out1 = fresh_dir("out_single_a");
    cfg.out_dir = out1;
    run_pipeline(cfg);
    for (const auto& a : artifacts) {
        INFO(a);
        CHECK(fs::exists(out1 / a));  // single architecture: flat layout
    }
    size_t cell_files = 0;
    REQUIRE(fs::is_directory(out1 / "cells"));
    for (const auto& e : fs::directory_iterator(out1 / "cells"))
        if (e.is_regular_file()) ++cell_files;
    CHECK(cell_files == 8);  // 2 folds x 2 sources x 2 targets

    const json stats = json::parse(slurp(out1 / "stats.json"));
    CHECK(stats.at("architectures") == json::array({"eegnet"}));
    CHECK(stats.at("pairs").empty());
    CHECK(stats.at("descriptives").at("eegnet").at("alpha").at("chance").get<double>() == 0.5);

    const fs::path out2 = fresh_dir("out_single_b");
    cfg.out_dir = out2;
    run_pipeline(cfg);
    for (const auto& a : artifacts) {
        INFO(a);
        CHECK(slurp(out1 / a) == slurp(out2 / a));
    }

    // Rerun in place: all cells resume from disk, bytes unchanged.
    cfg.out_dir = out1;
    run_pipeline(cfg);
    for (const auto& a : artifacts) {
        INFO(a);
        CHECK(slurp(out1 / a) == slurp(out2 / a));
    }
}

TEST_CASE("pipeline multi-architecture layout and stats") {
    const fs::path data = fresh_dir("data_multi");
    // Enough data and epochs that every architecture clears chance on its
    // diagonal; an all-undefined score matrix has no dendrogram and the run
    // would rightly fail.
    write_cohort(data, easy_cohort(6, 64, 4, 64.0, 20.0), 20, 22);

    PipelineConfig cfg;
    cfg.data_dir = data;
    cfg.out_dir = fresh_dir("out_multi");
    cfg.archs = {ArchKind::inception, ArchKind::eegnet};  // deliberately unsorted
    cfg.folds = 2;
    cfg.seed = 9;
    cfg.permutations = 200;
    cfg.max_epochs = 60;
    cfg.patience = 60;
    cfg.batch_size = 8;
    cfg.progress = false;
    run_pipeline(cfg);

    for (const std::string arch : {"eegnet", "inception"}) {
        for (const auto& a : kGridArtifacts) {
            INFO(arch << "/" << a);
            CHECK(fs::exists(cfg.out_dir / arch / a));
        }
        CHECK(fs::is_directory(cfg.out_dir / arch / "cells"));
    }
    CHECK(fs::exists(cfg.out_dir / "split_plan.json"));
    CHECK(fs::exists(cfg.out_dir / "stats.json"));
    CHECK(fs::exists(cfg.out_dir / "manifest.json"));
    CHECK_FALSE(fs::exists(cfg.out_dir / "matrix.json"));  // grids live per arch

    const json stats = json::parse(slurp(cfg.out_dir / "stats.json"));
    CHECK(stats.at("unit") == "subject");
    REQUIRE(stats.at("pairs").size() == 1);
    const json& pair = stats.at("pairs")[0];
    CHECK(pair.at("pair") == json::array({"eegnet", "inception"}));
    REQUIRE(pair.at("per_paradigm").size() == 2);
    for (const auto& e : pair.at("per_paradigm")) CHECK(e.at("n").get<size_t>() == 6);  // each subject tests once
    const double combined = pair.at("combined_p").get<double>();
    CHECK(combined > 0.0);
    CHECK(combined <= 1.0);
    CHECK(pair.at("adjusted_p").get<double>() == combined);  // one pair: Bonferroni is identity

    const json manifest = json::parse(slurp(cfg.out_dir / "manifest.json"));
    CHECK(manifest.at("architectures") == json::array({"eegnet", "inception"}));
    CHECK(manifest.at("tasks") == json::array({"alpha", "beta"}));
    CHECK(manifest.at("folds").get<size_t>() == 2);
    CHECK(manifest.at("seed").get<uint64_t>() == 9);
    std::set<std::string> keys;
    for (const auto& [k, v] : manifest.items()) keys.insert(k);
    const std::set<std::string> expected = {"format_version", "data",         "tasks", "architectures",
                                            "folds",          "seed",         "jobs",  "threshold",
                                            "permutations",   "stats_unit",   "train"};
    CHECK(keys == expected);  // reproducible: no wall-clock or host facts
}

TEST_CASE("stats battery on hand-built matrices") {
    SECTION("fold pairing with a constant shift") {
        std::map<std::string, TransferMatrix> ms;
        // Dyadic accuracies: every difference is exactly 0.25, so the spread
        // is exactly zero and the effect size is undefined.
        ms.emplace("x", one_task_matrix("x", "a", {0.75, 0.8125, 0.875}, {{}, {}, {}}));
        ms.emplace("y", one_task_matrix("y", "a", {0.50, 0.5625, 0.625}, {{}, {}, {}}));
        const json stats = build_stats(ms, "fold", 100, 7);
        REQUIRE(stats.at("pairs").size() == 1);
        const json& pair = stats.at("pairs")[0];
        const json& pp = pair.at("per_paradigm")[0];
        CHECK(pp.at("n").get<size_t>() == 3);
        CHECK(pp.at("p").get<double>() == 0.25);  // exhaustive over 2^3 sign flips
        CHECK(pp.at("smd").is_null());            // constant differences have no spread
        CHECK(pair.at("combined_p").get<double>() == Catch::Approx(0.25).margin(1e-9));
        CHECK(pair.at("adjusted_p").get<double>() == pair.at("combined_p").get<double>());
    }
    SECTION("identical accuracies are degenerate") {
        std::map<std::string, TransferMatrix> ms;
        ms.emplace("x", one_task_matrix("x", "a", {0.6, 0.7}, {{}, {}}));
        ms.emplace("y", one_task_matrix("y", "a", {0.6, 0.7}, {{}, {}}));
        const json stats = build_stats(ms, "fold", 100, 7);
        const json& pp = stats.at("pairs")[0].at("per_paradigm")[0];
        CHECK(pp.at("degenerate").get<bool>());
        CHECK(pp.at("p").get<double>() == 1.0);
        CHECK(pp.at("smd").is_null());
    }
    SECTION("subject pairing requires matching rosters") {
        std::map<std::string, TransferMatrix> ms;
        ms.emplace("x", one_task_matrix("x", "a", {0.6}, {{{"s1", 0.6}, {"s2", 0.7}}}));
        ms.emplace("y", one_task_matrix("y", "a", {0.6}, {{{"s1", 0.6}, {"s3", 0.7}}}));
        CHECK_THROWS_AS(build_stats(ms, "subject", 100, 7), DataError);
    }
    SECTION("mismatched task sets are rejected") {
        std::map<std::string, TransferMatrix> ms;
        ms.emplace("x", one_task_matrix("x", "a", {0.6}, {{}}));
        ms.emplace("y", one_task_matrix("y", "b", {0.6}, {{}}));
        CHECK_THROWS_AS(build_stats(ms, "fold", 100, 7), DataError);
    }
}

TEST_CASE("pipeline configuration and data directory validation") {
    PipelineConfig cfg;
    cfg.data_dir = fresh_dir("data_val");  // exists but empty
    cfg.out_dir = fresh_dir("out_val");
    CHECK_THROWS_AS(run_pipeline(cfg), UsageError);  // no architectures

    cfg.archs = {ArchKind::eegnet};
    cfg.stats_unit = "trial";
    CHECK_THROWS_AS(run_pipeline(cfg), UsageError);

    cfg.stats_unit = "subject";
    CHECK_THROWS_AS(run_pipeline(cfg), DataError);  // no datasets inside

    cfg.data_dir = "/nonexistent/tg_data";
    CHECK_THROWS_AS(run_pipeline(cfg), DataError);

    cfg.out_dir = "";
    CHECK_THROWS_AS(run_pipeline(cfg), UsageError);
}

TEST_CASE("task directory loading") {
    const auto cohort = generate_cohort(easy_cohort(2, 32, 3, 64.0, 20.0), 3, 31);

    SECTION("duplicate task ids are rejected") {
        const fs::path dir = fresh_dir("data_dup");
        write_dataset(cohort.at("alpha"), dir / "one");
        write_dataset(cohort.at("alpha"), dir / "two");
        CHECK_THROWS_AS(load_task_directory(dir), DataError);
    }
    SECTION("subdirectories without a manifest are skipped") {
        const fs::path dir = fresh_dir("data_mixed");
        write_dataset(cohort.at("alpha"), dir / "alpha");
        fs::create_directories(dir / "scratch");
        const auto tasks = load_task_directory(dir);
        CHECK(tasks.size() == 1);
        CHECK(tasks.count("alpha") == 1);
    }
}
