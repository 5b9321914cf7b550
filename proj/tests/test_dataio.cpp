#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "transfergrid/dataio.hpp"
#include "transfergrid/rng.hpp"

using namespace transfergrid;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("transfergrid_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TaskDataset small_dataset(size_t m = 8, size_t c = 3, size_t n_subjects = 2, size_t reps = 2) {
    TaskDataset ds;
    ds.task_id = "demo";
    ds.label_space = {"left", "right"};
    ds.sampling_rate = 100;
    ds.m = m;
    ds.c = c;
    ds.window_start_ms = 0;
    ds.window_end_ms = 1000.0 * static_cast<double>(m) / ds.sampling_rate;
    Rng rng(99);
    for (size_t s = 0; s < n_subjects; ++s) {
        ds.subjects.push_back("s" + std::to_string(s));
        for (size_t k = 0; k < 2; ++k)
            for (size_t r = 0; r < reps; ++r) {
                TrialRecording t;
                t.subject = ds.subjects.back();
                t.label = k;
                t.samples.resize(m * c);
                for (auto& v : t.samples) v = static_cast<float>(rng.uniform(-1, 1));
                ds.trials.push_back(std::move(t));
            }
    }
    return ds;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("dataset round-trip is the identity") {
    const fs::path dir = temp_dir("roundtrip");
    TaskDataset ds = small_dataset();
    write_dataset(ds, dir);
    TaskDataset back = load_dataset(dir);
    CHECK(back.task_id == ds.task_id);
    CHECK(back.label_space == ds.label_space);
    CHECK(back.sampling_rate == ds.sampling_rate);
    CHECK(back.m == ds.m);
    CHECK(back.c == ds.c);
    REQUIRE(back.trials.size() == ds.trials.size());
    for (size_t i = 0; i < ds.trials.size(); ++i) {
        CHECK(back.trials[i].subject == ds.trials[i].subject);
        CHECK(back.trials[i].label == ds.trials[i].label);
        CHECK(back.trials[i].samples == ds.trials[i].samples);  // bit-exact
    }
    fs::remove_all(dir);
}

TEST_CASE("writing the same dataset twice produces identical bytes") {
    const fs::path d1 = temp_dir("det1"), d2 = temp_dir("det2");
    TaskDataset ds = small_dataset();
    write_dataset(ds, d1);
    write_dataset(ds, d2);
    CHECK(file_bytes(d1 / "manifest.json") == file_bytes(d2 / "manifest.json"));
    CHECK(file_bytes(d1 / "trials.f32") == file_bytes(d2 / "trials.f32"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("payload size is 4 bytes per sample") {
    const fs::path dir = temp_dir("payload");
    TaskDataset ds;
    ds.task_id = "fmt";
    ds.label_space = {"a", "b"};
    ds.sampling_rate = 250;
    ds.m = 250;
    ds.c = 33;
    ds.subjects = {"s0"};
    for (size_t k = 0; k < 2; ++k) {
        TrialRecording t;
        t.subject = "s0";
        t.label = k;
        t.samples.assign(250 * 33, 0.25f);
        ds.trials.push_back(std::move(t));
    }
    write_dataset(ds, dir);
    CHECK(fs::file_size(dir / "trials.f32") == 2u * 4u * 250u * 33u);  // 66000
    fs::remove_all(dir);
}

TEST_CASE("empty dataset round-trips") {
    const fs::path dir = temp_dir("empty");
    TaskDataset ds;
    ds.task_id = "none";
    ds.label_space = {"a", "b"};
    ds.sampling_rate = 100;
    ds.m = 4;
    ds.c = 2;
    write_dataset(ds, dir);
    TaskDataset back = load_dataset(dir);
    CHECK(back.trials.empty());
    CHECK(back.label_space == ds.label_space);
    fs::remove_all(dir);
}

TEST_CASE("corrupt inputs are rejected") {
    const fs::path dir = temp_dir("corrupt");
    TaskDataset ds = small_dataset();
    write_dataset(ds, dir);

    SECTION("truncated payload") {
        const std::string payload = file_bytes(dir / "trials.f32");
        std::ofstream out(dir / "trials.f32", std::ios::binary | std::ios::trunc);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size() - 4));
        out.close();
        CHECK_THROWS_AS(load_dataset(dir), DataError);
    }
    SECTION("missing manifest") {
        fs::remove(dir / "manifest.json");
        CHECK_THROWS_AS(load_dataset(dir), DataError);
    }
    SECTION("version mismatch") {
        json manifest;
        {
            std::ifstream in(dir / "manifest.json");
            in >> manifest;
        }
        manifest["format_version"] = 999;
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        out << manifest.dump(2);
        out.close();
        CHECK_THROWS_AS(load_dataset(dir), DataError);
    }
    SECTION("label out of range") {
        json manifest;
        {
            std::ifstream in(dir / "manifest.json");
            in >> manifest;
        }
        manifest["trials"][0]["label"] = 7;
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        out << manifest.dump(2);
        out.close();
        CHECK_THROWS_AS(load_dataset(dir), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("invalid datasets are rejected before writing") {
    const fs::path dir = temp_dir("invalid");
    TaskDataset ds = small_dataset();
    SECTION("non-finite sample") {
        ds.trials[0].samples[0] = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(write_dataset(ds, dir), DataError);
    }
    SECTION("one class") {
        ds.label_space = {"only"};
        for (auto& t : ds.trials) t.label = 0;
        CHECK_THROWS_AS(write_dataset(ds, dir), DataError);
    }
    SECTION("four classes") {
        ds.label_space = {"a", "b", "c", "d"};
        CHECK_THROWS_AS(write_dataset(ds, dir), DataError);
    }
    SECTION("subject missing a class entirely") {
        // Drop every class-1 trial of subject s1: dataset-level coverage broken.
        std::vector<TrialRecording> kept;
        for (auto& t : ds.trials)
            if (!(t.subject == "s1" && t.label == 1)) kept.push_back(t);
        ds.trials = kept;
        CHECK_THROWS_AS(write_dataset(ds, dir), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("chance level is the reciprocal class count") {
    CHECK(chance_level({"a", "b"}) == 0.5);
    CHECK(chance_level({"a", "b", "c"}) == Catch::Approx(1.0 / 3));
    CHECK_THROWS_AS(chance_level({}), DataError);
}

TEST_CASE("aligned splits: 40 subjects in 5 folds give 8 test subjects each") {
    std::vector<std::string> subjects;
    for (int i = 0; i < 40; ++i) subjects.push_back("s" + std::to_string(i));
    const AlignedSplitPlan plan = make_aligned_splits(subjects, 5, 7);
    REQUIRE(plan.folds.size() == 5);
    for (const auto& f : plan.folds) {
        CHECK(f.test_subjects.size() == 8);
        CHECK(f.val_subjects.size() == 10);  // round(0.24 * 40)
        CHECK(f.train_subjects.size() == 22);
    }
}

TEST_CASE("aligned splits: 95 subjects in 5 folds give 19 test subjects each") {
    std::vector<std::string> subjects;
    for (int i = 0; i < 95; ++i) subjects.push_back("s" + std::to_string(i));
    const AlignedSplitPlan plan = make_aligned_splits(subjects, 5, 3);
    for (const auto& f : plan.folds) CHECK(f.test_subjects.size() == 19);
}

TEST_CASE("aligned splits partition subjects with 56/24/20 proportions") {
    Rng rng(1234);
    for (int rep = 0; rep < 20; ++rep) {
        const size_t n = 15 + rng.bounded(50);
        const size_t k = 3 + rng.bounded(3);
        std::vector<std::string> subjects;
        for (size_t i = 0; i < n; ++i) subjects.push_back("p" + std::to_string(i));
        const AlignedSplitPlan plan = make_aligned_splits(subjects, k, rep);
        REQUIRE(plan.folds.size() == k);

        std::set<std::string> all_test;
        for (const auto& f : plan.folds) {
            std::set<std::string> train(f.train_subjects.begin(), f.train_subjects.end());
            std::set<std::string> val(f.val_subjects.begin(), f.val_subjects.end());
            std::set<std::string> test(f.test_subjects.begin(), f.test_subjects.end());
            CHECK(train.size() + val.size() + test.size() == n);
            for (const auto& s : val) CHECK(train.count(s) == 0);
            for (const auto& s : test) {
                CHECK(train.count(s) == 0);
                CHECK(val.count(s) == 0);
                CHECK(all_test.count(s) == 0);  // test sets disjoint across folds
                all_test.insert(s);
            }
            const double nd = static_cast<double>(n);
            CHECK(val.size() == static_cast<size_t>(std::lround(0.24 * nd)));
            CHECK(std::abs(static_cast<double>(test.size()) - nd / static_cast<double>(k)) < 1.0);
            CHECK(train.size() == n - val.size() - test.size());
        }
        CHECK(all_test.size() == n);  // union of test sets covers everyone
    }
}

TEST_CASE("aligned splits are deterministic per seed") {
    std::vector<std::string> subjects;
    for (int i = 0; i < 23; ++i) subjects.push_back("s" + std::to_string(i));
    const AlignedSplitPlan a = make_aligned_splits(subjects, 4, 11);
    const AlignedSplitPlan b = make_aligned_splits(subjects, 4, 11);
    const AlignedSplitPlan c = make_aligned_splits(subjects, 4, 12);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.to_json() != c.to_json());
    const AlignedSplitPlan back = AlignedSplitPlan::from_json(a.to_json());
    CHECK(back.to_json() == a.to_json());
}

TEST_CASE("aligned splits reject degenerate requests") {
    std::vector<std::string> three = {"a", "b", "c"};
    CHECK_THROWS_AS(make_aligned_splits(three, 1, 0), UsageError);
    CHECK_THROWS_AS(make_aligned_splits(three, 4, 0), UsageError);
}
