#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfergrid/errors.hpp"
#include "transfergrid/rng.hpp"

namespace transfergrid {

static_assert(std::endian::native == std::endian::little, "on-disk format is little-endian");

using json = nlohmann::ordered_json;

// One epoched trial. Samples are time-major: samples[t*c + ch], t in [0, m),
// ch in [0, c); (m, c) live on the owning dataset.
struct TrialRecording {
    std::string subject;
    size_t label = 0;
    std::vector<float> samples;
};

struct TaskDataset {
    std::string task_id;
    std::vector<std::string> label_space;
    double sampling_rate = 0;
    size_t m = 0;  // time steps per trial
    size_t c = 0;  // channels
    double window_start_ms = 0;
    double window_end_ms = 0;
    std::vector<std::string> subjects;  // ordered, unique
    std::vector<TrialRecording> trials;

    size_t n_classes() const { return label_space.size(); }

    void validate() const {
        if (task_id.empty()) throw DataError("dataset: empty task_id");
        if (label_space.size() < 2 || label_space.size() > 3)
            throw DataError("dataset " + task_id + ": label_space size must be 2 or 3, got " +
                            std::to_string(label_space.size()));
        if (m == 0 || c == 0) throw DataError("dataset " + task_id + ": m and c must be >= 1");
        if (sampling_rate <= 0) throw DataError("dataset " + task_id + ": sampling_rate must be positive");
        std::set<std::string> subj_set(subjects.begin(), subjects.end());
        if (subj_set.size() != subjects.size()) throw DataError("dataset " + task_id + ": duplicate subject ids");
        // (subject, class) pairs with at least one trial; full coverage is
        // required whenever the dataset is non-empty.
        std::set<std::pair<std::string, size_t>> seen;
        for (const auto& t : trials) {
            if (t.samples.size() != m * c)
                throw DataError("dataset " + task_id + ": trial sample count " + std::to_string(t.samples.size()) +
                                " != m*c = " + std::to_string(m * c));
            if (t.label >= label_space.size())
                throw DataError("dataset " + task_id + ": label " + std::to_string(t.label) + " out of range");
            if (!subj_set.count(t.subject))
                throw DataError("dataset " + task_id + ": trial subject '" + t.subject + "' not in subject list");
            for (float v : t.samples)
                if (!std::isfinite(v)) throw DataError("dataset " + task_id + ": non-finite sample value");
            seen.insert({t.subject, t.label});
        }
        if (!trials.empty()) {
            for (const auto& s : subjects)
                for (size_t k = 0; k < label_space.size(); ++k)
                    if (!seen.count({s, k}))
                        throw DataError("dataset " + task_id + ": subject '" + s + "' has no trial of class '" +
                                        label_space[k] + "'");
        }
    }
};

// Balanced-accuracy chance level under uniform guessing.
inline double chance_level(const std::vector<std::string>& label_space) {
    if (label_space.empty()) throw DataError("chance_level: empty label space");
    return 1.0 / static_cast<double>(label_space.size());
}

inline constexpr int kDatasetFormatVersion = 1;

inline void write_dataset(const TaskDataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    const size_t trial_bytes = ds.m * ds.c * 4;
    json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["task_id"] = ds.task_id;
    manifest["label_space"] = ds.label_space;
    manifest["sampling_rate"] = ds.sampling_rate;
    manifest["m"] = ds.m;
    manifest["c"] = ds.c;
    manifest["window_ms"] = {ds.window_start_ms, ds.window_end_ms};
    manifest["subjects"] = ds.subjects;
    json index = json::array();
    {
        std::ofstream payload(dir / "trials.f32", std::ios::binary | std::ios::trunc);
        if (!payload) throw DataError("cannot open " + (dir / "trials.f32").string() + " for writing");
        size_t offset = 0;
        for (const auto& t : ds.trials) {
            index.push_back({{"subject", t.subject}, {"label", t.label}, {"offset", offset}});
            payload.write(reinterpret_cast<const char*>(t.samples.data()),
                          static_cast<std::streamsize>(trial_bytes));
            offset += trial_bytes;
        }
        if (!payload) throw DataError("write failure on " + (dir / "trials.f32").string());
    }
    manifest["trials"] = std::move(index);
    std::ofstream mf(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!mf) throw DataError("cannot open " + (dir / "manifest.json").string() + " for writing");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw DataError("write failure on " + (dir / "manifest.json").string());
}

inline TaskDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path, std::ios::binary);
    if (!mf) throw DataError("cannot open " + manifest_path.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw DataError("bad manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != kDatasetFormatVersion)
        throw DataError(manifest_path.string() + ": unsupported format_version");

    TaskDataset ds;
    try {
        ds.task_id = manifest.at("task_id").get<std::string>();
        ds.label_space = manifest.at("label_space").get<std::vector<std::string>>();
        ds.sampling_rate = manifest.at("sampling_rate").get<double>();
        ds.m = manifest.at("m").get<size_t>();
        ds.c = manifest.at("c").get<size_t>();
        const auto window = manifest.at("window_ms");
        ds.window_start_ms = window.at(0).get<double>();
        ds.window_end_ms = window.at(1).get<double>();
        ds.subjects = manifest.at("subjects").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw DataError("bad manifest " + manifest_path.string() + ": " + e.what());
    }

    const auto payload_path = dir / "trials.f32";
    std::ifstream pf(payload_path, std::ios::binary | std::ios::ate);
    if (!pf) throw DataError("cannot open " + payload_path.string());
    const size_t payload_size = static_cast<size_t>(pf.tellg());
    pf.seekg(0);

    const auto& index = manifest.at("trials");
    const size_t trial_bytes = ds.m * ds.c * 4;
    if (index.size() * trial_bytes != payload_size)
        throw DataError(payload_path.string() + ": payload size " + std::to_string(payload_size) +
                        " != trial count * " + std::to_string(trial_bytes));
    std::vector<char> raw(payload_size);
    pf.read(raw.data(), static_cast<std::streamsize>(payload_size));
    if (static_cast<size_t>(pf.gcount()) != payload_size) throw DataError("short read on " + payload_path.string());

    size_t prev_offset = 0;
    bool first = true;
    ds.trials.reserve(index.size());
    for (const auto& entry : index) {
        TrialRecording t;
        t.subject = entry.at("subject").get<std::string>();
        t.label = entry.at("label").get<size_t>();
        const size_t offset = entry.at("offset").get<size_t>();
        if (!first && offset <= prev_offset)
            throw DataError(manifest_path.string() + ": trial offsets not strictly increasing");
        if (offset + trial_bytes > payload_size)
            throw DataError(manifest_path.string() + ": trial offset out of payload bounds");
        first = false;
        prev_offset = offset;
        t.samples.resize(ds.m * ds.c);
        std::memcpy(t.samples.data(), raw.data() + offset, trial_bytes);
        ds.trials.push_back(std::move(t));
    }
    ds.validate();
    return ds;
}

struct FoldSplit {
    std::vector<std::string> train_subjects;
    std::vector<std::string> val_subjects;
    std::vector<std::string> test_subjects;
};

// Subject assignment shared verbatim across all tasks of a cohort. Test sets
// partition the subject list across the K folds.
struct AlignedSplitPlan {
    std::vector<FoldSplit> folds;
    std::vector<std::string> subjects;
    uint64_t seed = 0;

    json to_json() const {
        json j;
        j["seed"] = seed;
        j["subjects"] = subjects;
        j["folds"] = json::array();
        for (const auto& f : folds)
            j["folds"].push_back({{"train", f.train_subjects}, {"val", f.val_subjects}, {"test", f.test_subjects}});
        return j;
    }

    static AlignedSplitPlan from_json(const json& j) {
        AlignedSplitPlan plan;
        plan.seed = j.at("seed").get<uint64_t>();
        plan.subjects = j.at("subjects").get<std::vector<std::string>>();
        for (const auto& f : j.at("folds")) {
            FoldSplit fs;
            fs.train_subjects = f.at("train").get<std::vector<std::string>>();
            fs.val_subjects = f.at("val").get<std::vector<std::string>>();
            fs.test_subjects = f.at("test").get<std::vector<std::string>>();
            plan.folds.push_back(std::move(fs));
        }
        return plan;
    }
};

// K-fold plan targeting 56/24/20 train/val/test proportions. Test blocks are
// consecutive runs of the shuffled subject list, floor(n/k) long with the
// remainder spread one-per-fold across the first folds; validation subjects
// are the round(0.24*n) subjects cyclically following the test block.
inline AlignedSplitPlan make_aligned_splits(const std::vector<std::string>& subjects, size_t k, uint64_t seed) {
    const size_t n = subjects.size();
    if (k < 2) throw UsageError("make_aligned_splits: k must be >= 2");
    if (n < k) throw UsageError("make_aligned_splits: need at least k subjects for non-empty test sets");

    std::vector<std::string> shuffled = subjects;
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(shuffled);

    AlignedSplitPlan plan;
    plan.subjects = subjects;
    plan.seed = seed;

    const size_t base = n / k, extra = n % k;
    const size_t val_n = static_cast<size_t>(std::lround(0.24 * static_cast<double>(n)));
    size_t start = 0;
    for (size_t f = 0; f < k; ++f) {
        const size_t test_n = base + (f < extra ? 1 : 0);
        FoldSplit fs;
        for (size_t i = 0; i < test_n; ++i) fs.test_subjects.push_back(shuffled[start + i]);
        for (size_t i = 0; i < n - test_n; ++i) {
            const std::string& s = shuffled[(start + test_n + i) % n];
            if (i < val_n)
                fs.val_subjects.push_back(s);
            else
                fs.train_subjects.push_back(s);
        }
        plan.folds.push_back(std::move(fs));
        start += test_n;
    }
    return plan;
}

}  // namespace transfergrid
