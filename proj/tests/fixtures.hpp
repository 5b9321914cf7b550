#pragma once

// Small synthetic cohorts shared across tests, sized for a single-core test
// runner. Component layouts are chosen so the planted class structure is
// decodable fast at the given SNR.

#include <algorithm>
#include <string>
#include <vector>

#include "transfergrid/dataio.hpp"
#include "transfergrid/synthgen.hpp"

namespace tgtest {

using namespace transfergrid;

inline ComponentSpec make_component(std::string id, double center_ms, double width_ms, double freq_hz, double amp,
                                    std::vector<double> pattern) {
    ComponentSpec c;
    c.id = std::move(id);
    c.center_ms = center_ms;
    c.width_ms = width_ms;
    c.frequency_hz = freq_hz;
    c.amplitude = amp;
    c.spatial_pattern = std::move(pattern);
    c.normalize_pattern();
    return c;
}

// Smoothly decaying channel profile; front and back overlap so no spatial
// filter can null one without attenuating the other.
inline std::vector<double> front_pattern(size_t c) {
    std::vector<double> p(c);
    for (size_t i = 0; i < c; ++i) p[i] = 1.0 - 0.8 * static_cast<double>(i) / static_cast<double>(c - 1);
    return p;
}
inline std::vector<double> back_pattern(size_t c) {
    auto p = front_pattern(c);
    std::reverse(p.begin(), p.end());
    return p;
}
inline std::vector<double> flat_pattern(size_t c) { return std::vector<double>(c, 1.0); }

// Two (optionally three) tasks whose classes differ in strong, well-separated
// components; easy to decode at moderate SNR. Task "gamma" is 3-class.
inline CohortSpec easy_cohort(size_t n_subjects, size_t m, size_t c, double rate, double snr_db,
                              bool with_third_task = false) {
    const double win = 1000.0 * static_cast<double>(m) / rate;
    CohortSpec spec;
    spec.n_subjects = n_subjects;
    spec.m = m;
    spec.c = c;
    spec.sampling_rate = rate;
    spec.gain_std = 0.05;
    spec.latency_jitter_ms = 0.01 * win;
    spec.components.push_back(make_component("bg", 0.50 * win, 0.20 * win, 4.0, 0.8, flat_pattern(c)));
    spec.components.push_back(make_component("ca", 0.40 * win, 0.12 * win, 9.0, 2.5, front_pattern(c)));
    spec.components.push_back(make_component("cb", 0.62 * win, 0.12 * win, 15.0, 2.5, back_pattern(c)));

    TaskGenSpec alpha;
    alpha.task_id = "alpha";
    alpha.label_space = {"hit", "miss"};
    alpha.class_components = {{{"bg", 1}, {"ca", 1}}, {{"bg", 1}}};
    alpha.noise_snr_db = snr_db;
    spec.tasks.push_back(alpha);

    TaskGenSpec beta;
    beta.task_id = "beta";
    beta.label_space = {"go", "stop"};
    beta.class_components = {{{"bg", 1}, {"cb", 1}}, {{"bg", 1}}};
    beta.noise_snr_db = snr_db;
    spec.tasks.push_back(beta);

    if (with_third_task) {
        TaskGenSpec gamma;
        gamma.task_id = "gamma";
        gamma.label_space = {"left", "mid", "right"};
        gamma.class_components = {{{"bg", 1}, {"ca", 1}}, {{"bg", 1}, {"cb", 1}}, {{"bg", 1}}};
        gamma.noise_snr_db = snr_db;
        spec.tasks.push_back(gamma);
    }
    return spec;
}

// Planted transfer asymmetry: task "narrow"'s components {bg, strong} are a
// strict subset of task "wide"'s {bg, strong, weak}. "wide"'s classes differ
// only in the weak component, "narrow"'s only in the strong one. A model
// trained on "wide" passes the loud strong component through its features, so
// probing it on "narrow" works; a model trained on "narrow" never had to
// resolve the faint weak component, so the reverse probe stays near chance.
inline CohortSpec nested_cohort(size_t n_subjects, size_t m, size_t c, double rate, double snr_db) {
    const double win = 1000.0 * static_cast<double>(m) / rate;
    CohortSpec spec;
    spec.n_subjects = n_subjects;
    spec.m = m;
    spec.c = c;
    spec.sampling_rate = rate;
    spec.gain_std = 0.0;
    spec.latency_jitter_ms = 0.0;
    spec.components.push_back(make_component("bg", 0.50 * win, 0.20 * win, 3.0, 1.0, flat_pattern(c)));
    spec.components.push_back(make_component("strong", 0.40 * win, 0.13 * win, 10.0, 3.0, front_pattern(c)));
    spec.components.push_back(make_component("weak", 0.65 * win, 0.11 * win, 22.0, 0.7, back_pattern(c)));

    TaskGenSpec wide;
    wide.task_id = "wide";
    wide.label_space = {"full", "partial"};
    wide.class_components = {{{"bg", 1}, {"strong", 1}, {"weak", 1}}, {{"bg", 1}, {"strong", 1}}};
    wide.noise_snr_db = snr_db;
    spec.tasks.push_back(wide);

    TaskGenSpec narrow;
    narrow.task_id = "narrow";
    narrow.label_space = {"present", "absent"};
    narrow.class_components = {{{"bg", 1}, {"strong", 1}}, {{"bg", 1}}};
    narrow.noise_snr_db = snr_db;
    spec.tasks.push_back(narrow);
    return spec;
}

// First `train` subjects train, next `val` validate, rest test; one fold.
inline AlignedSplitPlan manual_plan(const std::vector<std::string>& subjects, size_t train, size_t val) {
    AlignedSplitPlan plan;
    plan.subjects = subjects;
    FoldSplit fold;
    for (size_t i = 0; i < subjects.size(); ++i) {
        if (i < train)
            fold.train_subjects.push_back(subjects[i]);
        else if (i < train + val)
            fold.val_subjects.push_back(subjects[i]);
        else
            fold.test_subjects.push_back(subjects[i]);
    }
    plan.folds.push_back(fold);
    return plan;
}

}  // namespace tgtest
