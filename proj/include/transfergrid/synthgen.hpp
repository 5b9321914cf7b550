#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "transfergrid/dataio.hpp"
#include "transfergrid/errors.hpp"
#include "transfergrid/rng.hpp"

namespace transfergrid {

// A Gaussian-windowed sinusoid projected through a fixed channel pattern.
// Stands in for an ERP component; frequency 0 selects phase pi/2 so the
// waveform degenerates to the bump itself rather than to zero.
struct ComponentSpec {
    std::string id;
    double center_ms = 0;
    double width_ms = 0;
    double frequency_hz = 0;
    double amplitude = 0;
    std::vector<double> spatial_pattern;  // unit Euclidean norm

    void normalize_pattern() {
        double norm2 = 0;
        for (double v : spatial_pattern) norm2 += v * v;
        if (norm2 <= 0) throw DataError("component " + id + ": spatial_pattern must be non-zero");
        const double inv = 1.0 / std::sqrt(norm2);
        for (double& v : spatial_pattern) v *= inv;
    }
};

struct TaskGenSpec {
    std::string task_id;
    std::vector<std::string> label_space;
    // class index -> list of (component id, polarity +-1)
    std::vector<std::vector<std::pair<std::string, int>>> class_components;
    double noise_snr_db = 0;
};

struct CohortSpec {
    size_t n_subjects = 0;
    size_t m = 0;
    size_t c = 0;
    double sampling_rate = 0;
    double gain_std = 0;
    double latency_jitter_ms = 0;
    std::vector<ComponentSpec> components;
    std::vector<TaskGenSpec> tasks;

    const ComponentSpec* find_component(const std::string& id) const {
        for (const auto& comp : components)
            if (comp.id == id) return &comp;
        return nullptr;
    }

    void validate() const {
        if (n_subjects < 2) throw DataError("cohort: n_subjects must be >= 2");
        if (m == 0 || c == 0) throw DataError("cohort: m and c must be >= 1");
        if (sampling_rate <= 0) throw DataError("cohort: sampling_rate must be positive");
        if (tasks.empty()) throw DataError("cohort: at least one task required");
        for (const auto& comp : components) {
            if (comp.width_ms <= 0) throw DataError("component " + comp.id + ": width_ms must be positive");
            if (comp.spatial_pattern.size() != c)
                throw DataError("component " + comp.id + ": spatial_pattern length != c");
        }
        for (const auto& task : tasks) {
            if (task.label_space.size() < 2 || task.label_space.size() > 3)
                throw DataError("task " + task.task_id + ": label_space size must be 2 or 3");
            if (task.class_components.size() != task.label_space.size())
                throw DataError("task " + task.task_id + ": need one component set per class");
            for (const auto& cls : task.class_components) {
                if (cls.empty()) throw DataError("task " + task.task_id + ": every class needs >= 1 component");
                for (const auto& [id, pol] : cls) {
                    if (!find_component(id)) throw DataError("task " + task.task_id + ": unknown component " + id);
                    if (pol != 1 && pol != -1) throw DataError("task " + task.task_id + ": polarity must be +-1");
                }
            }
            for (size_t a = 0; a < task.class_components.size(); ++a)
                for (size_t b = a + 1; b < task.class_components.size(); ++b)
                    if (task.class_components[a] == task.class_components[b])
                        throw DataError("task " + task.task_id + ": classes " + std::to_string(a) + " and " +
                                        std::to_string(b) + " have identical component sets");
        }
    }
};

inline std::vector<double> component_waveform(const ComponentSpec& spec, size_t m, double sampling_rate) {
    if (spec.width_ms <= 0) throw DataError("component " + spec.id + ": width_ms must be positive");
    const double center = spec.center_ms / 1000.0;
    const double width = spec.width_ms / 1000.0;
    const double phase = spec.frequency_hz == 0 ? std::numbers::pi / 2 : 0.0;
    std::vector<double> w(m);
    for (size_t i = 0; i < m; ++i) {
        const double t = static_cast<double>(i) / sampling_rate;
        const double dt = t - center;
        w[i] = spec.amplitude * std::exp(-dt * dt / (2 * width * width)) *
               std::sin(2 * std::numbers::pi * spec.frequency_hz * t + phase);
    }
    return w;
}

inline json cohort_spec_to_json(const CohortSpec& spec) {
    json j;
    j["n_subjects"] = spec.n_subjects;
    j["m"] = spec.m;
    j["c"] = spec.c;
    j["sampling_rate"] = spec.sampling_rate;
    j["subject_variability"] = {{"gain_std", spec.gain_std}, {"latency_jitter_ms", spec.latency_jitter_ms}};
    j["components"] = json::array();
    for (const auto& comp : spec.components)
        j["components"].push_back({{"id", comp.id},
                                   {"center_ms", comp.center_ms},
                                   {"width_ms", comp.width_ms},
                                   {"frequency_hz", comp.frequency_hz},
                                   {"amplitude", comp.amplitude},
                                   {"spatial_pattern", comp.spatial_pattern}});
    j["tasks"] = json::array();
    for (const auto& task : spec.tasks) {
        json classes = json::object();
        for (size_t k = 0; k < task.label_space.size(); ++k) {
            json refs = json::array();
            for (const auto& [id, pol] : task.class_components[k]) refs.push_back({id, pol});
            classes[task.label_space[k]] = refs;
        }
        j["tasks"].push_back({{"task_id", task.task_id},
                              {"label_space", task.label_space},
                              {"noise_snr_db", task.noise_snr_db},
                              {"classes", classes}});
    }
    return j;
}

inline CohortSpec cohort_spec_from_json(const json& j) {
    CohortSpec spec;
    try {
        spec.n_subjects = j.at("n_subjects").get<size_t>();
        spec.m = j.at("m").get<size_t>();
        spec.c = j.at("c").get<size_t>();
        spec.sampling_rate = j.at("sampling_rate").get<double>();
        const auto& var = j.at("subject_variability");
        spec.gain_std = var.at("gain_std").get<double>();
        spec.latency_jitter_ms = var.at("latency_jitter_ms").get<double>();
        for (const auto& cj : j.at("components")) {
            ComponentSpec comp;
            comp.id = cj.at("id").get<std::string>();
            comp.center_ms = cj.at("center_ms").get<double>();
            comp.width_ms = cj.at("width_ms").get<double>();
            comp.frequency_hz = cj.at("frequency_hz").get<double>();
            comp.amplitude = cj.at("amplitude").get<double>();
            comp.spatial_pattern = cj.at("spatial_pattern").get<std::vector<double>>();
            comp.normalize_pattern();
            spec.components.push_back(std::move(comp));
        }
        for (const auto& tj : j.at("tasks")) {
            TaskGenSpec task;
            task.task_id = tj.at("task_id").get<std::string>();
            task.label_space = tj.at("label_space").get<std::vector<std::string>>();
            task.noise_snr_db = tj.at("noise_snr_db").get<double>();
            const auto& classes = tj.at("classes");
            for (const auto& cls : task.label_space) {
                std::vector<std::pair<std::string, int>> refs;
                for (const auto& r : classes.at(cls)) refs.emplace_back(r.at(0).get<std::string>(), r.at(1).get<int>());
                task.class_components.push_back(std::move(refs));
            }
            spec.tasks.push_back(std::move(task));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("bad cohort spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

namespace detail {

// Pink (1/f) noise by direct spectral synthesis: harmonic j gets amplitude
// 1/sqrt(j) and independent Gaussian quadrature coefficients.
struct PinkNoiseTable {
    size_t m;
    std::vector<double> cos_tab, sin_tab;  // cos/sin(2*pi*r/m), r in [0, m)

    explicit PinkNoiseTable(size_t m_) : m(m_), cos_tab(m_), sin_tab(m_) {
        for (size_t r = 0; r < m; ++r) {
            const double a = 2 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(m);
            cos_tab[r] = std::cos(a);
            sin_tab[r] = std::sin(a);
        }
    }

    // Fills out[t*stride] for t in [0, m).
    void sample(Rng& rng, double* out, size_t stride) const {
        for (size_t t = 0; t < m; ++t) out[t * stride] = 0;
        const size_t jmax = m / 2;
        for (size_t j = 1; j <= jmax; ++j) {
            const double amp = 1.0 / std::sqrt(static_cast<double>(j));
            const double a = rng.normal() * amp, b = rng.normal() * amp;
            for (size_t t = 0; t < m; ++t) {
                const size_t r = (j * t) % m;
                out[t * stride] += a * cos_tab[r] + b * sin_tab[r];
            }
        }
    }
};

}  // namespace detail

// Deterministic multi-task cohort. Subject traits (per-component gain and
// latency) are drawn once per subject and shared by all tasks, so the same
// subject "brain" underlies every task, mirroring a single-cohort design.
inline std::map<std::string, TaskDataset> generate_cohort(const CohortSpec& spec,
                                                          size_t trials_per_class_per_subject, uint64_t seed) {
    spec.validate();
    if (trials_per_class_per_subject < 1)
        throw UsageError("generate_cohort: trials_per_class_per_subject must be >= 1");

    const size_t m = spec.m, c = spec.c, ns = spec.n_subjects;
    std::vector<std::string> subjects(ns);
    {
        size_t width = 2;
        for (size_t v = 100; v <= ns; v *= 10) ++width;
        for (size_t i = 0; i < ns; ++i) {
            std::string num = std::to_string(i + 1);
            subjects[i] = "s" + std::string(width - num.size(), '0') + num;
        }
    }

    // traits[subject][component] = (gain, latency_ms)
    std::vector<std::vector<std::pair<double, double>>> traits(ns);
    for (size_t si = 0; si < ns; ++si) {
        traits[si].resize(spec.components.size());
        for (size_t ci = 0; ci < spec.components.size(); ++ci) {
            Rng tr(derive_seed(seed, "traits", si, ci));
            const double gain = tr.normal(1.0, spec.gain_std);
            const double latency = tr.uniform(-spec.latency_jitter_ms, spec.latency_jitter_ms);
            traits[si][ci] = {gain, latency};
        }
    }

    const detail::PinkNoiseTable noise_tab(m);
    const double window_end_ms = 1000.0 * static_cast<double>(m) / spec.sampling_rate;

    std::map<std::string, TaskDataset> out;
    for (size_t ti = 0; ti < spec.tasks.size(); ++ti) {
        const TaskGenSpec& task = spec.tasks[ti];
        const size_t n_classes = task.label_space.size();

        // Per (subject, class) signal template in channel-major layout
        // (signal deterministic per subject; trials vary only through noise).
        std::vector<std::vector<double>> templates(ns * n_classes, std::vector<double>(m * c, 0.0));
        double sig_power_sum = 0;
        for (size_t si = 0; si < ns; ++si) {
            for (size_t ki = 0; ki < n_classes; ++ki) {
                auto& tmpl = templates[si * n_classes + ki];
                for (const auto& [comp_id, pol] : task.class_components[ki]) {
                    size_t ci = 0;
                    while (spec.components[ci].id != comp_id) ++ci;
                    const ComponentSpec& comp = spec.components[ci];
                    const auto [gain, latency] = traits[si][ci];
                    ComponentSpec shifted = comp;
                    shifted.center_ms += latency;
                    const std::vector<double> wave = component_waveform(shifted, m, spec.sampling_rate);
                    const double scale = pol * gain;
                    for (size_t ch = 0; ch < c; ++ch) {
                        const double mix = scale * comp.spatial_pattern[ch];
                        for (size_t t = 0; t < m; ++t) tmpl[t * c + ch] += mix * wave[t];
                    }
                }
                for (double v : tmpl) sig_power_sum += v * v;
            }
        }
        const double sig_power = sig_power_sum / static_cast<double>(ns * n_classes * m * c);

        // First pass: raw noise for every trial; second pass scales it so the
        // cohort-mean SNR hits noise_snr_db exactly.
        const size_t n_trials = ns * n_classes * trials_per_class_per_subject;
        std::vector<std::vector<double>> noises(n_trials, std::vector<double>(m * c));
        double noise_power_sum = 0;
        size_t trial_idx = 0;
        for (size_t si = 0; si < ns; ++si)
            for (size_t ki = 0; ki < n_classes; ++ki)
                for (size_t rep = 0; rep < trials_per_class_per_subject; ++rep, ++trial_idx) {
                    Rng nr(derive_seed(seed, "noise", ti, si, ki, rep));
                    auto& buf = noises[trial_idx];
                    for (size_t ch = 0; ch < c; ++ch) noise_tab.sample(nr, buf.data() + ch, c);
                    for (double v : buf) noise_power_sum += v * v;
                }
        const double noise_power = noise_power_sum / static_cast<double>(n_trials * m * c);
        double noise_scale = 1.0;
        if (sig_power > 0 && noise_power > 0)
            noise_scale = std::sqrt(sig_power / (noise_power * std::pow(10.0, task.noise_snr_db / 10.0)));

        TaskDataset ds;
        ds.task_id = task.task_id;
        ds.label_space = task.label_space;
        ds.sampling_rate = spec.sampling_rate;
        ds.m = m;
        ds.c = c;
        ds.window_start_ms = 0;
        ds.window_end_ms = window_end_ms;
        ds.subjects = subjects;
        ds.trials.reserve(n_trials);
        trial_idx = 0;
        for (size_t si = 0; si < ns; ++si)
            for (size_t ki = 0; ki < n_classes; ++ki)
                for (size_t rep = 0; rep < trials_per_class_per_subject; ++rep, ++trial_idx) {
                    TrialRecording t;
                    t.subject = subjects[si];
                    t.label = ki;
                    t.samples.resize(m * c);
                    const auto& tmpl = templates[si * n_classes + ki];
                    const auto& noise = noises[trial_idx];
                    for (size_t i = 0; i < m * c; ++i)
                        t.samples[i] = static_cast<float>(tmpl[i] + noise_scale * noise[i]);
                    ds.trials.push_back(std::move(t));
                }
        ds.validate();
        out.emplace(task.task_id, std::move(ds));
    }
    return out;
}

}  // namespace transfergrid
