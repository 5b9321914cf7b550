#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "transfergrid/errors.hpp"
#include "transfergrid/layers.hpp"
#include "transfergrid/optim.hpp"

namespace transfergrid {

enum class ArchKind { shallow, eegnet, inception };

inline const char* arch_kind_name(ArchKind k) {
    switch (k) {
        case ArchKind::shallow: return "shallow";
        case ArchKind::eegnet: return "eegnet";
        case ArchKind::inception: return "inception";
    }
    return "?";
}

inline ArchKind arch_kind_from_name(const std::string& s) {
    if (s == "shallow") return ArchKind::shallow;
    if (s == "eegnet") return ArchKind::eegnet;
    if (s == "inception") return ArchKind::inception;
    throw UsageError("unknown architecture '" + s + "' (expected shallow|eegnet|inception)");
}

struct ShallowHParams {
    size_t n_filters_time = 40;
    size_t filter_time_length = 25;
    size_t n_filters_spat = 40;
    size_t pool_length = 75;
    size_t pool_stride = 15;
    double dropout = 0.5;
};

struct EegnetHParams {
    size_t f1 = 8;
    size_t depth_multiplier = 2;
    size_t f2 = 16;
    size_t kernel_length = 64;
    size_t sep_kernel_length = 16;
    size_t pool1 = 4;
    size_t pool2 = 8;
    double dropout = 0.25;
};

struct InceptionHParams {
    size_t n_filters = 8;
    size_t depth_multiplier = 2;
    // Temporal kernel lengths = these durations (seconds) times the sampling
    // rate, giving the multi-scale {64, 32, 16} at 256 Hz.
    std::vector<double> scales_s = {0.25, 0.125, 0.0625};
    size_t pool1 = 4;
    size_t pool2 = 2;
    double dropout = 0.25;
};

struct ArchitectureSpec {
    ArchKind kind = ArchKind::shallow;
    size_t m = 0;  // time steps
    size_t c = 0;  // channels
    size_t n_classes = 2;
    double sampling_rate = 0;
    ShallowHParams shallow;
    EegnetHParams eegnet;
    InceptionHParams inception;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["kind"] = arch_kind_name(kind);
        j["m"] = m;
        j["c"] = c;
        j["n_classes"] = n_classes;
        j["sampling_rate"] = sampling_rate;
        switch (kind) {
            case ArchKind::shallow:
                j["hparams"] = {{"n_filters_time", shallow.n_filters_time},
                                {"filter_time_length", shallow.filter_time_length},
                                {"n_filters_spat", shallow.n_filters_spat},
                                {"pool_length", shallow.pool_length},
                                {"pool_stride", shallow.pool_stride},
                                {"dropout", shallow.dropout}};
                break;
            case ArchKind::eegnet:
                j["hparams"] = {{"f1", eegnet.f1},
                                {"depth_multiplier", eegnet.depth_multiplier},
                                {"f2", eegnet.f2},
                                {"kernel_length", eegnet.kernel_length},
                                {"sep_kernel_length", eegnet.sep_kernel_length},
                                {"pool1", eegnet.pool1},
                                {"pool2", eegnet.pool2},
                                {"dropout", eegnet.dropout}};
                break;
            case ArchKind::inception:
                j["hparams"] = {{"n_filters", inception.n_filters},
                                {"depth_multiplier", inception.depth_multiplier},
                                {"scales_s", inception.scales_s},
                                {"pool1", inception.pool1},
                                {"pool2", inception.pool2},
                                {"dropout", inception.dropout}};
                break;
        }
        return j;
    }

    static ArchitectureSpec from_json(const nlohmann::ordered_json& j) {
        ArchitectureSpec s;
        s.kind = arch_kind_from_name(j.at("kind").get<std::string>());
        s.m = j.at("m").get<size_t>();
        s.c = j.at("c").get<size_t>();
        s.n_classes = j.at("n_classes").get<size_t>();
        s.sampling_rate = j.at("sampling_rate").get<double>();
        const auto& h = j.at("hparams");
        switch (s.kind) {
            case ArchKind::shallow:
                s.shallow.n_filters_time = h.at("n_filters_time").get<size_t>();
                s.shallow.filter_time_length = h.at("filter_time_length").get<size_t>();
                s.shallow.n_filters_spat = h.at("n_filters_spat").get<size_t>();
                s.shallow.pool_length = h.at("pool_length").get<size_t>();
                s.shallow.pool_stride = h.at("pool_stride").get<size_t>();
                s.shallow.dropout = h.at("dropout").get<double>();
                break;
            case ArchKind::eegnet:
                s.eegnet.f1 = h.at("f1").get<size_t>();
                s.eegnet.depth_multiplier = h.at("depth_multiplier").get<size_t>();
                s.eegnet.f2 = h.at("f2").get<size_t>();
                s.eegnet.kernel_length = h.at("kernel_length").get<size_t>();
                s.eegnet.sep_kernel_length = h.at("sep_kernel_length").get<size_t>();
                s.eegnet.pool1 = h.at("pool1").get<size_t>();
                s.eegnet.pool2 = h.at("pool2").get<size_t>();
                s.eegnet.dropout = h.at("dropout").get<double>();
                break;
            case ArchKind::inception:
                s.inception.n_filters = h.at("n_filters").get<size_t>();
                s.inception.depth_multiplier = h.at("depth_multiplier").get<size_t>();
                s.inception.scales_s = h.at("scales_s").get<std::vector<double>>();
                s.inception.pool1 = h.at("pool1").get<size_t>();
                s.inception.pool2 = h.at("pool2").get<size_t>();
                s.inception.dropout = h.at("dropout").get<double>();
                break;
        }
        return s;
    }
};

// A decoding network factored as f(x) = head(representer(x)). The head is
// always a single affine layer; everything before it is the representer.
template <typename S>
struct Model {
    ArchitectureSpec spec;
    Sequential<S> rep;
    std::unique_ptr<Affine<S>> head;
    Rng dropout_rng{0};
    size_t rep_dim = 0;

    Tensor<S> representer_forward(const Tensor<S>& x, bool training, bool record) {
        RunContext ctx{training, record, &dropout_rng};
        return rep.forward(x, ctx);
    }

    Tensor<S> head_forward(const Tensor<S>& representation, bool record = false) {
        RunContext ctx{false, record, nullptr};
        return head->forward(representation, ctx);
    }

    // Full forward. Training mode records activations for backward.
    Tensor<S> forward(const Tensor<S>& x, bool training) { return forward(x, training, training); }

    Tensor<S> forward(const Tensor<S>& x, bool training, bool record) {
        Tensor<S> r = representer_forward(x, training, record);
        return head_forward(r, record);
    }

    double max_dropout() const { return rep.max_dropout(); }

    // Backpropagates from score gradients; accumulates into param grads.
    void backward(const Tensor<S>& grad_scores) {
        Tensor<S> g = head->backward(grad_scores);
        rep.backward(g);
    }

    std::vector<Parameter<S>*> params() {
        std::vector<Parameter<S>*> out;
        rep.collect_params(out);
        head->collect_params(out);
        return out;
    }
    std::vector<Parameter<S>*> rep_params() {
        std::vector<Parameter<S>*> out;
        rep.collect_params(out);
        return out;
    }
    std::vector<Parameter<S>*> head_params() {
        std::vector<Parameter<S>*> out;
        head->collect_params(out);
        return out;
    }
    std::vector<Tensor<S>*> buffers() {
        std::vector<Tensor<S>*> out;
        rep.collect_buffers(out);
        return out;
    }

    // Representer state fingerprint: parameter values plus BN running stats.
    uint64_t rep_state_hash() {
        uint64_t h = 1469598103934665603ull;
        for (auto* p : rep_params()) {
            h = hash_bytes(p->name.data(), p->name.size(), h);
            h = hash_tensor_bytes(p->value, h);
        }
        for (auto* b : buffers()) h = hash_tensor_bytes(*b, h);
        return h;
    }

    // Fresh Xavier head of the same output dimension; representer untouched.
    void reset_head(uint64_t seed) { rebuild_head(spec.n_classes, seed); }

    void rebuild_head(size_t n_classes, uint64_t seed) {
        head = std::make_unique<Affine<S>>("head", rep_dim, n_classes);
        Rng rng(derive_seed(seed, "head"));
        xavier_init(head->weight(), rng);
    }
};

namespace detail {

inline size_t scale_kernel(double seconds, double sampling_rate) {
    const auto k = static_cast<size_t>(std::lround(seconds * sampling_rate));
    return k == 0 ? 1 : k;
}

// "same" padding for a length-k kernel: total k-1, split left-biased.
inline std::pair<size_t, size_t> same_pad(size_t k) { return {(k - 1) / 2, k - 1 - (k - 1) / 2}; }

}  // namespace detail

// Assembles the layer stack for the requested architecture. Trials enter as
// (N, 1, c, m) images: height = channels, width = time, so temporal kernels
// are (1, k) and spatial kernels (c, 1).
template <typename S>
Model<S> build_model(const ArchitectureSpec& spec, uint64_t seed) {
    if (spec.m == 0 || spec.c == 0) throw std::invalid_argument("build_model: m and c must be >= 1");
    if (spec.n_classes < 2) throw std::invalid_argument("build_model: n_classes must be >= 2");

    Model<S> model;
    model.spec = spec;
    Sequential<S>& rep = model.rep;

    switch (spec.kind) {
        case ArchKind::shallow: {
            const auto& h = spec.shallow;
            if (h.filter_time_length > spec.m)
                throw std::invalid_argument("shallow: temporal kernel longer than window");
            rep.template add<Conv2d<S>>("rep.conv_time", 1, h.n_filters_time, 1, h.filter_time_length);
            rep.template add<Conv2d<S>>("rep.conv_spat", h.n_filters_time, h.n_filters_spat, spec.c, 1);
            rep.template add<Square<S>>();
            rep.template add<AvgPool2d<S>>(1, h.pool_length, 1, h.pool_stride);
            rep.template add<LogFloor<S>>(1e-6);
            rep.template add<Dropout<S>>(h.dropout);
            rep.template add<Flatten<S>>();
            break;
        }
        case ArchKind::eegnet: {
            const auto& h = spec.eegnet;
            if (h.kernel_length > spec.m) throw std::invalid_argument("eegnet: temporal kernel longer than window");
            if (spec.c == 1 && h.depth_multiplier > 1)
                throw std::invalid_argument("eegnet: depthwise depth > 1 needs more than one channel");
            const auto [p1l, p1r] = detail::same_pad(h.kernel_length);
            rep.template add<Conv2d<S>>("rep.conv_time", 1, h.f1, 1, h.kernel_length, 1, 0, 0, p1l, p1r);
            // bias omitted where batch norm immediately follows
            rep.template add<Conv2d<S>>("rep.conv_spat_dw", h.f1, h.f1 * h.depth_multiplier, spec.c, 1, h.f1,
                                        0, 0, 0, 0, 1, 1, false);
            rep.template add<BatchNorm2d<S>>("rep.bn1", h.f1 * h.depth_multiplier);
            rep.template add<Elu<S>>();
            rep.template add<AvgPool2d<S>>(1, h.pool1, 1, h.pool1);
            rep.template add<Dropout<S>>(h.dropout);
            const auto [p2l, p2r] = detail::same_pad(h.sep_kernel_length);
            const size_t dw_ch = h.f1 * h.depth_multiplier;
            rep.template add<Conv2d<S>>("rep.sep_dw", dw_ch, dw_ch, 1, h.sep_kernel_length, dw_ch,
                                        0, 0, p2l, p2r, 1, 1, false);
            rep.template add<Conv2d<S>>("rep.sep_pw", dw_ch, h.f2, 1, 1, 1, 0, 0, 0, 0, 1, 1, false);
            rep.template add<BatchNorm2d<S>>("rep.bn2", h.f2);
            rep.template add<Elu<S>>();
            rep.template add<AvgPool2d<S>>(1, h.pool2, 1, h.pool2);
            rep.template add<Dropout<S>>(h.dropout);
            rep.template add<Flatten<S>>();
            break;
        }
        case ArchKind::inception: {
            const auto& h = spec.inception;
            if (spec.sampling_rate <= 0) throw std::invalid_argument("inception: sampling_rate required");
            if (spec.c == 1 && h.depth_multiplier > 1)
                throw std::invalid_argument("inception: depthwise depth > 1 needs more than one channel");
            std::vector<size_t> kernels;
            for (double s : h.scales_s) {
                const size_t k = detail::scale_kernel(s, spec.sampling_rate);
                if (k > spec.m) throw std::invalid_argument("inception: temporal kernel longer than window");
                kernels.push_back(k);
            }
            const size_t branch_out = h.n_filters * h.depth_multiplier;
            size_t in_ch = 1, height = spec.c;
            for (int block = 1; block <= 2; ++block) {
                auto& concat = rep.template add<BranchConcat<S>>();
                for (size_t b = 0; b < kernels.size(); ++b) {
                    const std::string prefix =
                        "rep.block" + std::to_string(block) + ".branch" + std::to_string(b);
                    auto& branch = concat.add_branch();
                    const auto [pl, pr] = detail::same_pad(kernels[b]);
                    branch.template add<Conv2d<S>>(prefix + ".conv_time", in_ch, h.n_filters, 1, kernels[b],
                                                   1, 0, 0, pl, pr);
                    branch.template add<Conv2d<S>>(prefix + ".conv_spat_dw", h.n_filters, branch_out, height, 1,
                                                   h.n_filters);
                }
                rep.template add<AvgPool2d<S>>(1, block == 1 ? h.pool1 : h.pool2, 1, block == 1 ? h.pool1 : h.pool2);
                rep.template add<Elu<S>>();
                rep.template add<Dropout<S>>(h.dropout);
                in_ch = branch_out * kernels.size();
                height = 1;
            }
            rep.template add<Flatten<S>>();
            break;
        }
    }

    const Shape rep_out = rep.out_shape({1, 1, spec.c, spec.m});
    model.rep_dim = rep_out[1];
    model.head = std::make_unique<Affine<S>>("head", model.rep_dim, spec.n_classes);

    Rng init_rng(derive_seed(seed, "init"));
    for (auto* p : model.params()) xavier_init(*p, init_rng);
    model.dropout_rng = Rng(derive_seed(seed, "dropout"));
    return model;
}

}  // namespace transfergrid
