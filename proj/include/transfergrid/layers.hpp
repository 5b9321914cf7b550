#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "transfergrid/rng.hpp"
#include "transfergrid/tensor.hpp"

namespace transfergrid {

// Per-call execution context. `record` asks layers to cache whatever their
// backward pass needs; evaluation-only forwards skip the caching.
struct RunContext {
    bool training = false;
    bool record = false;
    Rng* rng = nullptr;  // consumed by dropout in training mode
};

template <typename S>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const char* kind() const = 0;
    virtual Shape out_shape(const Shape& in) const = 0;
    virtual Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) = 0;
    // Consumes the activation gradient and returns the input gradient.
    // Parameter gradients accumulate into Parameter::grad.
    virtual Tensor<S> backward(const Tensor<S>& grad_out) = 0;
    virtual void collect_params(std::vector<Parameter<S>*>& out) {}
    // Non-learnable state that still belongs to the model (BN running stats).
    virtual void collect_buffers(std::vector<Tensor<S>*>& out) {}
    // Largest dropout probability anywhere inside this layer.
    virtual double max_dropout() const { return 0; }
};

namespace detail {

inline void check_rank4(const Shape& s, const char* who) {
    if (s.size() != 4) throw std::invalid_argument(std::string(who) + ": expected NCHW input, got rank " + std::to_string(s.size()));
}

}  // namespace detail

// 2-D convolution over NCHW. groups == in_channels gives a depthwise
// convolution; a separable convolution is a depthwise followed by a 1x1.
template <typename S>
class Conv2d : public Layer<S> {
public:
    Conv2d(std::string name, size_t in_ch, size_t out_ch, size_t kh, size_t kw,
           size_t groups = 1, size_t pad_h0 = 0, size_t pad_h1 = 0, size_t pad_w0 = 0, size_t pad_w1 = 0,
           size_t stride_h = 1, size_t stride_w = 1, bool with_bias = true)
        : in_ch_(in_ch), out_ch_(out_ch), kh_(kh), kw_(kw), groups_(groups),
          ph0_(pad_h0), ph1_(pad_h1), pw0_(pad_w0), pw1_(pad_w1), sh_(stride_h), sw_(stride_w),
          with_bias_(with_bias) {
        if (groups_ == 0 || in_ch_ % groups_ != 0 || out_ch_ % groups_ != 0)
            throw std::invalid_argument("Conv2d " + name + ": channels not divisible by groups");
        if (sh_ == 0 || sw_ == 0) throw std::invalid_argument("Conv2d " + name + ": zero stride");
        weight_ = Parameter<S>(name + ".weight", Tensor<S>({out_ch_, in_ch_ / groups_, kh_, kw_}));
        if (with_bias_) bias_ = Parameter<S>(name + ".bias", Tensor<S>({out_ch_}));
    }

    const char* kind() const override { return "conv2d"; }

    Shape out_shape(const Shape& in) const override {
        detail::check_rank4(in, "conv2d");
        if (in[1] != in_ch_) throw std::invalid_argument("conv2d: channel mismatch");
        const size_t h = in[2] + ph0_ + ph1_, w = in[3] + pw0_ + pw1_;
        if (h < kh_ || w < kw_) throw std::invalid_argument("conv2d: kernel larger than padded input");
        return {in[0], out_ch_, (h - kh_) / sh_ + 1, (w - kw_) / sw_ + 1};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(out_shape(x.shape));
        const size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
        const size_t OH = y.shape[2], OW = y.shape[3];
        const size_t icg = in_ch_ / groups_, ocg = out_ch_ / groups_;
        for (size_t n = 0; n < N; ++n) {
            for (size_t oc = 0; oc < out_ch_; ++oc) {
                S* out_plane = &y.data[((n * out_ch_ + oc) * OH) * OW];
                if (with_bias_) {
                    const S b = bias_.value.data[oc];
                    for (size_t i = 0; i < OH * OW; ++i) out_plane[i] = b;
                }
                const size_t g = oc / ocg;
                for (size_t ic = 0; ic < icg; ++ic) {
                    const S* in_plane = &x.data[((n * in_ch_ + g * icg + ic) * H) * W];
                    const S* wk = &weight_.value.data[((oc * icg + ic) * kh_) * kw_];
                    for (size_t kh = 0; kh < kh_; ++kh) {
                        for (size_t oh = 0; oh < OH; ++oh) {
                            const ptrdiff_t ih = static_cast<ptrdiff_t>(oh * sh_ + kh) - static_cast<ptrdiff_t>(ph0_);
                            if (ih < 0 || ih >= static_cast<ptrdiff_t>(H)) continue;
                            const S* in_row = in_plane + ih * W;
                            S* out_row = out_plane + oh * OW;
                            for (size_t kw = 0; kw < kw_; ++kw) {
                                const S wv = wk[kh * kw_ + kw];
                                size_t lo, hi;
                                col_range(kw, W, OW, lo, hi);
                                if (sw_ == 1) {
                                    const S* in_off = in_row + kw - pw0_;  // valid on [lo, hi)
                                    for (size_t ow = lo; ow < hi; ++ow) out_row[ow] += wv * in_off[ow];
                                } else {
                                    for (size_t ow = lo; ow < hi; ++ow)
                                        out_row[ow] += wv * in_row[ow * sw_ + kw - pw0_];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (ctx.record) cached_in_ = x;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        if (cached_in_.numel() == 0) throw std::logic_error("conv2d: backward before recorded forward");
        const Tensor<S>& x = cached_in_;
        Tensor<S> gin(x.shape);
        const size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
        const size_t OH = gout.shape[2], OW = gout.shape[3];
        const size_t icg = in_ch_ / groups_, ocg = out_ch_ / groups_;
        for (size_t n = 0; n < N; ++n) {
            for (size_t oc = 0; oc < out_ch_; ++oc) {
                const S* gout_plane = &gout.data[((n * out_ch_ + oc) * OH) * OW];
                if (with_bias_) {
                    double acc = 0;
                    for (size_t i = 0; i < OH * OW; ++i) acc += gout_plane[i];
                    bias_.grad.data[oc] += static_cast<S>(acc);
                }
                const size_t g = oc / ocg;
                for (size_t ic = 0; ic < icg; ++ic) {
                    const size_t plane = (n * in_ch_ + g * icg + ic) * H;
                    const S* in_plane = &x.data[plane * W];
                    S* gin_plane = &gin.data[plane * W];
                    const S* wk = &weight_.value.data[((oc * icg + ic) * kh_) * kw_];
                    S* gw = &weight_.grad.data[((oc * icg + ic) * kh_) * kw_];
                    for (size_t kh = 0; kh < kh_; ++kh) {
                        for (size_t oh = 0; oh < OH; ++oh) {
                            const ptrdiff_t ih = static_cast<ptrdiff_t>(oh * sh_ + kh) - static_cast<ptrdiff_t>(ph0_);
                            if (ih < 0 || ih >= static_cast<ptrdiff_t>(H)) continue;
                            const S* in_row = in_plane + ih * W;
                            S* gin_row = gin_plane + ih * W;
                            const S* gout_row = gout_plane + oh * OW;
                            for (size_t kw = 0; kw < kw_; ++kw) {
                                const S wv = wk[kh * kw_ + kw];
                                size_t lo, hi;
                                col_range(kw, W, OW, lo, hi);
                                double wacc = 0;
                                if (sw_ == 1) {
                                    const ptrdiff_t off = static_cast<ptrdiff_t>(kw) - static_cast<ptrdiff_t>(pw0_);
                                    for (size_t ow = lo; ow < hi; ++ow) {
                                        gin_row[ow + off] += wv * gout_row[ow];
                                        wacc += static_cast<double>(in_row[ow + off]) * gout_row[ow];
                                    }
                                } else {
                                    for (size_t ow = lo; ow < hi; ++ow) {
                                        const size_t iw = ow * sw_ + kw - pw0_;
                                        gin_row[iw] += wv * gout_row[ow];
                                        wacc += static_cast<double>(in_row[iw]) * gout_row[ow];
                                    }
                                }
                                gw[kh * kw_ + kw] += static_cast<S>(wacc);
                            }
                        }
                    }
                }
            }
        }
        return gin;
    }

    void collect_params(std::vector<Parameter<S>*>& out) override {
        out.push_back(&weight_);
        if (with_bias_) out.push_back(&bias_);
    }

    Parameter<S>& weight() { return weight_; }
    Parameter<S>& bias() { return bias_; }

private:
    // Output columns with an in-bounds input column for kernel offset kw.
    void col_range(size_t kw, size_t W, size_t OW, size_t& lo, size_t& hi) const {
        // need 0 <= ow*sw + kw - pw0 < W
        ptrdiff_t lo_n = static_cast<ptrdiff_t>(pw0_) - static_cast<ptrdiff_t>(kw);
        lo = lo_n <= 0 ? 0 : static_cast<size_t>((lo_n + static_cast<ptrdiff_t>(sw_) - 1) / static_cast<ptrdiff_t>(sw_));
        const ptrdiff_t hi_n = static_cast<ptrdiff_t>(W) - 1 + static_cast<ptrdiff_t>(pw0_) - static_cast<ptrdiff_t>(kw);
        hi = hi_n < 0 ? 0 : std::min(OW, static_cast<size_t>(hi_n / static_cast<ptrdiff_t>(sw_)) + 1);
        if (lo > hi) lo = hi;
    }

    size_t in_ch_, out_ch_, kh_, kw_, groups_, ph0_, ph1_, pw0_, pw1_, sh_, sw_;
    bool with_bias_;
    Parameter<S> weight_, bias_;
    Tensor<S> cached_in_;
};

// Spatial batch normalization with running statistics (momentum 0.1, eps
// 1e-5). Eval mode is a fixed per-channel affine map.
template <typename S>
class BatchNorm2d : public Layer<S> {
public:
    BatchNorm2d(std::string name, size_t channels, double momentum = 0.1, double eps = 1e-5)
        : ch_(channels), momentum_(momentum), eps_(eps),
          gamma_(name + ".gamma", Tensor<S>({channels})),
          beta_(name + ".beta", Tensor<S>({channels})),
          running_mean_({channels}), running_var_({channels}) {
        gamma_.value.fill(S(1));
        running_var_.fill(S(1));
    }

    const char* kind() const override { return "batchnorm2d"; }

    Shape out_shape(const Shape& in) const override {
        detail::check_rank4(in, "batchnorm2d");
        if (in[1] != ch_) throw std::invalid_argument("batchnorm2d: channel mismatch");
        return in;
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        out_shape(x.shape);
        const size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
        const size_t plane = H * W, M = N * plane;
        Tensor<S> y(x.shape);
        trained_forward_ = ctx.training;
        if (ctx.record) {
            mean_.assign(ch_, 0.0);
            invstd_.assign(ch_, 0.0);
        }
        for (size_t c = 0; c < ch_; ++c) {
            double mean, var;
            if (ctx.training) {
                double s = 0, s2 = 0;
                for (size_t n = 0; n < N; ++n) {
                    const S* row = &x.data[(n * ch_ + c) * plane];
                    for (size_t i = 0; i < plane; ++i) {
                        s += row[i];
                        s2 += static_cast<double>(row[i]) * row[i];
                    }
                }
                mean = s / M;
                var = s2 / M - mean * mean;  // biased, used for normalization
                if (var < 0) var = 0;
                const double unbiased = M > 1 ? var * M / (M - 1.0) : var;
                running_mean_.data[c] = static_cast<S>((1 - momentum_) * running_mean_.data[c] + momentum_ * mean);
                running_var_.data[c] = static_cast<S>((1 - momentum_) * running_var_.data[c] + momentum_ * unbiased);
            } else {
                mean = running_mean_.data[c];
                var = running_var_.data[c];
            }
            const double invstd = 1.0 / std::sqrt(var + eps_);
            const S gm = gamma_.value.data[c], bt = beta_.value.data[c];
            for (size_t n = 0; n < N; ++n) {
                const S* xin = &x.data[(n * ch_ + c) * plane];
                S* yout = &y.data[(n * ch_ + c) * plane];
                for (size_t i = 0; i < plane; ++i)
                    yout[i] = static_cast<S>(gm * (xin[i] - mean) * invstd + bt);
            }
            if (ctx.record) {
                mean_[c] = mean;
                invstd_[c] = invstd;
            }
        }
        if (ctx.record) cached_in_ = x;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        if (cached_in_.numel() == 0) throw std::logic_error("batchnorm2d: backward before recorded forward");
        const Tensor<S>& x = cached_in_;
        const size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
        const size_t plane = H * W;
        const double M = static_cast<double>(N * plane);
        Tensor<S> gin(x.shape);
        for (size_t c = 0; c < ch_; ++c) {
            const double mean = mean_[c], invstd = invstd_[c];
            const double gm = gamma_.value.data[c];
            double sum_g = 0, sum_gx = 0;
            for (size_t n = 0; n < N; ++n) {
                const S* g = &gout.data[(n * ch_ + c) * plane];
                const S* xin = &x.data[(n * ch_ + c) * plane];
                for (size_t i = 0; i < plane; ++i) {
                    sum_g += g[i];
                    sum_gx += g[i] * (xin[i] - mean) * invstd;
                }
            }
            gamma_.grad.data[c] += static_cast<S>(sum_gx);
            beta_.grad.data[c] += static_cast<S>(sum_g);
            for (size_t n = 0; n < N; ++n) {
                const S* g = &gout.data[(n * ch_ + c) * plane];
                const S* xin = &x.data[(n * ch_ + c) * plane];
                S* gi = &gin.data[(n * ch_ + c) * plane];
                if (trained_forward_) {
                    for (size_t i = 0; i < plane; ++i) {
                        const double xhat = (xin[i] - mean) * invstd;
                        gi[i] = static_cast<S>(gm * invstd * (g[i] - sum_g / M - xhat * sum_gx / M));
                    }
                } else {
                    for (size_t i = 0; i < plane; ++i) gi[i] = static_cast<S>(gm * invstd * g[i]);
                }
            }
        }
        return gin;
    }

    void collect_params(std::vector<Parameter<S>*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_buffers(std::vector<Tensor<S>*>& out) override {
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

    Tensor<S>& running_mean() { return running_mean_; }
    Tensor<S>& running_var() { return running_var_; }

private:
    size_t ch_;
    double momentum_, eps_;
    Parameter<S> gamma_, beta_;
    Tensor<S> running_mean_, running_var_;
    Tensor<S> cached_in_;
    std::vector<double> mean_, invstd_;
    bool trained_forward_ = false;
};

template <typename S>
class Elu : public Layer<S> {
public:
    explicit Elu(double alpha = 1.0) : alpha_(alpha) {}
    const char* kind() const override { return "elu"; }
    Shape out_shape(const Shape& in) const override { return in; }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) {
            const S v = x.data[i];
            y.data[i] = v > 0 ? v : static_cast<S>(alpha_ * (std::exp(static_cast<double>(v)) - 1.0));
        }
        if (ctx.record) cached_out_ = y;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin(gout.shape);
        for (size_t i = 0; i < gout.numel(); ++i) {
            const S y = cached_out_.data[i];
            gin.data[i] = gout.data[i] * (y > 0 ? S(1) : static_cast<S>(y + alpha_));
        }
        return gin;
    }

private:
    double alpha_;
    Tensor<S> cached_out_;
};

template <typename S>
class Square : public Layer<S> {
public:
    const char* kind() const override { return "square"; }
    Shape out_shape(const Shape& in) const override { return in; }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] * x.data[i];
        if (ctx.record) cached_in_ = x;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin(gout.shape);
        for (size_t i = 0; i < gout.numel(); ++i) gin.data[i] = S(2) * cached_in_.data[i] * gout.data[i];
        return gin;
    }

private:
    Tensor<S> cached_in_;
};

// Natural log with a floor: y = ln(max(x, floor)). The floor keeps the
// ShallowNet log stage finite for non-positive pooled powers.
template <typename S>
class LogFloor : public Layer<S> {
public:
    explicit LogFloor(double floor = 1e-6) : floor_(floor) {}
    const char* kind() const override { return "log"; }
    Shape out_shape(const Shape& in) const override { return in; }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(x.shape);
        for (size_t i = 0; i < x.numel(); ++i)
            y.data[i] = static_cast<S>(std::log(std::max(static_cast<double>(x.data[i]), floor_)));
        if (ctx.record) cached_in_ = x;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin(gout.shape);
        for (size_t i = 0; i < gout.numel(); ++i) {
            const double v = cached_in_.data[i];
            gin.data[i] = v > floor_ ? static_cast<S>(gout.data[i] / v) : S(0);
        }
        return gin;
    }

private:
    double floor_;
    Tensor<S> cached_in_;
};

template <typename S>
class AvgPool2d : public Layer<S> {
public:
    AvgPool2d(size_t kh, size_t kw, size_t sh, size_t sw) : kh_(kh), kw_(kw), sh_(sh), sw_(sw) {
        if (sh_ == 0 || sw_ == 0) throw std::invalid_argument("avgpool: stride must be >= 1");
    }
    const char* kind() const override { return "avgpool2d"; }

    Shape out_shape(const Shape& in) const override {
        detail::check_rank4(in, "avgpool2d");
        if (in[2] < kh_ || in[3] < kw_) throw std::invalid_argument("avgpool2d: kernel larger than input");
        return {in[0], in[1], (in[2] - kh_) / sh_ + 1, (in[3] - kw_) / sw_ + 1};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(out_shape(x.shape));
        const size_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        const size_t OH = y.shape[2], OW = y.shape[3];
        const S inv = S(1) / static_cast<S>(kh_ * kw_);
        for (size_t p = 0; p < NC; ++p) {
            const S* in_plane = &x.data[p * H * W];
            S* out_plane = &y.data[p * OH * OW];
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    double acc = 0;
                    for (size_t kh = 0; kh < kh_; ++kh) {
                        const S* row = in_plane + (oh * sh_ + kh) * W + ow * sw_;
                        for (size_t kw = 0; kw < kw_; ++kw) acc += row[kw];
                    }
                    out_plane[oh * OW + ow] = static_cast<S>(acc) * inv;
                }
        }
        if (ctx.record) in_shape_ = x.shape;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin(in_shape_);
        const size_t NC = in_shape_[0] * in_shape_[1], H = in_shape_[2], W = in_shape_[3];
        const size_t OH = gout.shape[2], OW = gout.shape[3];
        const S inv = S(1) / static_cast<S>(kh_ * kw_);
        for (size_t p = 0; p < NC; ++p) {
            const S* g_plane = &gout.data[p * OH * OW];
            S* gin_plane = &gin.data[p * H * W];
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    const S g = g_plane[oh * OW + ow] * inv;
                    for (size_t kh = 0; kh < kh_; ++kh) {
                        S* row = gin_plane + (oh * sh_ + kh) * W + ow * sw_;
                        for (size_t kw = 0; kw < kw_; ++kw) row[kw] += g;
                    }
                }
        }
        return gin;
    }

private:
    size_t kh_, kw_, sh_, sw_;
    Shape in_shape_;
};

template <typename S>
class MaxPool2d : public Layer<S> {
public:
    MaxPool2d(size_t kh, size_t kw, size_t sh, size_t sw) : kh_(kh), kw_(kw), sh_(sh), sw_(sw) {
        if (sh_ == 0 || sw_ == 0) throw std::invalid_argument("maxpool: stride must be >= 1");
    }
    const char* kind() const override { return "maxpool2d"; }

    Shape out_shape(const Shape& in) const override {
        detail::check_rank4(in, "maxpool2d");
        if (in[2] < kh_ || in[3] < kw_) throw std::invalid_argument("maxpool2d: kernel larger than input");
        return {in[0], in[1], (in[2] - kh_) / sh_ + 1, (in[3] - kw_) / sw_ + 1};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(out_shape(x.shape));
        const size_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        const size_t OH = y.shape[2], OW = y.shape[3];
        if (ctx.record) {
            argmax_.assign(y.numel(), 0);
            in_shape_ = x.shape;
        }
        for (size_t p = 0; p < NC; ++p) {
            const S* in_plane = &x.data[p * H * W];
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    S best = in_plane[(oh * sh_) * W + ow * sw_];
                    size_t best_idx = (oh * sh_) * W + ow * sw_;
                    for (size_t kh = 0; kh < kh_; ++kh)
                        for (size_t kw = 0; kw < kw_; ++kw) {
                            const size_t idx = (oh * sh_ + kh) * W + ow * sw_ + kw;
                            if (in_plane[idx] > best) {
                                best = in_plane[idx];
                                best_idx = idx;
                            }
                        }
                    y.data[(p * OH + oh) * OW + ow] = best;
                    if (ctx.record) argmax_[(p * OH + oh) * OW + ow] = best_idx;
                }
        }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin(in_shape_);
        const size_t NC = in_shape_[0] * in_shape_[1], H = in_shape_[2], W = in_shape_[3];
        const size_t OHW = gout.shape[2] * gout.shape[3];
        for (size_t p = 0; p < NC; ++p)
            for (size_t i = 0; i < OHW; ++i)
                gin.data[p * H * W + argmax_[p * OHW + i]] += gout.data[p * OHW + i];
        return gin;
    }

private:
    size_t kh_, kw_, sh_, sw_;
    Shape in_shape_;
    std::vector<size_t> argmax_;
};

// Inverted dropout: training scales kept units by 1/(1-p), eval is identity.
template <typename S>
class Dropout : public Layer<S> {
public:
    explicit Dropout(double p) : p_(p) {
        if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p must be in [0, 1)");
    }
    const char* kind() const override { return "dropout"; }
    Shape out_shape(const Shape& in) const override { return in; }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        active_ = ctx.training && p_ > 0;
        if (!active_) return x;
        if (!ctx.rng) throw std::logic_error("dropout: training forward needs an rng");
        Tensor<S> y(x.shape);
        mask_.resize(x.numel());
        const S scale = S(1) / static_cast<S>(1 - p_);
        for (size_t i = 0; i < x.numel(); ++i) {
            mask_[i] = ctx.rng->uniform() >= p_ ? scale : S(0);
            y.data[i] = x.data[i] * mask_[i];
        }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        if (!active_) return gout;
        Tensor<S> gin(gout.shape);
        for (size_t i = 0; i < gout.numel(); ++i) gin.data[i] = gout.data[i] * mask_[i];
        return gin;
    }

    double probability() const { return p_; }
    double max_dropout() const override { return p_; }

private:
    double p_;
    bool active_ = false;
    std::vector<S> mask_;
};

template <typename S>
class Flatten : public Layer<S> {
public:
    const char* kind() const override { return "flatten"; }
    Shape out_shape(const Shape& in) const override {
        size_t d = 1;
        for (size_t i = 1; i < in.size(); ++i) d *= in[i];
        return {in[0], d};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        if (ctx.record) in_shape_ = x.shape;
        Tensor<S> y = x;
        y.shape = out_shape(x.shape);
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> gin = gout;
        gin.shape = in_shape_;
        return gin;
    }

private:
    Shape in_shape_;
};

// Affine map y = x W^T + b on (N, D) inputs.
template <typename S>
class Affine : public Layer<S> {
public:
    Affine(std::string name, size_t in_dim, size_t out_dim)
        : in_dim_(in_dim), out_dim_(out_dim),
          weight_(name + ".weight", Tensor<S>({out_dim, in_dim})),
          bias_(name + ".bias", Tensor<S>({out_dim})) {}

    const char* kind() const override { return "affine"; }

    Shape out_shape(const Shape& in) const override {
        if (in.size() != 2 || in[1] != in_dim_)
            throw std::invalid_argument("affine: expected (N," + std::to_string(in_dim_) + "), got " + shape_str(in));
        return {in[0], out_dim_};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> y(out_shape(x.shape));
        const size_t N = x.shape[0];
        for (size_t n = 0; n < N; ++n) {
            const S* xin = &x.data[n * in_dim_];
            for (size_t o = 0; o < out_dim_; ++o) {
                const S* w = &weight_.value.data[o * in_dim_];
                double acc = bias_.value.data[o];
                for (size_t i = 0; i < in_dim_; ++i) acc += static_cast<double>(w[i]) * xin[i];
                y.data[n * out_dim_ + o] = static_cast<S>(acc);
            }
        }
        if (ctx.record) cached_in_ = x;
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        if (cached_in_.numel() == 0) throw std::logic_error("affine: backward before recorded forward");
        const Tensor<S>& x = cached_in_;
        const size_t N = x.shape[0];
        Tensor<S> gin(x.shape);
        for (size_t n = 0; n < N; ++n) {
            const S* g = &gout.data[n * out_dim_];
            const S* xin = &x.data[n * in_dim_];
            S* gi = &gin.data[n * in_dim_];
            for (size_t o = 0; o < out_dim_; ++o) {
                const S go = g[o];
                const S* w = &weight_.value.data[o * in_dim_];
                S* gw = &weight_.grad.data[o * in_dim_];
                for (size_t i = 0; i < in_dim_; ++i) {
                    gi[i] += w[i] * go;
                    gw[i] += xin[i] * go;
                }
                bias_.grad.data[o] += go;
            }
        }
        return gin;
    }

    void collect_params(std::vector<Parameter<S>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Parameter<S>& weight() { return weight_; }
    Parameter<S>& bias() { return bias_; }
    size_t in_dim() const { return in_dim_; }
    size_t out_dim() const { return out_dim_; }

private:
    size_t in_dim_, out_dim_;
    Parameter<S> weight_, bias_;
    Tensor<S> cached_in_;
};

template <typename S>
class Sequential : public Layer<S> {
public:
    Sequential() = default;
    const char* kind() const override { return "sequential"; }

    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    Shape out_shape(const Shape& in) const override {
        Shape s = in;
        for (const auto& l : layers_) s = l->out_shape(s);
        return s;
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        Tensor<S> h = x;
        for (auto& l : layers_) h = l->forward(h, ctx);
        return h;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        Tensor<S> g = gout;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
        return g;
    }

    void collect_params(std::vector<Parameter<S>*>& out) override {
        for (auto& l : layers_) l->collect_params(out);
    }
    void collect_buffers(std::vector<Tensor<S>*>& out) override {
        for (auto& l : layers_) l->collect_buffers(out);
    }

    double max_dropout() const override {
        double p = 0;
        for (const auto& l : layers_) p = std::max(p, l->max_dropout());
        return p;
    }

    size_t size() const { return layers_.size(); }
    Layer<S>& layer(size_t i) { return *layers_.at(i); }
    bool empty() const { return layers_.empty(); }

private:
    std::vector<std::unique_ptr<Layer<S>>> layers_;
};

// Runs branches on the same input and concatenates their outputs along the
// channel axis (used by the inception blocks).
template <typename S>
class BranchConcat : public Layer<S> {
public:
    const char* kind() const override { return "branch_concat"; }

    Sequential<S>& add_branch() {
        branches_.push_back(std::make_unique<Sequential<S>>());
        return *branches_.back();
    }

    Shape out_shape(const Shape& in) const override {
        detail::check_rank4(in, "branch_concat");
        Shape first = branches_.at(0)->out_shape(in);
        size_t channels = first[1];
        for (size_t b = 1; b < branches_.size(); ++b) {
            Shape s = branches_[b]->out_shape(in);
            if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3])
                throw std::invalid_argument("branch_concat: branch output shapes incompatible");
            channels += s[1];
        }
        return {first[0], channels, first[2], first[3]};
    }

    Tensor<S> forward(const Tensor<S>& x, RunContext& ctx) override {
        std::vector<Tensor<S>> outs;
        outs.reserve(branches_.size());
        for (auto& b : branches_) outs.push_back(b->forward(x, ctx));
        const size_t N = outs[0].shape[0], H = outs[0].shape[2], W = outs[0].shape[3];
        size_t total_c = 0;
        branch_channels_.clear();
        for (auto& o : outs) {
            branch_channels_.push_back(o.shape[1]);
            total_c += o.shape[1];
        }
        Tensor<S> y({N, total_c, H, W});
        const size_t plane = H * W;
        for (size_t n = 0; n < N; ++n) {
            size_t c_off = 0;
            for (auto& o : outs) {
                const size_t bc = o.shape[1];
                std::copy_n(&o.data[n * bc * plane], bc * plane, &y.data[(n * total_c + c_off) * plane]);
                c_off += bc;
            }
        }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gout) override {
        const size_t N = gout.shape[0], total_c = gout.shape[1], H = gout.shape[2], W = gout.shape[3];
        const size_t plane = H * W;
        Tensor<S> gin;
        size_t c_off = 0;
        for (size_t b = 0; b < branches_.size(); ++b) {
            const size_t bc = branch_channels_[b];
            Tensor<S> gslice({N, bc, H, W});
            for (size_t n = 0; n < N; ++n)
                std::copy_n(&gout.data[(n * total_c + c_off) * plane], bc * plane, &gslice.data[n * bc * plane]);
            Tensor<S> gb = branches_[b]->backward(gslice);
            if (b == 0) {
                gin = std::move(gb);
            } else {
                for (size_t i = 0; i < gin.numel(); ++i) gin.data[i] += gb.data[i];
            }
            c_off += bc;
        }
        return gin;
    }

    void collect_params(std::vector<Parameter<S>*>& out) override {
        for (auto& b : branches_) b->collect_params(out);
    }
    void collect_buffers(std::vector<Tensor<S>*>& out) override {
        for (auto& b : branches_) b->collect_buffers(out);
    }
    double max_dropout() const override {
        double p = 0;
        for (const auto& b : branches_) p = std::max(p, b->max_dropout());
        return p;
    }

private:
    std::vector<std::unique_ptr<Sequential<S>>> branches_;
    std::vector<size_t> branch_channels_;
};

}  // namespace transfergrid
