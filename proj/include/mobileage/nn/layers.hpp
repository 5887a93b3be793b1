#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mobileage/error.hpp"
#include "mobileage/nn/graph.hpp"
#include "mobileage/nn/kernels.hpp"
#include "mobileage/rng.hpp"
#include "mobileage/tensor.hpp"

namespace mobileage::nn {

/// A learnable tensor and its accumulated gradient.
struct Param {
    Tensor value;
    Tensor grad;
    bool decay = true; // decoupled weight decay applies (weights only)

    Param() = default;
    Param(Shape shape, bool decays) : value(shape), grad(shape), decay(decays) {}
};

struct NamedParam {
    std::string name;
    Param* param;
};

struct NamedBuffer {
    std::string name;
    Tensor* tensor;
};

class BatchNorm2d;

struct StateVisitor {
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    std::vector<BatchNorm2d*> norms;
};

struct ForwardCtx {
    bool train = false;       // dropout active
    bool batch_stats = false; // batch norm uses (and updates) batch statistics
    bool keep = false;        // retain what backward needs
    Rng* rng = nullptr;
};

enum class Act { Identity, Relu, Hardswish, Hardsigmoid };

inline float act_forward(Act a, float x)
{
    switch (a) {
    case Act::Identity: return x;
    case Act::Relu: return x > 0.0F ? x : 0.0F;
    case Act::Hardswish: return x <= -3.0F ? 0.0F : x >= 3.0F ? x : x * (x + 3.0F) / 6.0F;
    case Act::Hardsigmoid: return x <= -3.0F ? 0.0F : x >= 3.0F ? 1.0F : x / 6.0F + 0.5F;
    }
    return x;
}

inline float act_derivative(Act a, float x)
{
    switch (a) {
    case Act::Identity: return 1.0F;
    case Act::Relu: return x > 0.0F ? 1.0F : 0.0F;
    case Act::Hardswish: return x < -3.0F ? 0.0F : x <= 3.0F ? x / 3.0F + 0.5F : 1.0F;
    case Act::Hardsigmoid: return (x > -3.0F && x < 3.0F) ? 1.0F / 6.0F : 0.0F;
    }
    return 1.0F;
}

inline const char* act_op_name(Act a)
{
    switch (a) {
    case Act::Identity: return "Identity";
    case Act::Relu: return "Relu";
    case Act::Hardswish: return "HardSwish";
    case Act::Hardsigmoid: return "HardSigmoid";
    }
    return "Identity";
}

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, const ForwardCtx& ctx) = 0;
    /// Accumulates parameter gradients; returns d(loss)/d(input) when
    /// `need_input_grad`, otherwise an empty tensor.
    virtual Tensor backward(const Tensor& dy, bool need_input_grad) = 0;
    virtual void collect(const std::string& prefix, StateVisitor& v) = 0;
    /// Output shape for an input shape; adds multiply-accumulates to `macs`.
    [[nodiscard]] virtual Shape infer(const Shape& in, std::int64_t& macs) const = 0;
    virtual std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const = 0;
    virtual void release() {}
};

inline std::string join_name(const std::string& prefix, const std::string& leaf)
{
    return prefix.empty() ? leaf : prefix + "." + leaf;
}

// ---------------------------------------------------------------------------

class Conv2d final : public Layer {
public:
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int groups, bool bias)
        : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), groups_(groups), has_bias_(bias),
          weight_({out_ch, in_ch / groups, kernel, kernel}, true)
    {
        if (groups != 1 && !(groups == in_ch && groups == out_ch))
            throw ConfigError("Conv2d supports dense or depthwise grouping only");
        if (bias) bias_ = Param({out_ch}, false);
    }

    [[nodiscard]] int pad() const { return (k_ - 1) / 2; }
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }
    [[nodiscard]] int in_channels() const { return in_; }
    [[nodiscard]] int out_channels() const { return out_; }

    kernels::ConvGeometry geometry(std::int64_t h, std::int64_t w) const
    {
        return {in_, out_, k_, stride_, pad(), groups_, static_cast<int>(h), static_cast<int>(w)};
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        if (x.rank() != 4 || x.dim(1) != in_)
            throw ConfigError("Conv2d expects (N," + std::to_string(in_) + ",H,W), got " + shape_str(x.shape()));
        const auto g = geometry(x.dim(2), x.dim(3));
        const std::int64_t n = x.dim(0);
        Tensor y({n, out_, g.out_h(), g.out_w()});
        std::vector<float> col;
        if (!g.depthwise() && !g.pointwise())
            col.resize(static_cast<std::size_t>(in_) * k_ * k_ * g.out_h() * g.out_w());
        const std::size_t in_per = static_cast<std::size_t>(in_) * g.in_h * g.in_w;
        const std::size_t out_per = static_cast<std::size_t>(out_) * g.out_h() * g.out_w();
        for (std::int64_t i = 0; i < n; ++i) {
            const float* xi = x.data() + i * in_per;
            float* yi = y.data() + i * out_per;
            if (g.depthwise())
                kernels::depthwise_forward(xi, weight_.value.data(), g, yi);
            else
                kernels::dense_forward(xi, weight_.value.data(), g, yi, col.data());
            if (has_bias_) {
                const std::size_t hw = static_cast<std::size_t>(g.out_h()) * g.out_w();
                for (int c = 0; c < out_; ++c) {
                    const float b = bias_.value[c];
                    for (std::size_t p = 0; p < hw; ++p) yi[c * hw + p] += b;
                }
            }
        }
        if (ctx.keep) input_ = x;
        return y;
    }

    Tensor backward(const Tensor& dy, bool need_input_grad) override
    {
        if (input_.empty()) throw Error("Conv2d::backward without a retained forward pass");
        const auto g = geometry(input_.dim(2), input_.dim(3));
        const std::int64_t n = input_.dim(0);
        Tensor dx;
        if (need_input_grad) dx = Tensor(input_.shape());
        std::vector<float> col;
        if (!g.depthwise() && !g.pointwise())
            col.resize(static_cast<std::size_t>(in_) * k_ * k_ * g.out_h() * g.out_w());
        const std::size_t in_per = static_cast<std::size_t>(in_) * g.in_h * g.in_w;
        const std::size_t hw = static_cast<std::size_t>(g.out_h()) * g.out_w();
        const std::size_t out_per = static_cast<std::size_t>(out_) * hw;
        for (std::int64_t i = 0; i < n; ++i) {
            const float* xi = input_.data() + i * in_per;
            const float* dyi = dy.data() + i * out_per;
            float* dxi = need_input_grad ? dx.data() + i * in_per : nullptr;
            if (g.depthwise())
                kernels::depthwise_backward(xi, weight_.value.data(), dyi, g, dxi, weight_.grad.data());
            else
                kernels::dense_backward(xi, weight_.value.data(), dyi, g, dxi, weight_.grad.data(), col.data());
            if (has_bias_)
                for (int c = 0; c < out_; ++c) {
                    float acc = 0.0F;
                    for (std::size_t p = 0; p < hw; ++p) acc += dyi[c * hw + p];
                    bias_.grad[c] += acc;
                }
        }
        return dx;
    }

    void collect(const std::string& prefix, StateVisitor& v) override
    {
        v.params.push_back({join_name(prefix, "weight"), &weight_});
        if (has_bias_) v.params.push_back({join_name(prefix, "bias"), &bias_});
    }

    [[nodiscard]] Shape infer(const Shape& in, std::int64_t& macs) const override
    {
        const auto g = geometry(in[2], in[3]);
        const Shape out{in[0], out_, g.out_h(), g.out_w()};
        macs += std::int64_t{out_} * g.out_h() * g.out_w() * (in_ / groups_) * k_ * k_;
        return out;
    }

    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        std::map<std::string, std::string> w{{"weight", join_name(prefix, "weight")}};
        g.initializer(w["weight"], weight_.value);
        if (has_bias_) {
            w["bias"] = join_name(prefix, "bias");
            g.initializer(w["bias"], bias_.value);
        }
        return g.add("Conv", {in}, w, {{"kernel", k_}, {"stride", stride_}, {"pad", pad()}, {"groups", groups_}});
    }

    void release() override { input_ = Tensor(); }

private:
    int in_, out_, k_, stride_, groups_;
    bool has_bias_;
    Param weight_;
    Param bias_;
    Tensor input_;
};

// ---------------------------------------------------------------------------

/// Batch normalization over (N, H, W) per channel. Running variance uses the
/// unbiased batch estimate; momentum weights the new statistics.
class BatchNorm2d final : public Layer {
public:
    explicit BatchNorm2d(int channels, float eps = 1e-3F, float momentum = 0.01F)
        : c_(channels), eps_(eps), momentum_(momentum), gamma_({channels}, false), beta_({channels}, false),
          running_mean_({channels}, 0.0F), running_var_({channels}, 1.0F)
    {
        gamma_.value.fill(1.0F);
    }

    Param& gamma() { return gamma_; }
    Param& beta() { return beta_; }
    Tensor& running_mean() { return running_mean_; }
    Tensor& running_var() { return running_var_; }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        const std::int64_t n = x.dim(0);
        const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
        Tensor y(x.shape());
        std::vector<float> mean(c_), invstd(c_);
        if (ctx.batch_stats) {
            const double count = static_cast<double>(n) * static_cast<double>(hw);
            for (int c = 0; c < c_; ++c) {
                double s = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const float* p = x.data() + (i * c_ + c) * hw;
                    for (std::size_t k = 0; k < hw; ++k) s += p[k];
                }
                const double m = s / count;
                double ss = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const float* p = x.data() + (i * c_ + c) * hw;
                    for (std::size_t k = 0; k < hw; ++k) {
                        const double d = p[k] - m;
                        ss += d * d;
                    }
                }
                const double var = ss / count;
                mean[c] = static_cast<float>(m);
                invstd[c] = static_cast<float>(1.0 / std::sqrt(var + eps_));
                const double unbiased = count > 1 ? ss / (count - 1) : var;
                running_mean_[c] = static_cast<float>((1.0 - momentum_) * running_mean_[c] + momentum_ * m);
                running_var_[c] = static_cast<float>((1.0 - momentum_) * running_var_[c] + momentum_ * unbiased);
            }
        } else {
            for (int c = 0; c < c_; ++c) {
                mean[c] = running_mean_[c];
                invstd[c] = 1.0F / std::sqrt(running_var_[c] + eps_);
            }
        }
        if (ctx.keep) {
            xhat_ = Tensor(x.shape());
            invstd_ = invstd;
            batch_stats_ = ctx.batch_stats;
        }
        for (std::int64_t i = 0; i < n; ++i)
            for (int c = 0; c < c_; ++c) {
                const std::size_t off = (i * c_ + c) * hw;
                const float m = mean[c], is = invstd[c], ga = gamma_.value[c], be = beta_.value[c];
                for (std::size_t k = 0; k < hw; ++k) {
                    const float xh = (x[off + k] - m) * is;
                    if (ctx.keep) xhat_[off + k] = xh;
                    y[off + k] = xh * ga + be;
                }
            }
        return y;
    }

    Tensor backward(const Tensor& dy, bool need_input_grad) override
    {
        if (xhat_.empty()) throw Error("BatchNorm2d::backward without a retained forward pass");
        const std::int64_t n = dy.dim(0);
        const std::size_t hw = static_cast<std::size_t>(dy.dim(2) * dy.dim(3));
        const double count = static_cast<double>(n) * static_cast<double>(hw);
        Tensor dx;
        if (need_input_grad) dx = Tensor(dy.shape());
        for (int c = 0; c < c_; ++c) {
            double sum_dy = 0.0, sum_dy_xh = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t off = (i * c_ + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    sum_dy += dy[off + k];
                    sum_dy_xh += static_cast<double>(dy[off + k]) * xhat_[off + k];
                }
            }
            gamma_.grad[c] += static_cast<float>(sum_dy_xh);
            beta_.grad[c] += static_cast<float>(sum_dy);
            if (!need_input_grad) continue;
            const float scale = gamma_.value[c] * invstd_[c];
            const auto mean_dy = static_cast<float>(sum_dy / count);
            const auto mean_dy_xh = static_cast<float>(sum_dy_xh / count);
            for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t off = (i * c_ + c) * hw;
                for (std::size_t k = 0; k < hw; ++k)
                    dx[off + k] = batch_stats_ ? scale * (dy[off + k] - mean_dy - xhat_[off + k] * mean_dy_xh) : scale * dy[off + k];
            }
        }
        return dx;
    }

    void collect(const std::string& prefix, StateVisitor& v) override
    {
        v.params.push_back({join_name(prefix, "weight"), &gamma_});
        v.params.push_back({join_name(prefix, "bias"), &beta_});
        v.buffers.push_back({join_name(prefix, "running_mean"), &running_mean_});
        v.buffers.push_back({join_name(prefix, "running_var"), &running_var_});
        v.norms.push_back(this);
    }

    void set_momentum(float m) noexcept { momentum_ = m; }
    [[nodiscard]] float momentum() const noexcept { return momentum_; }
    [[nodiscard]] float eps() const noexcept { return eps_; }

    [[nodiscard]] Shape infer(const Shape& in, std::int64_t&) const override { return in; }

    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        std::map<std::string, std::string> w{{"scale", join_name(prefix, "weight")},
                                             {"bias", join_name(prefix, "bias")},
                                             {"mean", join_name(prefix, "running_mean")},
                                             {"var", join_name(prefix, "running_var")}};
        g.initializer(w["scale"], gamma_.value);
        g.initializer(w["bias"], beta_.value);
        g.initializer(w["mean"], running_mean_);
        g.initializer(w["var"], running_var_);
        return g.add("BatchNormalization", {in}, w, {{"epsilon", eps_}});
    }

    void release() override
    {
        xhat_ = Tensor();
        invstd_.clear();
    }

private:
    int c_;
    float eps_, momentum_;
    Param gamma_, beta_;
    Tensor running_mean_, running_var_;
    Tensor xhat_;
    std::vector<float> invstd_;
    bool batch_stats_ = false;
};

// ---------------------------------------------------------------------------

class Activation final : public Layer {
public:
    explicit Activation(Act a) : act_(a) {}

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = act_forward(act_, x[i]);
        if (ctx.keep) input_ = x;
        return y;
    }

    Tensor backward(const Tensor& dy, bool) override
    {
        Tensor dx(dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * act_derivative(act_, input_[i]);
        return dx;
    }

    void collect(const std::string&, StateVisitor&) override {}
    [[nodiscard]] Shape infer(const Shape& in, std::int64_t&) const override { return in; }
    std::string emit(GraphBuilder& g, const std::string&, const std::string& in) const override
    {
        if (act_ == Act::Identity) return in;
        return g.add(act_op_name(act_), {in});
    }
    void release() override { input_ = Tensor(); }

private:
    Act act_;
    Tensor input_;
};

// ---------------------------------------------------------------------------

/// Ordered container; children are named by index.
class Sequential : public Layer {
public:
    Sequential() = default;

    template <typename L, typename... Args>
    L& add(Args&&... args)
    {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        names_.push_back(std::to_string(layers_.size() - 1));
        return ref;
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        Tensor h = x;
        for (auto& l : layers_) h = l->forward(h, ctx);
        return h;
    }

    Tensor backward(const Tensor& dy, bool need_input_grad) override
    {
        Tensor g = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g, i > 0 || need_input_grad);
        return g;
    }

    void collect(const std::string& prefix, StateVisitor& v) override
    {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(join_name(prefix, names_[i]), v);
    }

    [[nodiscard]] Shape infer(const Shape& in, std::int64_t& macs) const override
    {
        Shape s = in;
        for (const auto& l : layers_) s = l->infer(s, macs);
        return s;
    }

    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        std::string cur = in;
        for (std::size_t i = 0; i < layers_.size(); ++i) cur = layers_[i]->emit(g, join_name(prefix, names_[i]), cur);
        return cur;
    }

    void release() override
    {
        for (auto& l : layers_) l->release();
    }

    [[nodiscard]] std::size_t size() const { return layers_.size(); }
    Layer& at(std::size_t i) { return *layers_.at(i); }

protected:
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<std::string> names_;
};

/// Convolution, batch norm and activation; children named 0 and 1 so that
/// parameter names line up with common checkpoint layouts.
class ConvBNAct final : public Sequential {
public:
    ConvBNAct(int in_ch, int out_ch, int kernel, int stride, int groups, Act act)
    {
        add<Conv2d>(in_ch, out_ch, kernel, stride, groups, false);
        add<BatchNorm2d>(out_ch);
        add<Activation>(act);
    }
    Conv2d& conv() { return static_cast<Conv2d&>(*layers_[0]); }
    BatchNorm2d& bn() { return static_cast<BatchNorm2d&>(*layers_[1]); }
};

// ---------------------------------------------------------------------------

/// Channel attention: global average pool, 1x1 reduce + ReLU, 1x1 expand +
/// hard-sigmoid, multiply.
class SqueezeExcite final : public Layer {
public:
    SqueezeExcite(int channels, int squeeze)
        : c_(channels), fc1_(channels, squeeze, 1, 1, 1, true), fc2_(squeeze, channels, 1, 1, 1, true),
          relu_(Act::Relu), gate_(Act::Hardsigmoid)
    {}

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        const std::int64_t n = x.dim(0);
        const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
        Tensor pooled({n, c_, 1, 1});
        for (std::int64_t i = 0; i < n * c_; ++i) {
            float s = 0.0F;
            for (std::size_t k = 0; k < hw; ++k) s += x[i * hw + k];
            pooled[i] = s / static_cast<float>(hw);
        }
        Tensor g = gate_.forward(fc2_.forward(relu_.forward(fc1_.forward(pooled, ctx), ctx), ctx), ctx);
        Tensor y(x.shape());
        for (std::int64_t i = 0; i < n * c_; ++i)
            for (std::size_t k = 0; k < hw; ++k) y[i * hw + k] = x[i * hw + k] * g[i];
        if (ctx.keep) {
            input_ = x;
            gate_value_ = g;
        }
        return y;
    }

    Tensor backward(const Tensor& dy, bool) override
    {
        const std::int64_t n = dy.dim(0);
        const std::size_t hw = static_cast<std::size_t>(dy.dim(2) * dy.dim(3));
        Tensor dx(dy.shape());
        Tensor dg({n, c_, 1, 1});
        for (std::int64_t i = 0; i < n * c_; ++i) {
            float acc = 0.0F;
            const float gv = gate_value_[i];
            for (std::size_t k = 0; k < hw; ++k) {
                acc += dy[i * hw + k] * input_[i * hw + k];
                dx[i * hw + k] = dy[i * hw + k] * gv;
            }
            dg[i] = acc;
        }
        Tensor dpool = fc1_.backward(relu_.backward(fc2_.backward(gate_.backward(dg, true), true), true), true);
        for (std::int64_t i = 0; i < n * c_; ++i) {
            const float d = dpool[i] / static_cast<float>(hw);
            for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] += d;
        }
        return dx;
    }

    void collect(const std::string& prefix, StateVisitor& v) override
    {
        fc1_.collect(join_name(prefix, "fc1"), v);
        fc2_.collect(join_name(prefix, "fc2"), v);
    }

    [[nodiscard]] Shape infer(const Shape& in, std::int64_t& macs) const override
    {
        Shape p{in[0], in[1], 1, 1};
        (void)fc2_.infer(fc1_.infer(p, macs), macs);
        return in;
    }

    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        auto p = g.add("GlobalAveragePool", {in});
        p = fc1_.emit(g, join_name(prefix, "fc1"), p);
        p = g.add("Relu", {p});
        p = fc2_.emit(g, join_name(prefix, "fc2"), p);
        p = g.add("HardSigmoid", {p});
        return g.add("Mul", {in, p});
    }

    void release() override
    {
        input_ = gate_value_ = Tensor();
        fc1_.release();
        fc2_.release();
        relu_.release();
        gate_.release();
    }

    Conv2d& fc1() { return fc1_; }
    Conv2d& fc2() { return fc2_; }

private:
    int c_;
    Conv2d fc1_, fc2_;
    Activation relu_, gate_;
    Tensor input_, gate_value_;
};

// ---------------------------------------------------------------------------

struct BottleneckConfig {
    int in_ch, kernel, expanded, out_ch;
    bool se;
    Act act;
    int stride;
};

/// Channel counts rounded to a multiple of `divisor`, never dropping more
/// than 10% below the requested value.
constexpr int make_divisible(double v, int divisor = 8)
{
    int nv = std::max(divisor, static_cast<int>(v + divisor / 2.0) / divisor * divisor);
    if (nv < 0.9 * v) nv += divisor;
    return nv;
}

/// Inverted residual: optional 1x1 expansion, depthwise kxk, optional
/// squeeze-excite, linear 1x1 projection, identity shortcut when shapes allow.
class InvertedResidual final : public Layer {
public:
    explicit InvertedResidual(const BottleneckConfig& cfg) : residual_(cfg.stride == 1 && cfg.in_ch == cfg.out_ch)
    {
        if (cfg.expanded != cfg.in_ch) block_.add<ConvBNAct>(cfg.in_ch, cfg.expanded, 1, 1, 1, cfg.act);
        block_.add<ConvBNAct>(cfg.expanded, cfg.expanded, cfg.kernel, cfg.stride, cfg.expanded, cfg.act);
        if (cfg.se) block_.add<SqueezeExcite>(cfg.expanded, make_divisible(cfg.expanded / 4, 8));
        block_.add<ConvBNAct>(cfg.expanded, cfg.out_ch, 1, 1, 1, Act::Identity);
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        Tensor y = block_.forward(x, ctx);
        if (residual_)
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
        return y;
    }

    Tensor backward(const Tensor& dy, bool need_input_grad) override
    {
        Tensor dx = block_.backward(dy, need_input_grad);
        if (residual_ && need_input_grad)
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        return dx;
    }

    void collect(const std::string& prefix, StateVisitor& v) override { block_.collect(join_name(prefix, "block"), v); }
    [[nodiscard]] Shape infer(const Shape& in, std::int64_t& macs) const override { return block_.infer(in, macs); }
    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        auto out = block_.emit(g, join_name(prefix, "block"), in);
        return residual_ ? g.add("Add", {out, in}) : out;
    }
    void release() override { block_.release(); }

private:
    bool residual_;
    Sequential block_;
};

// ---------------------------------------------------------------------------

/// (N, C, H, W) -> (N, C).
class GlobalAvgPool final : public Layer {
public:
    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        const std::int64_t n = x.dim(0), c = x.dim(1);
        const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
        Tensor y({n, c});
        for (std::int64_t i = 0; i < n * c; ++i) {
            float s = 0.0F;
            for (std::size_t k = 0; k < hw; ++k) s += x[i * hw + k];
            y[i] = s / static_cast<float>(hw);
        }
        if (ctx.keep) in_shape_ = x.shape();
        return y;
    }

    Tensor backward(const Tensor& dy, bool) override
    {
        Tensor dx(in_shape_);
        const std::size_t hw = static_cast<std::size_t>(in_shape_[2] * in_shape_[3]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const float d = dy[i] / static_cast<float>(hw);
            std::fill(dx.data() + i * hw, dx.data() + (i + 1) * hw, d);
        }
        return dx;
    }

    void collect(const std::string&, StateVisitor&) override {}
    [[nodiscard]] Shape infer(const Shape& in, std::int64_t&) const override { return {in[0], in[1]}; }
    std::string emit(GraphBuilder& g, const std::string&, const std::string& in) const override
    {
        return g.add("Flatten", {g.add("GlobalAveragePool", {in})});
    }

private:
    Shape in_shape_;
};

/// Fully connected layer, weight (out, in). Rows are processed one at a
/// time so a sample's result never depends on the batch it travels in.
class Linear final : public Layer {
public:
    Linear(int in, int out) : in_(in), out_(out), weight_({out, in}, true), bias_({out}, false) {}

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        if (x.rank() != 2 || x.dim(1) != in_) throw ConfigError("Linear expects (N," + std::to_string(in_) + "), got " + shape_str(x.shape()));
        const std::int64_t n = x.dim(0);
        Tensor y({n, out_});
        kernels::ConstMapMat W(weight_.value.data(), out_, in_);
        kernels::ConstMapVec b(bias_.value.data(), out_);
        for (std::int64_t i = 0; i < n; ++i) {
            kernels::MapVec yi(y.data() + i * out_, out_);
            yi.noalias() = W * kernels::ConstMapVec(x.data() + i * in_, in_);
            yi += b;
        }
        if (ctx.keep) input_ = x;
        return y;
    }

    Tensor backward(const Tensor& dy, bool need_input_grad) override
    {
        const std::int64_t n = dy.dim(0);
        Tensor dx;
        if (need_input_grad) dx = Tensor({n, in_});
        kernels::ConstMapMat W(weight_.value.data(), out_, in_);
        kernels::MapMat dW(weight_.grad.data(), out_, in_);
        kernels::MapVec db(bias_.grad.data(), out_);
        for (std::int64_t i = 0; i < n; ++i) {
            kernels::ConstMapVec dyi(dy.data() + i * out_, out_);
            kernels::ConstMapVec xi(input_.data() + i * in_, in_);
            dW.noalias() += dyi * xi.transpose();
            db += dyi;
            if (need_input_grad) kernels::MapVec(dx.data() + i * in_, in_).noalias() = W.transpose() * dyi;
        }
        return dx;
    }

    void collect(const std::string& prefix, StateVisitor& v) override
    {
        v.params.push_back({join_name(prefix, "weight"), &weight_});
        v.params.push_back({join_name(prefix, "bias"), &bias_});
    }

    [[nodiscard]] Shape infer(const Shape& in, std::int64_t& macs) const override
    {
        macs += std::int64_t{in_} * out_;
        return {in[0], out_};
    }

    std::string emit(GraphBuilder& g, const std::string& prefix, const std::string& in) const override
    {
        const auto wn = join_name(prefix, "weight"), bn = join_name(prefix, "bias");
        g.initializer(wn, weight_.value);
        g.initializer(bn, bias_.value);
        return g.add("Gemm", {in}, {{"weight", wn}, {"bias", bn}});
    }

    void release() override { input_ = Tensor(); }

private:
    int in_, out_;
    Param weight_, bias_;
    Tensor input_;
};

/// Inverted dropout; identity outside training or when p == 0.
class Dropout final : public Layer {
public:
    explicit Dropout(double p) : p_(p)
    {
        if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
    }

    [[nodiscard]] double p() const noexcept { return p_; }
    void set_p(double p) { p_ = p; }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override
    {
        active_ = ctx.train && p_ > 0.0;
        if (!active_) return x;
        if (!ctx.rng) throw Error("dropout in training mode needs an rng");
        mask_ = Tensor(x.shape());
        Tensor y(x.shape());
        const auto scale = static_cast<float>(1.0 / (1.0 - p_));
        for (std::size_t i = 0; i < x.size(); ++i) {
            mask_[i] = ctx.rng->bernoulli(p_) ? 0.0F : scale;
            y[i] = x[i] * mask_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& dy, bool) override
    {
        if (!active_) return dy;
        Tensor dx(dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask_[i];
        return dx;
    }

    void collect(const std::string&, StateVisitor&) override {}
    [[nodiscard]] Shape infer(const Shape& in, std::int64_t&) const override { return in; }
    std::string emit(GraphBuilder&, const std::string&, const std::string& in) const override { return in; }
    void release() override { mask_ = Tensor(); }

private:
    double p_;
    bool active_ = false;
    Tensor mask_;
};

} // namespace mobileage::nn
