#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/error.hpp"
#include "mobileage/image.hpp"
#include "mobileage/rng.hpp"
#include "mobileage/tensor.hpp"

namespace mobileage {

/// Per-channel ImageNet statistics shared by every pipeline.
inline constexpr std::array<float, 3> kNormMean{0.485F, 0.456F, 0.406F};
inline constexpr std::array<float, 3> kNormStd{0.229F, 0.224F, 0.225F};
inline constexpr int kInputSize = 224;

enum class TransformKind { Norm256, Norm256Flip, ResizeColorJitFlipBlur, EvalDeterministic };

inline std::string_view transform_name(TransformKind k)
{
    switch (k) {
    case TransformKind::Norm256: return "norm_256";
    case TransformKind::Norm256Flip: return "norm_256_flip";
    case TransformKind::ResizeColorJitFlipBlur: return "resize_colorjit_flip_blur";
    case TransformKind::EvalDeterministic: return "eval_deterministic";
    }
    return "?";
}

inline TransformKind parse_transform(std::string_view name)
{
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    for (auto k : {TransformKind::Norm256, TransformKind::Norm256Flip, TransformKind::ResizeColorJitFlipBlur,
                   TransformKind::EvalDeterministic})
        if (lower == transform_name(k)) return k;
    throw ConfigError("unknown transform '" + std::string(name) + "'");
}

struct TransformParams {
    int resize = 224;          // shorter side before cropping
    int crop = 224;            // square output side
    double flip_p = 0.0;
    double brightness = 0.0;   // jitter factor drawn from [1-x, 1+x]
    double contrast = 0.0;
    double saturation = 0.0;
    double blur_p = 0.0;
    int blur_kernel = 3;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;

    friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TransformParams, resize, crop, flip_p, brightness, contrast, saturation, blur_p,
                                   blur_kernel, blur_sigma_min, blur_sigma_max)

struct TransformSpec {
    TransformKind kind = TransformKind::EvalDeterministic;
    TransformParams params;

    [[nodiscard]] std::string name() const { return std::string(transform_name(kind)); }
    [[nodiscard]] bool stochastic() const
    {
        return params.flip_p > 0 || params.brightness > 0 || params.contrast > 0 || params.saturation > 0 || params.blur_p > 0;
    }
    friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

/// The named pipelines with their default strengths.
inline TransformSpec make_transform(TransformKind kind)
{
    TransformSpec s{kind, {}};
    switch (kind) {
    case TransformKind::EvalDeterministic: break;
    case TransformKind::Norm256: s.params.resize = 256; break;
    case TransformKind::Norm256Flip:
        s.params.resize = 256;
        s.params.flip_p = 0.5;
        break;
    case TransformKind::ResizeColorJitFlipBlur:
        s.params.brightness = s.params.contrast = s.params.saturation = 0.2;
        s.params.flip_p = 0.5;
        s.params.blur_p = 0.2;
        break;
    }
    return s;
}

inline TransformSpec make_transform(std::string_view name) { return make_transform(parse_transform(name)); }

inline void to_json(nlohmann::json& j, const TransformSpec& s) { j = {{"name", s.name()}, {"params", s.params}}; }
inline void from_json(const nlohmann::json& j, TransformSpec& s)
{
    s.kind = parse_transform(j.at("name").get<std::string>());
    s.params = j.at("params").get<TransformParams>();
}

/// Float HWC image with values in [0, 1].
struct FloatImage {
    int height = 0;
    int width = 0;
    std::vector<float> px;

    FloatImage() = default;
    FloatImage(int h, int w) : height(h), width(w), px(static_cast<std::size_t>(h) * w * 3, 0.0F) {}
    float& at(int y, int x, int c) { return px[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    [[nodiscard]] float at(int y, int x, int c) const { return px[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

namespace transform_ops {

inline FloatImage to_float(const Image& img)
{
    FloatImage out(img.height, img.width);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) out.px[i] = static_cast<float>(img.rgb[i]) / 255.0F;
    return out;
}

/// Bilinear resampling with half-pixel centres (no antialiasing).
inline FloatImage resize(const FloatImage& in, int out_h, int out_w)
{
    if (in.height == out_h && in.width == out_w) return in;
    FloatImage out(out_h, out_w);
    const float sy = static_cast<float>(in.height) / static_cast<float>(out_h);
    const float sx = static_cast<float>(in.width) / static_cast<float>(out_w);
    for (int y = 0; y < out_h; ++y) {
        const float fy = std::max(0.0F, (static_cast<float>(y) + 0.5F) * sy - 0.5F);
        const int y0 = std::min(static_cast<int>(fy), in.height - 1);
        const int y1 = std::min(y0 + 1, in.height - 1);
        const float wy = fy - static_cast<float>(y0);
        for (int x = 0; x < out_w; ++x) {
            const float fx = std::max(0.0F, (static_cast<float>(x) + 0.5F) * sx - 0.5F);
            const int x0 = std::min(static_cast<int>(fx), in.width - 1);
            const int x1 = std::min(x0 + 1, in.width - 1);
            const float wx = fx - static_cast<float>(x0);
            for (int c = 0; c < 3; ++c) {
                const float top = in.at(y0, x0, c) + wx * (in.at(y0, x1, c) - in.at(y0, x0, c));
                const float bot = in.at(y1, x0, c) + wx * (in.at(y1, x1, c) - in.at(y1, x0, c));
                out.at(y, x, c) = top + wy * (bot - top);
            }
        }
    }
    return out;
}

/// Scale the shorter side to `side`, keeping the aspect ratio.
inline FloatImage resize_shorter(const FloatImage& in, int side)
{
    if (in.height <= in.width) {
        const int w = static_cast<int>(std::lround(static_cast<double>(in.width) * side / in.height));
        return resize(in, side, w);
    }
    const int h = static_cast<int>(std::lround(static_cast<double>(in.height) * side / in.width));
    return resize(in, h, side);
}

inline FloatImage center_crop(const FloatImage& in, int side)
{
    if (in.height < side || in.width < side) throw DataError("center crop larger than image");
    const int top = (in.height - side) / 2;
    const int left = (in.width - side) / 2;
    FloatImage out(side, side);
    for (int y = 0; y < side; ++y)
        std::copy_n(&in.px[(static_cast<std::size_t>(top + y) * in.width + left) * 3], side * 3, &out.px[static_cast<std::size_t>(y) * side * 3]);
    return out;
}

inline void hflip(FloatImage& img)
{
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width / 2; ++x)
            for (int c = 0; c < 3; ++c) std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
}

inline float luma(float r, float g, float b) { return 0.299F * r + 0.587F * g + 0.114F * b; }

inline void adjust_brightness(FloatImage& img, float f)
{
    for (auto& v : img.px) v = std::clamp(v * f, 0.0F, 1.0F);
}

inline void adjust_contrast(FloatImage& img, float f)
{
    double sum = 0.0;
    const std::size_t n = img.px.size() / 3;
    for (std::size_t i = 0; i < n; ++i) sum += luma(img.px[3 * i], img.px[3 * i + 1], img.px[3 * i + 2]);
    const auto mean = static_cast<float>(sum / static_cast<double>(n));
    for (auto& v : img.px) v = std::clamp(mean + f * (v - mean), 0.0F, 1.0F);
}

inline void adjust_saturation(FloatImage& img, float f)
{
    const std::size_t n = img.px.size() / 3;
    for (std::size_t i = 0; i < n; ++i) {
        const float g = luma(img.px[3 * i], img.px[3 * i + 1], img.px[3 * i + 2]);
        for (int c = 0; c < 3; ++c) img.px[3 * i + c] = std::clamp(g + f * (img.px[3 * i + c] - g), 0.0F, 1.0F);
    }
}

/// Separable Gaussian blur with reflected borders.
inline void gaussian_blur(FloatImage& img, int kernel, double sigma)
{
    const int r = kernel / 2;
    std::vector<float> w(static_cast<std::size_t>(kernel));
    double total = 0.0;
    for (int i = -r; i <= r; ++i) total += (w[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma))));
    for (auto& v : w) v = static_cast<float>(v / total);
    auto reflect = [](int i, int n) {
        if (n == 1) return 0;
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
        return i;
    };
    FloatImage tmp(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.0F;
                for (int k = -r; k <= r; ++k) acc += w[k + r] * img.at(y, reflect(x + k, img.width), c);
                tmp.at(y, x, c) = acc;
            }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.0F;
                for (int k = -r; k <= r; ++k) acc += w[k + r] * tmp.at(reflect(y + k, img.height), x, c);
                img.at(y, x, c) = acc;
            }
}

/// HWC [0,1] -> normalized CHW tensor.
inline Tensor normalize(const FloatImage& img)
{
    Tensor out({3, img.height, img.width});
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (img.px[i * 3 + c] - kNormMean[c]) / kNormStd[c];
    return out;
}

} // namespace transform_ops

/// Inverse of the channel normalization; returns values in [0, 1] units.
inline Tensor denormalize(const Tensor& chw)
{
    Tensor out = chw;
    const auto plane = static_cast<std::size_t>(chw.dim(1) * chw.dim(2));
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = chw[c * plane + i] * kNormStd[c] + kNormMean[c];
    return out;
}

/// Mirror along the width (last) axis; works for CHW and NCHW tensors.
inline Tensor flip_horizontal(const Tensor& t)
{
    if (t.rank() < 2) throw ConfigError("flip_horizontal needs a tensor of rank >= 2");
    Tensor out = t;
    const auto w = static_cast<std::size_t>(t.shape().back());
    for (std::size_t row = 0; row < t.size() / w; ++row) std::reverse(out.data() + row * w, out.data() + (row + 1) * w);
    return out;
}

/// Apply a pipeline to a decoded RGB image. Stochastic steps draw only from
/// `rng`; eval_deterministic never touches it.
inline Tensor apply(const TransformSpec& spec, const Image& image, Rng& rng)
{
    namespace ops = transform_ops;
    if (image.empty()) throw DataError("cannot transform an empty image");
    const auto& p = spec.params;
    FloatImage img = ops::to_float(image);
    if (spec.kind == TransformKind::EvalDeterministic) {
        img = ops::resize(img, p.crop, p.crop);
    } else if (p.resize == p.crop) {
        img = ops::resize(img, p.crop, p.crop);
    } else {
        img = ops::center_crop(ops::resize_shorter(img, p.resize), p.crop);
    }
    if (spec.kind != TransformKind::EvalDeterministic) {
        if (p.brightness > 0) ops::adjust_brightness(img, static_cast<float>(rng.uniform(1 - p.brightness, 1 + p.brightness)));
        if (p.contrast > 0) ops::adjust_contrast(img, static_cast<float>(rng.uniform(1 - p.contrast, 1 + p.contrast)));
        if (p.saturation > 0) ops::adjust_saturation(img, static_cast<float>(rng.uniform(1 - p.saturation, 1 + p.saturation)));
        if (p.flip_p > 0 && rng.bernoulli(p.flip_p)) ops::hflip(img);
        if (p.blur_p > 0 && rng.bernoulli(p.blur_p)) ops::gaussian_blur(img, p.blur_kernel, rng.uniform(p.blur_sigma_min, p.blur_sigma_max));
    }
    return ops::normalize(img);
}

inline Tensor apply_eval(const Image& image)
{
    Rng unused(0);
    return apply(make_transform(TransformKind::EvalDeterministic), image, unused);
}

} // namespace mobileage
