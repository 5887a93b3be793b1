#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "mobileage/error.hpp"
#include "mobileage/nn/layers.hpp"

namespace mobileage {

inline constexpr int kFeatureChannels = 960;

/// Inverted-residual table of the large MobileNetV3 variant:
/// in, kernel, expanded, out, squeeze-excite, activation, stride.
inline const std::vector<nn::BottleneckConfig>& mobilenet_v3_large_blocks()
{
    using nn::Act;
    static const std::vector<nn::BottleneckConfig> blocks{
        {16, 3, 16, 16, false, Act::Relu, 1},       {16, 3, 64, 24, false, Act::Relu, 2},
        {24, 3, 72, 24, false, Act::Relu, 1},       {24, 5, 72, 40, true, Act::Relu, 2},
        {40, 5, 120, 40, true, Act::Relu, 1},       {40, 5, 120, 40, true, Act::Relu, 1},
        {40, 3, 240, 80, false, Act::Hardswish, 2}, {80, 3, 200, 80, false, Act::Hardswish, 1},
        {80, 3, 184, 80, false, Act::Hardswish, 1}, {80, 3, 184, 80, false, Act::Hardswish, 1},
        {80, 3, 480, 112, true, Act::Hardswish, 1}, {112, 3, 672, 112, true, Act::Hardswish, 1},
        {112, 5, 672, 160, true, Act::Hardswish, 2}, {160, 5, 960, 160, true, Act::Hardswish, 1},
        {160, 5, 960, 160, true, Act::Hardswish, 1},
    };
    return blocks;
}

/// A small stand-in with the same 960-channel output contract, for fast
/// tests and smoke runs. Not meant for real training.
inline const std::vector<nn::BottleneckConfig>& tiny_blocks()
{
    using nn::Act;
    static const std::vector<nn::BottleneckConfig> blocks{
        {8, 3, 16, 16, true, Act::Hardswish, 2},
        {16, 3, 32, 24, false, Act::Relu, 2},
    };
    return blocks;
}

inline constexpr std::string_view kMobileNetV3Large = "mobilenet_v3_large";
inline constexpr std::string_view kTinyBackbone = "tiny";

inline void validate_backbone_name(std::string_view name)
{
    if (name != kMobileNetV3Large && name != kTinyBackbone)
        throw ConfigError("unknown backbone '" + std::string(name) + "' (expected mobilenet_v3_large or tiny)");
}

/// Stem conv, inverted residual stack and final 1x1 conv to 960 channels.
/// Child indices mirror the usual `features.N` layout.
inline std::unique_ptr<nn::Sequential> make_backbone(std::string_view name)
{
    validate_backbone_name(name);
    const bool large = name == kMobileNetV3Large;
    const auto& blocks = large ? mobilenet_v3_large_blocks() : tiny_blocks();
    auto seq = std::make_unique<nn::Sequential>();
    const int stem = blocks.front().in_ch;
    seq->add<nn::ConvBNAct>(3, stem, 3, large ? 2 : 4, 1, nn::Act::Hardswish);
    for (const auto& b : blocks) seq->add<nn::InvertedResidual>(b);
    seq->add<nn::ConvBNAct>(blocks.back().out_ch, kFeatureChannels, 1, 1, 1, nn::Act::Hardswish);
    return seq;
}

} // namespace mobileage
