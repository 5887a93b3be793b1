#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/error.hpp"
#include "mobileage/nn/layers.hpp"
#include "mobileage/tensor_io.hpp"

namespace mobileage {

/// Cosine annealing from lr_max at t = 0 to lr_min at t = total.
inline double cosine_lr(std::int64_t t, std::int64_t total, double lr_max, double lr_min)
{
    if (total <= 0) throw ConfigError("cosine schedule needs at least one step");
    if (t < 0 || t > total) throw ConfigError("cosine schedule step out of range");
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

/// Scale all gradients by clip_norm / g when their global L2 norm g exceeds
/// clip_norm. Returns g (before clipping).
inline double clip_gradients(std::span<const std::span<float>> grads, double clip_norm)
{
    double sq = 0.0;
    for (const auto& g : grads)
        for (float v : g) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
    if (norm > clip_norm) {
        const auto scale = static_cast<float>(clip_norm / norm);
        for (const auto& g : grads)
            for (float& v : g) v *= scale;
    }
    return norm;
}

inline double clip_gradients(const std::vector<nn::NamedParam>& params, double clip_norm)
{
    std::vector<std::span<float>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(p.param->grad.values());
    return clip_gradients(grads, clip_norm);
}

struct ParamGroup {
    std::string name;
    std::vector<nn::NamedParam> params;
    double lr = 1e-3;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Decay is skipped for parameters flagged
/// as non-decaying (biases and normalization affine terms).
class AdamW {
public:
    AdamW(std::vector<ParamGroup> groups, AdamWConfig cfg = {}) : groups_(std::move(groups)), cfg_(cfg)
    {
        for (const auto& g : groups_)
            for (const auto& p : g.params) {
                moments_.push_back({Tensor(p.param->value.shape()), Tensor(p.param->value.shape())});
            }
    }

    [[nodiscard]] std::vector<ParamGroup>& groups() noexcept { return groups_; }
    [[nodiscard]] const std::vector<ParamGroup>& groups() const noexcept { return groups_; }
    [[nodiscard]] std::int64_t steps() const noexcept { return step_; }

    void step()
    {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        std::size_t k = 0;
        for (auto& g : groups_) {
            const double lr = g.lr;
            for (auto& np : g.params) {
                auto& [m, v] = moments_[k++];
                auto& w = np.param->value;
                const auto& gr = np.param->grad;
                const auto decay = static_cast<float>(np.param->decay ? 1.0 - lr * cfg_.weight_decay : 1.0);
                const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
                const auto step_size = static_cast<float>(lr / bc1);
                const auto inv_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
                const auto eps = static_cast<float>(cfg_.eps);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    w[i] *= decay;
                    m[i] = b1 * m[i] + (1.0F - b1) * gr[i];
                    v[i] = b2 * v[i] + (1.0F - b2) * gr[i] * gr[i];
                    w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_bc2 + eps);
                }
            }
        }
    }

    /// Moments keyed by parameter name, for resumable checkpoints.
    [[nodiscard]] TensorMap state() const
    {
        TensorMap out;
        std::size_t k = 0;
        for (const auto& g : groups_)
            for (const auto& p : g.params) {
                out.emplace("m/" + p.name, moments_[k].first);
                out.emplace("v/" + p.name, moments_[k].second);
                ++k;
            }
        return out;
    }

    void load_state(const TensorMap& s, std::int64_t steps)
    {
        std::size_t k = 0;
        for (const auto& g : groups_)
            for (const auto& p : g.params) {
                const auto m = s.find("m/" + p.name), v = s.find("v/" + p.name);
                if (m == s.end() || v == s.end()) throw DataError("optimizer state missing for " + p.name);
                moments_[k].first = m->second;
                moments_[k].second = v->second;
                ++k;
            }
        step_ = steps;
    }

private:
    std::vector<ParamGroup> groups_;
    AdamWConfig cfg_;
    std::vector<std::pair<Tensor, Tensor>> moments_;
    std::int64_t step_ = 0;
};

} // namespace mobileage
