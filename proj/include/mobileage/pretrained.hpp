#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mobileage/model.hpp"
#include "mobileage/synthetic.hpp"
#include "mobileage/tensor_io.hpp"
#include "mobileage/transforms.hpp"

namespace mobileage {

/// Seeded stand-in for a pretrained backbone asset, used when real weights
/// are not available: He (fan-out) initialized convolutions, unit/zero batch
/// norm affine terms, and running statistics calibrated on synthetic faces so
/// inference-mode normalization is well scaled.
inline TensorArchive make_standin_backbone(const std::string& backbone, std::uint64_t seed, int calibration_images = 32,
                                           int batch = 8)
{
    ModelSpec spec;
    spec.backbone = backbone;
    AgeModel model(spec);
    Rng rng(derive_seed(seed, 0xBAC4B04E));
    for (const auto& p : model.backbone_params()) {
        auto& v = p.param->value;
        if (v.rank() == 4) {
            const double fan_out = static_cast<double>(v.dim(0) * v.dim(2) * v.dim(3));
            const double std = std::sqrt(2.0 / fan_out);
            for (auto& x : v.values()) x = static_cast<float>(std * rng.normal());
        } else if (p.name.ends_with("bias")) {
            v.zero();
        } else {
            v.fill(1.0F);
        }
    }
    for (const auto& b : model.backbone_buffers()) b.tensor->fill(b.name.ends_with("running_var") ? 1.0F : 0.0F);

    // Cumulative running averages over the calibration batches.
    model.set_stage(Stage::Full);
    model.set_mode(Mode::Train);
    const auto plan = synthetic::plan_dataset(static_cast<std::size_t>(calibration_images), derive_seed(seed, 0xCA1));
    int done = 0;
    for (std::size_t start = 0; start < plan.size(); start += static_cast<std::size_t>(batch), ++done) {
        for (auto* bn : model.backbone_norms()) bn->set_momentum(1.0F / static_cast<float>(done + 1));
        std::vector<Tensor> items;
        for (std::size_t i = start; i < std::min(plan.size(), start + static_cast<std::size_t>(batch)); ++i)
            items.push_back(apply_eval(synthetic::render_face(plan[i].age, plan[i].seed)));
        (void)model.forward(stack(items), &rng);
        model.release();
    }
    for (auto* bn : model.backbone_norms()) bn->set_momentum(0.01F);

    TensorArchive out;
    out.metadata = {{"kind", "backbone"}, {"backbone", backbone}, {"source", "seeded stand-in"}, {"seed", seed}};
    out.tensors = model.backbone_state();
    return out;
}

} // namespace mobileage
