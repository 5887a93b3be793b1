#pragma once

// Small models and datasets shared by the unit tests.

#include <filesystem>
#include <memory>

#include "mobileage/dataset.hpp"
#include "mobileage/model.hpp"
#include "mobileage/pretrained.hpp"
#include "mobileage/synthetic.hpp"

namespace fixtures {

using namespace mobileage;

inline const TensorArchive& tiny_backbone()
{
    static const TensorArchive a = make_standin_backbone(std::string(kTinyBackbone), 3, 16, 8);
    return a;
}

inline std::unique_ptr<AgeModel> tiny_model(double dropout = 0.0, std::uint64_t head_seed = 1)
{
    ModelSpec spec;
    spec.backbone = std::string(kTinyBackbone);
    spec.dropout = dropout;
    return build(spec, tiny_backbone().tensors, head_seed);
}

struct SmallData {
    MemoryImageSource images;
    std::vector<Sample> samples;
    std::unique_ptr<SplitDataset> data;
};

/// `n` synthetic faces split 70/10/20 with seed 42.
inline std::unique_ptr<SmallData> small_data(std::size_t n, std::uint64_t seed = 5, int image_size = 64)
{
    auto d = std::make_unique<SmallData>();
    d->samples = synthetic::make_memory_dataset(n, seed, d->images, image_size);
    d->data = std::make_unique<SplitDataset>(d->samples, stratified_split(d->samples, {}, 42));
    return d;
}

inline std::filesystem::path scratch(const std::string& name)
{
    auto d = std::filesystem::temp_directory_path() / ("mobileage_test_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

} // namespace fixtures
