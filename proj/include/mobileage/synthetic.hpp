#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mobileage/dataset.hpp"
#include "mobileage/image.hpp"
#include "mobileage/rng.hpp"

namespace mobileage::synthetic {

/// Integer age from a skewed mixture loosely shaped like in-the-wild face
/// collections: a large young-adult mode, an infant mode and a long tail.
inline double sample_age(Rng& rng)
{
    const double u = rng.uniform();
    double a = 0.0;
    if (u < 0.12) a = std::abs(rng.normal()) * 3.0;
    else if (u < 0.70) a = 28.0 + rng.normal() * 7.0;
    else a = rng.uniform(10.0, 100.0);
    return std::clamp(std::round(a), 0.0, 116.0);
}

/// Procedural face-like RGB image whose appearance drifts with age: eye size
/// shrinks through childhood, forehead lines accumulate, hair greys.
inline Image render_face(double age, std::uint64_t seed, int size = 200)
{
    Rng rng(seed);
    Image img(size, size);
    const double t = std::clamp(age / 100.0, 0.0, 1.0);
    const double bg[3] = {rng.uniform(40, 220), rng.uniform(40, 220), rng.uniform(40, 220)};
    const double tone = rng.uniform(0.55, 1.0);
    const double skin[3] = {235 * tone, 190 * tone, 160 * tone};
    const double grey = std::clamp((age - 30.0) / 50.0, 0.0, 1.0);
    const double hair_base[3] = {rng.uniform(20, 90), rng.uniform(15, 60), rng.uniform(10, 40)};
    const double cx = size * (0.5 + rng.uniform(-0.04, 0.04));
    const double cy = size * (0.55 + rng.uniform(-0.04, 0.04));
    const double rx = size * (0.30 + 0.05 * std::min(age, 18.0) / 18.0);
    const double ry = size * 0.38;
    const double eye_r = size * (0.065 - 0.03 * std::min(age, 20.0) / 20.0);
    const int lines = static_cast<int>(age / 12.0);
    const double noise_amp = 6.0 + 10.0 * t;

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            const double r2 = dx * dx + dy * dy;
            double px[3];
            if (r2 <= 1.0) {
                for (int c = 0; c < 3; ++c) px[c] = skin[c];
                if (dy < -0.35 && dy > -0.75) {
                    for (int k = 0; k < lines; ++k) {
                        const double ly = -0.4 - 0.04 * k;
                        if (std::abs(dy - ly) < 0.008) for (double& v : px) v *= 0.78;
                    }
                }
                for (int side : {-1, 1}) {
                    const double ex = cx + side * rx * 0.42, ey = cy - ry * 0.12;
                    const double d = std::hypot(x - ex, y - ey);
                    if (d < eye_r) px[0] = px[1] = px[2] = d < eye_r * 0.45 ? 25.0 : 245.0;
                }
                if (std::abs(dy - 0.45) < 0.03 && std::abs(dx) < 0.35)
                    px[0] = 150, px[1] = 60, px[2] = 60;
            } else if (r2 <= 1.35 && dy < 0.1) {
                for (int c = 0; c < 3; ++c) px[c] = hair_base[c] + grey * (225.0 - hair_base[c]);
            } else {
                for (int c = 0; c < 3; ++c) px[c] = bg[c];
            }
            const double n = rng.normal() * noise_amp;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(px[c] + n, 0.0, 255.0));
        }
    return img;
}

struct GeneratedSample {
    std::string filename;
    double age;
    std::uint64_t seed;
};

/// Names follow the `age_gender_race_stamp.jpg.chip.jpg` convention.
inline std::vector<GeneratedSample> plan_dataset(std::size_t count, std::uint64_t seed)
{
    Rng rng(derive_seed(seed, 0xA9E));
    std::vector<GeneratedSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double age = sample_age(rng);
        const auto gender = rng.below(2), race = rng.below(5);
        char name[96];
        std::snprintf(name, sizeof(name), "%d_%llu_%llu_2017%010zu.jpg.chip.jpg", static_cast<int>(age),
                      static_cast<unsigned long long>(gender), static_cast<unsigned long long>(race), i);
        out.push_back({name, age, derive_seed(seed, 0xFACE, i)});
    }
    return out;
}

/// Render a planned dataset into `dir` as JPEG files.
inline std::vector<GeneratedSample> write_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                                                  int size = 200)
{
    std::filesystem::create_directories(dir);
    auto plan = plan_dataset(count, seed);
    for (const auto& g : plan) write_image(dir / g.filename, render_face(g.age, g.seed, size));
    return plan;
}

/// In-memory equivalent of write_dataset: samples plus their images.
inline std::vector<Sample> make_memory_dataset(std::size_t count, std::uint64_t seed, MemoryImageSource& images, int size = 200)
{
    std::vector<Sample> samples;
    for (const auto& g : plan_dataset(count, seed)) {
        samples.push_back(make_sample(g.filename, g.filename, g.age));
        images.put(g.filename, render_face(g.age, g.seed, size));
    }
    return samples;
}

} // namespace mobileage::synthetic
