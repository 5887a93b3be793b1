#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mobileage/error.hpp"

namespace mobileage {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Dense float32 tensor, row-major. Image batches use NCHW.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0F)
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw ConfigError("tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] float* data() noexcept { return data_.data(); }
    [[nodiscard]] const float* data() const noexcept { return data_.data(); }
    [[nodiscard]] std::span<float> values() noexcept { return data_; }
    [[nodiscard]] std::span<const float> values() const noexcept { return data_; }
    [[nodiscard]] std::vector<float>& storage() noexcept { return data_; }
    [[nodiscard]] const std::vector<float>& storage() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0F); }

    /// Reinterpret with a new shape of equal element count.
    [[nodiscard]] Tensor reshaped(Shape s) const
    {
        if (shape_numel(s) != static_cast<std::int64_t>(data_.size()))
            throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    /// Contiguous view of sample n along the leading axis.
    [[nodiscard]] std::span<const float> slice(std::int64_t n) const
    {
        const auto per = static_cast<std::size_t>(shape_numel(shape_) / shape_.at(0));
        return std::span<const float>(data_).subspan(static_cast<std::size_t>(n) * per, per);
    }
    [[nodiscard]] std::span<float> slice(std::int64_t n)
    {
        const auto per = static_cast<std::size_t>(shape_numel(shape_) / shape_.at(0));
        return std::span<float>(data_).subspan(static_cast<std::size_t>(n) * per, per);
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// Stack equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items)
{
    if (items.empty()) throw ConfigError("cannot stack zero tensors");
    Shape s{static_cast<std::int64_t>(items.size())};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    Tensor out(s);
    auto* dst = out.data();
    for (const auto& t : items) {
        if (t.shape() != items[0].shape())
            throw ConfigError("stack: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(items[0].shape()));
        dst = std::copy(t.data(), t.data() + t.size(), dst);
    }
    return out;
}

} // namespace mobileage
