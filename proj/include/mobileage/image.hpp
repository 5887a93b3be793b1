#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mobileage/error.hpp"

namespace mobileage {

/// Interleaved 8-bit RGB image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

    [[nodiscard]] std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    [[nodiscard]] std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    [[nodiscard]] bool empty() const noexcept { return rgb.empty(); }

    friend bool operator==(const Image&, const Image&) = default;
};

class ImageDecodeError : public DataError {
public:
    using DataError::DataError;
};

/// Decode any format OpenCV understands. Grayscale and palette images are
/// expanded to three channels.
inline Image decode_image(const std::filesystem::path& path)
{
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) throw ImageDecodeError("missing image: " + path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty() || bgr.depth() != CV_8U) throw ImageDecodeError("unreadable image: " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    Image img(rgb.cols, rgb.rows);
    for (int y = 0; y < rgb.rows; ++y) {
        const auto* row = rgb.ptr<std::uint8_t>(y);
        std::copy(row, row + static_cast<std::size_t>(rgb.cols) * 3, img.rgb.begin() + static_cast<std::ptrdiff_t>(y) * rgb.cols * 3);
    }
    return img;
}

/// Write an image; the format follows the file extension.
inline void write_image(const std::filesystem::path& path, const Image& img)
{
    cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.rgb.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image: " + path.string());
}

} // namespace mobileage
