#pragma once

#include "anonydiff/tensor.hpp"

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

/// H x W x C raster stored row-major (channels innermost). Rendered images are
/// in [-1, 1]; diffusion intermediates reuse the type without a range bound.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c = 3, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    bool operator==(const Image&) const = default;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat binary: ASCII header "IMG v1 H W C\n" followed by little-endian float32 HWC.
void write_image_bin(const std::filesystem::path& path, const Image& img);
Image read_image_bin(const std::filesystem::path& path);

/// 8-bit PNG for viewing; [-1, 1] maps to [0, 255] with round-half-even.
void write_png(const std::filesystem::path& path, const Image& img);
std::uint8_t to_byte(float v);

/// Stacks images into a [C, N, H, W] tensor.
template <class T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
    if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width, c = images[0].channels;
    Tensor<T> t(Shape{c, static_cast<int>(images.size()), h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Image& im = images[n];
        if (im.height != h || im.width != w || im.channels != c) throw ShapeError("images_to_tensor: ragged batch");
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    t.at(ch, static_cast<int>(n), static_cast<std::size_t>(y) * w + x) = static_cast<T>(im.at(y, x, ch));
    }
    return t;
}

template <class T>
Tensor<T> image_to_tensor(const Image& img) {
    return images_to_tensor<T>(std::span<const Image>(&img, 1));
}

template <class T>
Image tensor_to_image(const Tensor<T>& t, int n = 0) {
    Image im(t.shape.h, t.shape.w, t.shape.c);
    for (int ch = 0; ch < t.shape.c; ++ch)
        for (int y = 0; y < t.shape.h; ++y)
            for (int x = 0; x < t.shape.w; ++x)
                im.at(y, x, ch) = static_cast<float>(t.at(ch, n, static_cast<std::size_t>(y) * t.shape.w + x));
    return im;
}

/// Content hash of the raw pixel bytes (hex).
std::string image_hash(const Image& img);

}  // namespace anonydiff
