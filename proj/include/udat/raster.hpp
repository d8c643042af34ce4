#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace udat {

/// Interleaved (HWC) raster with float samples in [0, 255].
/// Colour images are RGB ordered.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c = 1, float fill = 0.0f)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c),
               fill) {
        if (w <= 0 || h <= 0 || c <= 0) throw std::invalid_argument("image dimensions must be positive");
    }

    [[nodiscard]] bool empty() const noexcept { return data.empty(); }
    [[nodiscard]] std::size_t pixels() const noexcept {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }

    [[nodiscard]] float& at(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    [[nodiscard]] float at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    [[nodiscard]] double channel_mean(int c) const {
        double sum = 0.0;
        for (std::size_t i = c; i < data.size(); i += channels) sum += data[i];
        return pixels() ? sum / static_cast<double>(pixels()) : 0.0;
    }

    [[nodiscard]] double mean() const {
        if (data.empty()) return 0.0;
        return std::accumulate(data.begin(), data.end(), 0.0) / static_cast<double>(data.size());
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Binary mask, row-major, one byte per pixel (0 or 1).
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

    [[nodiscard]] std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] std::size_t count() const {
        return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
    }
};

/// ITU-R 601 luma. Single-channel input is returned unchanged.
inline Image to_gray(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.width, img.height, 1);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        const float* p = &img.data[i * img.channels];
        out.data[i] = img.channels >= 3 ? 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2] : p[0];
    }
    return out;
}

inline std::vector<float> channel_means(const Image& img) {
    std::vector<float> m(img.channels);
    for (int c = 0; c < img.channels; ++c) m[c] = static_cast<float>(img.channel_mean(c));
    return m;
}

/// Samples a square region of side `side` (source pixels) centred on (cx, cy)
/// into an `out`×`out` raster with bilinear interpolation. Sample points that
/// fall outside the source take the matching value from `pad`.
inline Image crop_square(const Image& src, double cx, double cy, double side, int out,
                         std::span<const float> pad) {
    Image dst(out, out, src.channels);
    const double scale = side / out;
    for (int v = 0; v < out; ++v) {
        const double sy = cy + (v + 0.5 - 0.5 * out) * scale;
        for (int u = 0; u < out; ++u) {
            const double sx = cx + (u + 0.5 - 0.5 * out) * scale;
            float* o = &dst.data[(static_cast<std::size_t>(v) * out + u) * src.channels];
            if (sx < 0.0 || sy < 0.0 || sx >= src.width || sy >= src.height) {
                for (int c = 0; c < src.channels; ++c) o[c] = pad[c];
                continue;
            }
            // Pixel i covers [i, i+1); its centre sits at i + 0.5.
            const double px = std::clamp(sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const double py = std::clamp(sy - 0.5, 0.0, static_cast<double>(src.height - 1));
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const int x1 = std::min(x0 + 1, src.width - 1);
            const int y1 = std::min(y0 + 1, src.height - 1);
            const double fx = px - x0;
            const double fy = py - y0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = (1 - fx) * src.at(x0, y0, c) + fx * src.at(x1, y0, c);
                const double bot = (1 - fx) * src.at(x0, y1, c) + fx * src.at(x1, y1, c);
                o[c] = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    }
    return dst;
}

inline Image crop_square(const Image& src, double cx, double cy, double side, int out) {
    const auto pad = channel_means(src);
    return crop_square(src, cx, cy, side, out, pad);
}

}  // namespace udat
