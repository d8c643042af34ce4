#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "udat/core_types.hpp"
#include "udat/raster.hpp"

namespace udat::synthetic {

enum class Domain { day, night };

/// Moving bright textured rectangle over a smooth background. Night frames
/// are the same kind of scene passed through a darkening gamma curve plus
/// additive Gaussian noise.
struct SceneConfig {
    int width = 64;
    int height = 64;
    int frames = 16;
    double min_size = 8.0;
    double max_size = 14.0;
    double max_speed = 2.5;     // pixels per frame
    double night_gamma = 2.5;   // I' = 255·(I/255)^γ
    double night_noise = 6.0;   // noise std-dev after darkening
};

inline Image darken(const Image& day, double gamma, double noise_sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    Image out = day;
    for (float& v : out.data) {
        const double d = 255.0 * std::pow(std::clamp(v / 255.0, 0.0, 1.0), gamma);
        v = static_cast<float>(std::clamp(d + (noise_sigma > 0.0 ? noise(rng) : 0.0), 0.0, 255.0));
    }
    return out;
}

inline FrameSequence make_sequence(const std::string& name, Domain domain, const SceneConfig& cfg,
                                   std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const double bg_base = uni(70.0, 130.0);
    const double bg_gx = uni(-0.6, 0.6), bg_gy = uni(-0.6, 0.6);
    const double wave_amp = uni(5.0, 15.0), wave_fx = uni(0.05, 0.2), wave_fy = uni(0.05, 0.2), phase = uni(0, 6.28);
    const double obj_level = uni(200.0, 245.0);
    const double stripe = uni(0.5, 1.5);
    const double w = uni(cfg.min_size, cfg.max_size), h = uni(cfg.min_size, cfg.max_size);
    double x = uni(2.0, cfg.width - w - 2.0), y = uni(2.0, cfg.height - h - 2.0);
    const double angle = uni(0.0, 6.283185307179586);
    const double speed = uni(0.3, 1.0) * cfg.max_speed;
    double vx = speed * std::cos(angle), vy = speed * std::sin(angle);

    std::vector<Image> frames;
    std::vector<BoundingBox> gt;
    for (int t = 0; t < cfg.frames; ++t) {
        Image img(cfg.width, cfg.height, 1);
        for (int py = 0; py < cfg.height; ++py)
            for (int px = 0; px < cfg.width; ++px) {
                double v = bg_base + bg_gx * (px - cfg.width / 2) + bg_gy * (py - cfg.height / 2) +
                           wave_amp * std::sin(wave_fx * px + wave_fy * py + phase);
                // Area coverage of pixel [px,px+1)×[py,py+1) by the object.
                const double cov_x = std::clamp(std::min(px + 1.0, x + w) - std::max<double>(px, x), 0.0, 1.0);
                const double cov_y = std::clamp(std::min(py + 1.0, y + h) - std::max<double>(py, y), 0.0, 1.0);
                const double cov = cov_x * cov_y;
                if (cov > 0.0) {
                    const double tex = 12.0 * std::sin(stripe * (px - x)) * std::cos(stripe * (py - y));
                    v = (1.0 - cov) * v + cov * (obj_level + tex);
                }
                img.at(px, py) = static_cast<float>(std::clamp(v, 0.0, 255.0));
            }
        if (domain == Domain::night) img = darken(img, cfg.night_gamma, cfg.night_noise, rng);
        frames.push_back(std::move(img));
        gt.push_back({x, y, w, h});

        x += vx;
        y += vy;
        if (x < 1.0 || x + w > cfg.width - 1.0) {
            vx = -vx;
            x = std::clamp(x, 1.0, cfg.width - 1.0 - w);
        }
        if (y < 1.0 || y + h > cfg.height - 1.0) {
            vy = -vy;
            y = std::clamp(y, 1.0, cfg.height - 1.0 - h);
        }
    }
    FrameSequence seq = FrameSequence::in_memory(name, std::move(frames));
    seq.ground_truth = std::move(gt);
    return seq;
}

/// `count` sequences named `<prefix>NNN`; sequence i uses seed base_seed·1000003 + i.
inline std::vector<FrameSequence> make_corpus(Domain domain, int count, const SceneConfig& cfg,
                                              std::uint64_t base_seed, const std::string& prefix) {
    std::vector<FrameSequence> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "%03d", i);
        out.push_back(make_sequence(prefix + name, domain, cfg, base_seed * 1000003ULL + static_cast<std::uint64_t>(i)));
    }
    return out;
}

}  // namespace udat::synthetic
