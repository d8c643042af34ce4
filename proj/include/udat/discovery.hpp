#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "udat/core_types.hpp"
#include "udat/raster.hpp"

namespace udat {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Square crop geometry shared by discovery, training and inference.
struct CropGeometry {
    int template_size = 127;
    int search_size = 255;
    double context_factor = 0.5;

    /// Side of the source region behind a template patch: the box grown by
    /// context_factor·(w+h)/2 on every side, squared up by geometric mean.
    [[nodiscard]] double template_side(const BoundingBox& b) const {
        const double margin = context_factor * (b.w + b.h) * 0.5;
        return std::sqrt((b.w + 2.0 * margin) * (b.h + 2.0 * margin));
    }
    [[nodiscard]] double search_side(const BoundingBox& b) const {
        return template_side(b) * static_cast<double>(search_size) / template_size;
    }

    void validate() const {
        if (template_size <= 0 || search_size <= 0) throw ConfigError("crop sizes must be positive");
        if (template_size >= search_size) throw ConfigError("template_size must be smaller than search_size");
        if (!(context_factor > 0.0)) throw ConfigError("context_factor must be positive");
    }
};

/// Maps a box from source coordinates into a crop of side `side` centred on
/// (cx, cy) that was resampled to `out` pixels.
inline BoundingBox to_patch_coords(const BoundingBox& b, double cx, double cy, double side, int out) {
    const double s = out / side;
    return {(b.x - cx) * s + 0.5 * out, (b.y - cy) * s + 0.5 * out, b.w * s, b.h * s};
}

/// Inverse of to_patch_coords.
inline BoundingBox from_patch_coords(const BoundingBox& b, double cx, double cy, double side, int out) {
    const double s = side / out;
    return {(b.x - 0.5 * out) * s + cx, (b.y - 0.5 * out) * s + cy, b.w * s, b.h * s};
}

struct DiscoveryConfig {
    double incremental_reward = 1.0;
    double saliency_threshold = 0.5;
    double min_region_area = 16.0;
    std::string enhancement_stage = "gamma";
    std::string saliency_stage = "local_contrast";
    double gamma = 0.4;
    int saliency_window = 0;  // 0: half the shorter frame side
    CropGeometry crop;

    void validate() const {
        if (!(incremental_reward > 0.0)) throw ConfigError("incremental_reward must be > 0");
        if (!(saliency_threshold >= 0.0 && saliency_threshold <= 1.0))
            throw ConfigError("saliency_threshold must lie in [0,1]");
        if (min_region_area < 0.0) throw ConfigError("min_region_area must be >= 0");
        if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
        crop.validate();
    }
};

/// Per-frame candidate boxes.
struct CandidateSet {
    std::vector<std::vector<BoundingBox>> frames;

    CandidateSet() = default;
    explicit CandidateSet(std::size_t n) : frames(n) {}
    [[nodiscard]] std::size_t frame_count() const noexcept { return frames.size(); }
};

// ---------------------------------------------------------------------------
// Pluggable stages
// ---------------------------------------------------------------------------

using EnhancerFn = std::function<Image(const Image&, const DiscoveryConfig&)>;
using SaliencyFn = std::function<Mask(const Image&, const DiscoveryConfig&)>;

inline Image gamma_enhance(const Image& img, double gamma) {
    Image out = img;
    for (float& v : out.data) {
        const double n = std::clamp(static_cast<double>(v) / 255.0, 0.0, 1.0);
        v = static_cast<float>(255.0 * std::pow(n, gamma));
    }
    return out;
}

/// Absolute deviation from a box-filtered local mean, scaled so the maximum
/// is 1. A constant image yields an all-zero map.
inline std::vector<double> local_contrast_map(const Image& img, int window) {
    const Image gray = to_gray(img);
    const int w = gray.width;
    const int h = gray.height;
    const int r = std::max(1, window / 2);
    std::vector<double> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
    auto I = [&](int x, int y) -> double& { return integral[static_cast<std::size_t>(y) * (w + 1) + x]; };
    for (int y = 0; y < h; ++y) {
        double row = 0.0;
        for (int x = 0; x < w; ++x) {
            row += gray.at(x, y);
            I(x + 1, y + 1) = I(x + 1, y) + row;
        }
    }
    std::vector<double> contrast(gray.pixels());
    double peak = 0.0;
    for (int y = 0; y < h; ++y) {
        const int y0 = std::max(0, y - r);
        const int y1 = std::min(h, y + r + 1);
        for (int x = 0; x < w; ++x) {
            const int x0 = std::max(0, x - r);
            const int x1 = std::min(w, x + r + 1);
            const double sum = I(x1, y1) - I(x0, y1) - I(x1, y0) + I(x0, y0);
            const double mean = sum / ((x1 - x0) * (y1 - y0));
            const double c = std::abs(gray.at(x, y) - mean);
            contrast[static_cast<std::size_t>(y) * w + x] = c;
            peak = std::max(peak, c);
        }
    }
    // Sub-0.5 peaks are float noise on a flat image.
    if (peak < 0.5) {
        std::fill(contrast.begin(), contrast.end(), 0.0);
        return contrast;
    }
    for (double& c : contrast) c /= peak;
    return contrast;
}

inline int default_saliency_window(const Image& img, const DiscoveryConfig& cfg) {
    if (cfg.saliency_window > 0) return cfg.saliency_window;
    return std::max(3, std::min(img.width, img.height) / 2);
}

inline Mask local_contrast_saliency(const Image& img, const DiscoveryConfig& cfg) {
    const auto contrast = local_contrast_map(img, default_saliency_window(img, cfg));
    Mask mask(img.width, img.height);
    for (std::size_t i = 0; i < contrast.size(); ++i) {
        mask.data[i] = (contrast[i] > 0.0 && contrast[i] >= cfg.saliency_threshold) ? 1 : 0;
    }
    return mask;
}

/// Name → stage tables. Built-ins are registered on first use; external
/// models can be added under new names at start-up.
class StageRegistry {
public:
    static StageRegistry& instance() {
        static StageRegistry registry;
        return registry;
    }

    void add_enhancer(const std::string& name, EnhancerFn fn) {
        std::lock_guard lock(mutex_);
        enhancers_[name] = std::move(fn);
    }
    void add_saliency(const std::string& name, SaliencyFn fn) {
        std::lock_guard lock(mutex_);
        saliency_[name] = std::move(fn);
    }

    [[nodiscard]] EnhancerFn enhancer(const std::string& name) const {
        std::lock_guard lock(mutex_);
        auto it = enhancers_.find(name);
        if (it == enhancers_.end()) throw ConfigError("unknown enhancement_stage '" + name + "'");
        return it->second;
    }
    [[nodiscard]] SaliencyFn saliency(const std::string& name) const {
        std::lock_guard lock(mutex_);
        auto it = saliency_.find(name);
        if (it == saliency_.end()) throw ConfigError("unknown saliency_stage '" + name + "'");
        return it->second;
    }

private:
    StageRegistry() {
        enhancers_["gamma"] = [](const Image& img, const DiscoveryConfig& c) { return gamma_enhance(img, c.gamma); };
        enhancers_["identity"] = [](const Image& img, const DiscoveryConfig&) { return img; };
        saliency_["local_contrast"] = local_contrast_saliency;
    }

    mutable std::mutex mutex_;
    std::map<std::string, EnhancerFn> enhancers_;
    std::map<std::string, SaliencyFn> saliency_;
};

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline Image enhance_frame(const Image& image, const DiscoveryConfig& config) {
    return StageRegistry::instance().enhancer(config.enhancement_stage)(image, config);
}

inline Mask detect_salient_regions(const Image& image, const DiscoveryConfig& config) {
    return StageRegistry::instance().saliency(config.saliency_stage)(image, config);
}

/// Tight bounding rectangle of every 8-connected mask component whose pixel
/// count reaches min_region_area, in raster order of each component's first
/// pixel. Labelling is two-pass union-find.
inline std::vector<BoundingBox> extract_candidate_boxes(const Mask& mask, const DiscoveryConfig& config) {
    const int w = mask.width;
    const int h = mask.height;
    std::vector<int> label(mask.data.size(), -1);
    std::vector<int> parent;
    auto find = [&](int a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y)) continue;
            int current = -1;
            // Already-visited 8-neighbours: W, NW, N, NE.
            const int nbr[4][2] = {{-1, 0}, {-1, -1}, {0, -1}, {1, -1}};
            for (const auto& d : nbr) {
                const int nx = x + d[0];
                const int ny = y + d[1];
                if (nx < 0 || ny < 0 || nx >= w) continue;
                const int l = label[static_cast<std::size_t>(ny) * w + nx];
                if (l < 0) continue;
                if (current < 0) current = l;
                else unite(current, l);
            }
            if (current < 0) {
                current = static_cast<int>(parent.size());
                parent.push_back(current);
            }
            label[static_cast<std::size_t>(y) * w + x] = current;
        }
    }

    struct Extent {
        int x0, y0, x1, y1;
        std::size_t area;
        std::size_t first;
    };
    std::map<int, Extent> comps;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (label[i] < 0) continue;
            const int root = find(label[i]);
            auto [it, inserted] = comps.try_emplace(root, Extent{x, y, x, y, 0, i});
            Extent& e = it->second;
            e.x0 = std::min(e.x0, x);
            e.y0 = std::min(e.y0, y);
            e.x1 = std::max(e.x1, x);
            e.y1 = std::max(e.y1, y);
            ++e.area;
        }
    }
    std::vector<Extent> ordered;
    for (const auto& [root, e] : comps) ordered.push_back(e);
    std::sort(ordered.begin(), ordered.end(), [](const Extent& a, const Extent& b) { return a.first < b.first; });

    std::vector<BoundingBox> boxes;
    for (const auto& e : ordered) {
        if (static_cast<double>(e.area) < config.min_region_area) continue;
        boxes.push_back({static_cast<double>(e.x0), static_cast<double>(e.y0),
                         static_cast<double>(e.x1 - e.x0 + 1), static_cast<double>(e.y1 - e.y0 + 1)});
    }
    return boxes;
}

// ---------------------------------------------------------------------------
// Box linking
// ---------------------------------------------------------------------------

/// Squared normalized offset plus squared log size ratio, normalized by the
/// reference box. Natural logarithm.
inline double normalized_box_distance(const BoundingBox& current, const BoundingBox& reference) {
    const double dx = (current.x - reference.x) / reference.w;
    const double dy = (current.y - reference.y) / reference.h;
    const double lw = std::log(current.w / reference.w);
    const double lh = std::log(current.h / reference.h);
    return dx * dx + dy * dy + lw * lw + lh * lh;
}

/// Objective of a selection: each selected frame earns the incremental reward
/// and pays the distance to the previously selected box. Frames are summed in
/// order; interpolated frames are ignored.
inline double selection_reward(const BoxTrack& track, const DiscoveryConfig& config) {
    double total = 0.0;
    const BoundingBox* prev = nullptr;
    for (std::size_t t = 0; t < track.size(); ++t) {
        if (track.provenance[t] != Provenance::selected) continue;
        const BoundingBox& box = *track.boxes[t];
        total += prev ? config.incremental_reward - normalized_box_distance(box, *prev)
                      : config.incremental_reward;
        prev = &box;
    }
    return total;
}

/// Picks at most one candidate per frame maximizing selection_reward.
/// Ties resolve toward the earlier frame, then the lower candidate index.
inline BoxTrack select_box_sequence_dp(const CandidateSet& candidates, const DiscoveryConfig& config) {
    const std::size_t frames = candidates.frame_count();
    if (frames == 0) throw EmptyTrackError("candidate set has no frames");
    const double r = config.incremental_reward;

    struct Cell {
        double value;
        int prev_frame;
        int prev_index;
    };
    std::vector<std::vector<Cell>> table(frames);
    int best_frame = -1;
    int best_index = -1;
    double best_value = -std::numeric_limits<double>::infinity();

    for (std::size_t j = 0; j < frames; ++j) {
        const auto& here = candidates.frames[j];
        table[j].resize(here.size());
        for (std::size_t m = 0; m < here.size(); ++m) {
            Cell cell{r, -1, -1};
            for (std::size_t k = 0; k < j; ++k) {
                const auto& there = candidates.frames[k];
                for (std::size_t n = 0; n < there.size(); ++n) {
                    const double v = table[k][n].value + (r - normalized_box_distance(here[m], there[n]));
                    if (v > cell.value) cell = {v, static_cast<int>(k), static_cast<int>(n)};
                }
            }
            table[j][m] = cell;
            if (cell.value > best_value) {
                best_value = cell.value;
                best_frame = static_cast<int>(j);
                best_index = static_cast<int>(m);
            }
        }
    }
    if (best_frame < 0) throw EmptyTrackError("no frame carries a candidate box");

    BoxTrack track(frames);
    for (int f = best_frame, i = best_index; f >= 0;) {
        track.set(static_cast<std::size_t>(f), candidates.frames[f][i], Provenance::selected);
        const Cell& c = table[f][i];
        f = c.prev_frame;
        i = c.prev_index;
    }
    return track;
}

/// Fills missing frames between two selected frames by component-wise linear
/// interpolation of (x, y, w, h). Leading and trailing gaps stay missing.
inline BoxTrack interpolate_missing(const BoxTrack& track) {
    BoxTrack out = track;
    std::optional<std::size_t> last;
    for (std::size_t t = 0; t < track.size(); ++t) {
        if (track.provenance[t] != Provenance::selected) continue;
        if (last && t - *last > 1) {
            const BoundingBox& a = *track.boxes[*last];
            const BoundingBox& b = *track.boxes[t];
            const double span = static_cast<double>(t - *last);
            for (std::size_t u = *last + 1; u < t; ++u) {
                const double f = static_cast<double>(u - *last) / span;
                out.set(u,
                        {a.x + f * (b.x - a.x), a.y + f * (b.y - a.y), a.w + f * (b.w - a.w),
                         a.h + f * (b.h - a.h)},
                        Provenance::interpolated);
            }
        }
        last = t;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

struct PatchPair {
    Image template_patch;
    Image search_patch;
};

inline Image crop_template(const Image& frame, const BoundingBox& box, const CropGeometry& geo) {
    return crop_square(frame, box.cx(), box.cy(), geo.template_side(box), geo.template_size);
}

inline Image crop_search(const Image& frame, const BoundingBox& box, const CropGeometry& geo) {
    return crop_square(frame, box.cx(), box.cy(), geo.search_side(box), geo.search_size);
}

/// Template around box_a and search region around box_b, both cut from the
/// original (un-enhanced) frames.
inline PatchPair crop_training_pair(const Image& frame_a, const BoundingBox& box_a, const Image& frame_b,
                                    const BoundingBox& box_b, const DiscoveryConfig& config) {
    return {crop_template(frame_a, box_a, config.crop), crop_search(frame_b, box_b, config.crop)};
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct DiscoveryResult {
    CandidateSet candidates;
    BoxTrack selected;  // DP output
    BoxTrack track;     // after interpolation
};

inline CandidateSet collect_candidates(const FrameSequence& seq, const DiscoveryConfig& config) {
    CandidateSet cands(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const Image enhanced = enhance_frame(seq.frame(t), config);
        cands.frames[t] = extract_candidate_boxes(detect_salient_regions(enhanced, config), config);
    }
    return cands;
}

inline DiscoveryResult discover_objects(const FrameSequence& seq, const DiscoveryConfig& config) {
    config.validate();
    DiscoveryResult result;
    result.candidates = collect_candidates(seq, config);
    result.selected = select_box_sequence_dp(result.candidates, config);
    result.track = interpolate_missing(result.selected);
    return result;
}

/// Uniformly random boxes, one per frame: the random-cropping replacement for
/// object discovery used by ablations.
template <class Rng>
BoxTrack random_crop_track(std::size_t frames, int width, int height, Rng& rng) {
    BoxTrack track(frames);
    std::uniform_real_distribution<double> frac(0.1, 0.35);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t t = 0; t < frames; ++t) {
        const double w = frac(rng) * width;
        const double h = frac(rng) * height;
        track.set(t, {unit(rng) * (width - w), unit(rng) * (height - h), w, h}, Provenance::selected);
    }
    return track;
}

}  // namespace udat
