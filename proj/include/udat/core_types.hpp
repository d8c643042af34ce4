#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "udat/raster.hpp"

namespace udat {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class FormatError : public DataError { public: using DataError::DataError; };
class NotFoundError : public DataError { public: using DataError::DataError; };
class RangeError : public Error { public: using Error::Error; };
class BatchError : public Error { public: using Error::Error; };
class EmptyTrackError : public Error { public: using Error::Error; };

// ---------------------------------------------------------------------------
// BoundingBox
// ---------------------------------------------------------------------------

/// Axis-aligned box, top-left corner plus extent, continuous pixel units.
struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 1.0;
    double h = 1.0;

    [[nodiscard]] constexpr double cx() const noexcept { return x + 0.5 * w; }
    [[nodiscard]] constexpr double cy() const noexcept { return y + 0.5 * h; }
    [[nodiscard]] constexpr double right() const noexcept { return x + w; }
    [[nodiscard]] constexpr double bottom() const noexcept { return y + h; }
    [[nodiscard]] constexpr double area() const noexcept { return w * h; }

    [[nodiscard]] bool valid() const noexcept {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
               w > 0.0 && h > 0.0;
    }

    [[nodiscard]] static constexpr BoundingBox from_center(double cx, double cy, double w,
                                                           double h) noexcept {
        return {cx - 0.5 * w, cy - 0.5 * h, w, h};
    }

    [[nodiscard]] constexpr BoundingBox translated(double dx, double dy) const noexcept {
        return {x + dx, y + dy, w, h};
    }

    friend constexpr bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
    const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    // Areas from the same edge arithmetic as the overlap, so iou(a, a) is exactly 1.
    const double area_a = (a.right() - a.x) * (a.bottom() - a.y);
    const double area_b = (b.right() - b.x) * (b.bottom() - b.y);
    return inter / (area_a + area_b - inter);
}

inline double center_error(const BoundingBox& a, const BoundingBox& b) {
    return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

// ---------------------------------------------------------------------------
// BoxTrack
// ---------------------------------------------------------------------------

enum class Provenance { selected, interpolated, missing };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::selected: return "selected";
        case Provenance::interpolated: return "interpolated";
        case Provenance::missing: return "missing";
    }
    return "missing";
}

inline Provenance provenance_from_string(const std::string& s) {
    if (s == "selected") return Provenance::selected;
    if (s == "interpolated") return Provenance::interpolated;
    if (s == "missing") return Provenance::missing;
    throw FormatError("unknown provenance tag '" + s + "'");
}

/// One optional box per frame, tagged with where it came from.
struct BoxTrack {
    std::vector<std::optional<BoundingBox>> boxes;
    std::vector<Provenance> provenance;

    BoxTrack() = default;
    explicit BoxTrack(std::size_t frames)
        : boxes(frames), provenance(frames, Provenance::missing) {}

    [[nodiscard]] std::size_t size() const noexcept { return boxes.size(); }

    void set(std::size_t t, const BoundingBox& box, Provenance p) {
        boxes.at(t) = box;
        provenance.at(t) = p;
    }

    void clear(std::size_t t) {
        boxes.at(t).reset();
        provenance.at(t) = Provenance::missing;
    }

    [[nodiscard]] std::size_t count(Provenance p) const {
        return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
    }

    /// Checks the box/tag pairing rule.
    [[nodiscard]] bool consistent() const {
        if (boxes.size() != provenance.size()) return false;
        for (std::size_t t = 0; t < boxes.size(); ++t) {
            if (boxes[t].has_value() == (provenance[t] == Provenance::missing)) return false;
            if (boxes[t] && !boxes[t]->valid()) return false;
        }
        return true;
    }

    friend bool operator==(const BoxTrack&, const BoxTrack&) = default;
};

// ---------------------------------------------------------------------------
// FrameSequence
// ---------------------------------------------------------------------------

/// Ordered frames of one video. Frames are referenced by id and materialized
/// on demand through `loader`, so long sequences never sit in memory at once.
struct FrameSequence {
    std::string name;
    std::vector<std::string> frame_ids;
    std::function<Image(std::size_t)> loader;
    std::optional<std::vector<BoundingBox>> ground_truth;
    std::set<std::string> attributes;

    [[nodiscard]] std::size_t size() const noexcept { return frame_ids.size(); }

    [[nodiscard]] Image frame(std::size_t i) const {
        if (i >= frame_ids.size()) throw RangeError("frame index out of range in '" + name + "'");
        if (!loader) throw DataError("sequence '" + name + "' has no frame loader");
        return loader(i);
    }

    void validate() const {
        if (frame_ids.empty()) throw DataError("sequence '" + name + "' has no frames");
        if (ground_truth && ground_truth->size() != frame_ids.size()) {
            throw FormatError("sequence '" + name + "': " + std::to_string(ground_truth->size()) +
                              " ground-truth boxes for " + std::to_string(frame_ids.size()) +
                              " frames");
        }
    }

    /// Builds a sequence whose frames live in memory.
    [[nodiscard]] static FrameSequence in_memory(std::string name, std::vector<Image> frames) {
        FrameSequence seq;
        seq.name = std::move(name);
        seq.frame_ids.reserve(frames.size());
        for (std::size_t i = 0; i < frames.size(); ++i) seq.frame_ids.push_back(std::to_string(i));
        auto shared = std::make_shared<const std::vector<Image>>(std::move(frames));
        seq.loader = [shared](std::size_t i) { return (*shared)[i]; };
        return seq;
    }
};

}  // namespace udat
