#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "udat/core_types.hpp"
#include "udat/discovery.hpp"
#include "udat/model.hpp"

namespace udat {

struct TrackerOptions {
    double window_influence = 0.2;  // blend weight of the cosine window
    double size_lr = 0.3;           // fraction of the predicted size adopted per frame
    double min_size = 2.0;
};

/// Inference wrapper around a trained network: template features are fixed
/// at init; each update crops a search patch about the previous estimate,
/// picks the best cell of the windowed response and decodes its box.
class SiameseTracker {
public:
    SiameseTracker(const SiameseNetwork& net, TrackerOptions opts = {}) : net_(&net), opts_(opts) {
        const auto& c = net.config();
        geo_ = {c.template_size, c.search_size, c.context_factor};
        grid_ = c.response_grid();
        const int m = grid_.map_size;
        window_.resize(static_cast<std::size_t>(m) * m);
        auto hann = [m](int i) {
            return m == 1 ? 1.0 : 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / m);
        };
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) window_[static_cast<std::size_t>(i) * m + j] = hann(i) * hann(j);
    }

    void init(const Image& frame, const BoundingBox& box) {
        if (!box.valid()) throw DataError("tracker init: invalid box");
        box_ = box;
        frame_w_ = frame.width;
        frame_h_ = frame.height;
        template_ = net_->features(image_to_tensor(crop_template(frame, box, geo_)), FeatureRole::bridged_template).bridged;
    }

    [[nodiscard]] BoundingBox update(const Image& frame) {
        if (!template_.data) throw DataError("tracker update before init");
        const double side = geo_.search_side(box_);
        const double cx = box_.cx(), cy = box_.cy();
        const Image patch = crop_square(frame, cx, cy, side, geo_.search_size);
        const auto search = net_->features(image_to_tensor(patch), FeatureRole::bridged_search).bridged;
        const HeadOutput out = net_->predict(template_, search);

        const int m = grid_.map_size;
        std::size_t best = 0;
        double best_score = -1.0;
        for (std::size_t i = 0; i < window_.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-out.cls->value[i]));
            const double s = p * (1.0 - opts_.window_influence) + window_[i] * opts_.window_influence;
            if (s > best_score) {
                best_score = s;
                best = i;
            }
        }
        const BoundingBox local = decode_box(out.reg, grid_, static_cast<int>(best) / m, static_cast<int>(best) % m);
        const BoundingBox pred = from_patch_coords(local, cx, cy, side, geo_.search_size);
        if (!pred.valid()) return pred;
        const double w = std::max(opts_.min_size, (1.0 - opts_.size_lr) * box_.w + opts_.size_lr * pred.w);
        const double h = std::max(opts_.min_size, (1.0 - opts_.size_lr) * box_.h + opts_.size_lr * pred.h);
        const double ncx = std::clamp(pred.cx(), 0.0, static_cast<double>(frame_w_));
        const double ncy = std::clamp(pred.cy(), 0.0, static_cast<double>(frame_h_));
        box_ = BoundingBox::from_center(ncx, ncy, w, h);
        return box_;
    }

private:
    const SiameseNetwork* net_;
    TrackerOptions opts_;
    CropGeometry geo_;
    ResponseGrid grid_;
    std::vector<double> window_;
    FeatureMap template_;
    BoundingBox box_;
    int frame_w_ = 0, frame_h_ = 0;
};

/// Replays stored boxes; the checkpoint-free stand-in used to exercise the
/// evaluation pipeline end to end.
class OracleTracker {
public:
    explicit OracleTracker(std::vector<BoundingBox> boxes) : boxes_(std::move(boxes)) {}

    void init(const Image&, const BoundingBox&) { next_ = 1; }

    [[nodiscard]] BoundingBox update(const Image&) {
        if (next_ >= boxes_.size()) throw DataError("oracle tracker ran past its boxes");
        return boxes_[next_++];
    }

private:
    std::vector<BoundingBox> boxes_;
    std::size_t next_ = 1;
};

}  // namespace udat
