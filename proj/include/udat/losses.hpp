#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "udat/autograd.hpp"
#include "udat/core_types.hpp"
#include "udat/model.hpp"

namespace udat {

struct TrackingLossParts {
    Var total;  // classification + regression
    double classification = 0.0;
    double regression = 0.0;
    std::size_t positives = 0;
};

/// Cells whose patch-space position lies inside the box shrunk by
/// `center_ratio` about its centre.
inline std::vector<ag::SideOffsets> positive_cells(const BoundingBox& gt, const ResponseGrid& grid,
                                                   double center_ratio = 0.5) {
    std::vector<ag::SideOffsets> out;
    const double hw = 0.5 * center_ratio * gt.w;
    const double hh = 0.5 * center_ratio * gt.h;
    for (int i = 0; i < grid.map_size; ++i) {
        const double py = grid.coord(i);
        if (std::abs(py - gt.cy()) > hh) continue;
        for (int j = 0; j < grid.map_size; ++j) {
            const double px = grid.coord(j);
            if (std::abs(px - gt.cx()) > hw) continue;
            out.push_back({i * grid.map_size + j, px - gt.x, py - gt.y, gt.right() - px, gt.bottom() - py});
        }
    }
    return out;
}

/// Binary cross-entropy over every response cell (positives: the central
/// region of the ground-truth box) plus mean 1 - IoU over the positives.
/// `gt` is in search-patch coordinates.
inline TrackingLossParts tracking_loss(const HeadOutput& out, const BoundingBox& gt, const ResponseGrid& grid,
                                       double center_ratio = 0.5) {
    if (!gt.valid()) throw DataError("tracking_loss: invalid ground-truth box");
    if (gt.cx() < 0.0 || gt.cy() < 0.0 || gt.cx() >= grid.patch_size || gt.cy() >= grid.patch_size)
        throw DataError("tracking_loss: ground-truth box lies outside the search patch");
    if (out.cls->dim(1) != grid.map_size || out.cls->dim(2) != grid.map_size)
        throw ShapeError("tracking_loss: response map does not match the grid");
    auto pos = positive_cells(gt, grid, center_ratio);
    std::vector<double> labels(out.cls->size(), 0.0);
    for (const auto& p : pos) labels[p.index] = 1.0;
    TrackingLossParts parts;
    parts.positives = pos.size();
    const Var bce = ag::bce_with_logits_mean(out.cls, labels);
    const Var reg = ag::iou_loss_mean(out.reg, std::move(pos));
    parts.classification = bce->value[0];
    parts.regression = reg->value[0];
    parts.total = ag::add(bce, reg);
    return parts;
}

/// Least-squares pull of target-domain scores toward the source label:
/// mean((D(x_t) - ℓ_s)²) + mean((D(z_t) - ℓ_s)²).
inline Var adversarial_loss(const Var& target_search_score, const Var& target_template_score, double source_label) {
    return ag::add(ag::squared_error_mean(target_search_score, source_label),
                   ag::squared_error_mean(target_template_score, source_label));
}

inline double adversarial_loss(std::span<const double> target_search_score,
                               std::span<const double> target_template_score, double source_label) {
    auto term = [&](std::span<const double> s) {
        double acc = 0.0;
        for (double v : s) acc += (v - source_label) * (v - source_label);
        return acc / static_cast<double>(s.size());
    };
    return term(target_search_score) + term(target_template_score);
}

inline double total_loss(double l_gt, double l_adv, double lambda_adv) { return l_gt + lambda_adv * l_adv; }

inline Var total_loss(const Var& l_gt, const Var& l_adv, double lambda_adv) {
    return ag::add(l_gt, ag::scale(l_adv, lambda_adv));
}

/// Discriminator outputs for the four feature groups.
template <class T>
struct DomainScores {
    T source_search;
    T source_template;
    T target_search;
    T target_template;
};

/// Least squares against the true domain labels, four terms summed.
inline Var discriminator_loss(const DomainScores<Var>& s, double source_label, double target_label) {
    return ag::add_n({ag::squared_error_mean(s.source_search, source_label),
                      ag::squared_error_mean(s.source_template, source_label),
                      ag::squared_error_mean(s.target_search, target_label),
                      ag::squared_error_mean(s.target_template, target_label)});
}

inline double discriminator_loss(const DomainScores<std::span<const double>>& s, double source_label,
                                 double target_label) {
    auto term = [](std::span<const double> v, double label) {
        double acc = 0.0;
        for (double x : v) acc += (x - label) * (x - label);
        return acc / static_cast<double>(v.size());
    };
    return term(s.source_search, source_label) + term(s.source_template, source_label) +
           term(s.target_search, target_label) + term(s.target_template, target_label);
}

}  // namespace udat
