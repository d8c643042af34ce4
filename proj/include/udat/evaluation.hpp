#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "udat/core_types.hpp"
#include "udat/raster.hpp"

namespace udat {

// ---------------------------------------------------------------------------
// One-pass evaluation
// ---------------------------------------------------------------------------

template <class T>
concept Tracker = requires(T t, const Image& img, const BoundingBox& box) {
    { t.init(img, box) };
    { t.update(img) } -> std::convertible_to<BoundingBox>;
};

/// Per-frame predictions of one tracker on one sequence. A failed frame
/// (tracker returned an invalid box) is stored as nullopt and scores as zero
/// overlap and infinite centre error.
struct TrackResult {
    std::string tracker;
    std::string sequence;
    std::vector<std::optional<BoundingBox>> boxes;

    [[nodiscard]] std::size_t size() const noexcept { return boxes.size(); }
};

/// Initializes on frame 0's ground truth, then runs every frame once with no
/// re-initialization.
template <Tracker T>
TrackResult run_ope(const FrameSequence& seq, T& tracker, const std::string& tracker_name = "tracker") {
    seq.validate();
    if (!seq.ground_truth) throw DataError("run_ope: sequence '" + seq.name + "' has no ground truth");
    const auto& gt = *seq.ground_truth;
    TrackResult result{tracker_name, seq.name, {}};
    result.boxes.reserve(seq.size());
    tracker.init(seq.frame(0), gt[0]);
    result.boxes.emplace_back(gt[0]);
    for (std::size_t t = 1; t < seq.size(); ++t) {
        const BoundingBox b = tracker.update(seq.frame(t));
        result.boxes.emplace_back(b.valid() ? std::optional<BoundingBox>(b) : std::nullopt);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b) {
    if (a != b)
        throw DataError("metric: " + std::to_string(a) + " predictions for " + std::to_string(b) + " ground-truth boxes");
    if (a == 0) throw DataError("metric: empty sequence");
}

inline double frame_iou(const std::optional<BoundingBox>& p, const BoundingBox& g) { return p ? iou(*p, g) : 0.0; }

inline double frame_center_error(const std::optional<BoundingBox>& p, const BoundingBox& g) {
    return p ? center_error(*p, g) : std::numeric_limits<double>::infinity();
}

inline double frame_normalized_error(const std::optional<BoundingBox>& p, const BoundingBox& g) {
    if (!p) return std::numeric_limits<double>::infinity();
    return std::hypot((p->cx() - g.cx()) / g.w, (p->cy() - g.cy()) / g.h);
}

}  // namespace detail

using Predictions = std::span<const std::optional<BoundingBox>>;
using GroundTruth = std::span<const BoundingBox>;

inline std::vector<double> per_frame_iou(Predictions pred, GroundTruth gt) {
    detail::check_lengths(pred.size(), gt.size());
    std::vector<double> out(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) out[i] = detail::frame_iou(pred[i], gt[i]);
    return out;
}

/// Fraction of frames whose centre error is at most `threshold` pixels.
inline double precision_at(Predictions pred, GroundTruth gt, double threshold = 20.0) {
    detail::check_lengths(pred.size(), gt.size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += detail::frame_center_error(pred[i], gt[i]) <= threshold;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Like precision_at with the x error divided by the ground-truth width and
/// the y error by its height before taking the norm.
inline double normalized_precision_at(Predictions pred, GroundTruth gt, double threshold = 0.2) {
    detail::check_lengths(pred.size(), gt.size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += detail::frame_normalized_error(pred[i], gt[i]) <= threshold;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline constexpr int kSuccessThresholds = 21;

inline double success_threshold(int k) { return static_cast<double>(k) / (kSuccessThresholds - 1); }

inline std::vector<double> success_curve(Predictions pred, GroundTruth gt) {
    const auto ious = per_frame_iou(pred, gt);
    std::vector<double> curve(kSuccessThresholds);
    for (int k = 0; k < kSuccessThresholds; ++k) {
        const double t = success_threshold(k);
        const auto hit = std::count_if(ious.begin(), ious.end(), [t](double v) { return v >= t; });
        curve[k] = static_cast<double>(hit) / static_cast<double>(ious.size());
    }
    return curve;
}

/// Mean of the success rate over IoU thresholds 0, 0.05, ..., 1.
inline double success_auc(Predictions pred, GroundTruth gt) {
    const auto curve = success_curve(pred, gt);
    return std::accumulate(curve.begin(), curve.end(), 0.0) / kSuccessThresholds;
}

inline std::vector<double> precision_curve(Predictions pred, GroundTruth gt, int max_px = 50) {
    std::vector<double> out;
    for (int t = 0; t <= max_px; ++t) out.push_back(precision_at(pred, gt, t));
    return out;
}

inline std::vector<double> normalized_precision_curve(Predictions pred, GroundTruth gt, int steps = 50) {
    std::vector<double> out;
    for (int k = 0; k <= steps; ++k) out.push_back(normalized_precision_at(pred, gt, 0.5 * k / steps));
    return out;
}

struct MetricSummary {
    double precision = 0.0;
    double norm_precision = 0.0;
    double success = 0.0;
    std::size_t frames = 0;
};

inline MetricSummary summarize(Predictions pred, GroundTruth gt) {
    return {precision_at(pred, gt), normalized_precision_at(pred, gt), success_auc(pred, gt), pred.size()};
}

/// Pools frames from several sequences (frame-weighted).
inline MetricSummary summarize(const std::vector<TrackResult>& results, const std::vector<FrameSequence>& seqs) {
    std::vector<std::optional<BoundingBox>> pred;
    std::vector<BoundingBox> gt;
    for (const auto& r : results) {
        auto it = std::find_if(seqs.begin(), seqs.end(), [&](const FrameSequence& s) { return s.name == r.sequence; });
        if (it == seqs.end() || !it->ground_truth) throw DataError("summarize: no ground truth for '" + r.sequence + "'");
        pred.insert(pred.end(), r.boxes.begin(), r.boxes.end());
        gt.insert(gt.end(), it->ground_truth->begin(), it->ground_truth->end());
    }
    return summarize(pred, gt);
}

// ---------------------------------------------------------------------------
// Illumination attributes
// ---------------------------------------------------------------------------

/// Mean grayscale intensity in the box scaled ×2 about its centre, clipped to
/// the frame. Falls back to the nearest pixel if the clipped region is empty.
inline double illuminance_intensity(const Image& frame, const BoundingBox& box) {
    const Image gray = to_gray(frame);
    const double x0 = std::clamp(box.cx() - box.w, 0.0, static_cast<double>(gray.width));
    const double x1 = std::clamp(box.cx() + box.w, 0.0, static_cast<double>(gray.width));
    const double y0 = std::clamp(box.cy() - box.h, 0.0, static_cast<double>(gray.height));
    const double y1 = std::clamp(box.cy() + box.h, 0.0, static_cast<double>(gray.height));
    // Area-weighted mean over the continuous region.
    double sum = 0.0, area = 0.0;
    const int ix0 = static_cast<int>(std::floor(x0)), ix1 = static_cast<int>(std::ceil(x1));
    const int iy0 = static_cast<int>(std::floor(y0)), iy1 = static_cast<int>(std::ceil(y1));
    for (int y = iy0; y < iy1; ++y) {
        const double fy = std::min(y + 1.0, y1) - std::max(static_cast<double>(y), y0);
        if (fy <= 0.0) continue;
        for (int x = ix0; x < ix1; ++x) {
            const double fx = std::min(x + 1.0, x1) - std::max(static_cast<double>(x), x0);
            if (fx <= 0.0) continue;
            sum += fx * fy * gray.at(x, y);
            area += fx * fy;
        }
    }
    if (area <= 0.0) {
        const int x = std::clamp(static_cast<int>(box.cx()), 0, gray.width - 1);
        const int y = std::clamp(static_cast<int>(box.cy()), 0, gray.height - 1);
        return gray.at(x, y);
    }
    return sum / area;
}

inline constexpr double kLowAmbientThreshold = 20.0;

struct AttributeReport {
    std::string sequence;
    std::vector<double> illuminance;
    double ambient_intensity = 0.0;
    double max_illuminance_difference = 0.0;
    std::set<std::string> labels;  // subset of {LAI, IV}
};

/// LAI when the ambient (mean per-frame) illuminance is below 20; IV when
/// max - min per-frame illuminance exceeds `iv_threshold`.
inline AttributeReport attributes_from_illuminance(std::string name, std::vector<double> illum, double iv_threshold) {
    if (illum.empty()) throw DataError("attributes: no frames");
    AttributeReport rep;
    rep.sequence = std::move(name);
    rep.ambient_intensity = std::accumulate(illum.begin(), illum.end(), 0.0) / static_cast<double>(illum.size());
    const auto [lo, hi] = std::minmax_element(illum.begin(), illum.end());
    rep.max_illuminance_difference = *hi - *lo;
    if (rep.ambient_intensity < kLowAmbientThreshold) rep.labels.insert("LAI");
    if (rep.max_illuminance_difference > iv_threshold) rep.labels.insert("IV");
    rep.illuminance = std::move(illum);
    return rep;
}

inline AttributeReport label_attributes(const FrameSequence& seq, double iv_threshold = 30.0) {
    seq.validate();
    if (!seq.ground_truth) throw DataError("label_attributes: sequence '" + seq.name + "' has no ground truth");
    std::vector<double> illum(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) illum[t] = illuminance_intensity(seq.frame(t), (*seq.ground_truth)[t]);
    return attributes_from_illuminance(seq.name, std::move(illum), iv_threshold);
}

inline constexpr std::size_t kLongTermMinFrames = 1400;

/// Sequences with strictly more than 1400 frames.
inline std::vector<FrameSequence> longterm_subset(const std::vector<FrameSequence>& seqs) {
    std::vector<FrameSequence> out;
    std::copy_if(seqs.begin(), seqs.end(), std::back_inserter(out),
                 [](const FrameSequence& s) { return s.size() > kLongTermMinFrames; });
    return out;
}

// ---------------------------------------------------------------------------
// Feature projection
// ---------------------------------------------------------------------------

struct ProjectedPoint {
    double x = 0.0;
    double y = 0.0;
    std::string tag;
};

/// Centres the flattened features and projects them on their top two
/// principal directions. Each axis is signed so its largest-magnitude
/// coordinate is positive.
inline std::vector<ProjectedPoint> project_features_2d(const std::vector<std::vector<double>>& features,
                                                       const std::vector<std::string>& tags) {
    if (features.size() < 3) throw DataError("project_features_2d: need at least 3 features");
    if (tags.size() != features.size()) throw DataError("project_features_2d: tag count mismatch");
    const auto n = static_cast<Eigen::Index>(features.size());
    const auto d = static_cast<Eigen::Index>(features[0].size());
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(features[i].size()) != d) throw DataError("project_features_2d: shape mismatch");
        for (Eigen::Index j = 0; j < d; ++j) X(i, j) = features[i][j];
    }
    X.rowwise() -= X.colwise().mean();
    // Eigen-decompose the n×n Gram matrix; features are usually wide.
    const Eigen::MatrixXd gram = X * X.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    std::vector<ProjectedPoint> out(features.size());
    for (int axis = 0; axis < 2; ++axis) {
        const Eigen::Index col = n - 1 - axis;  // eigenvalues ascend
        const double lambda = std::max(0.0, eig.eigenvalues()(col));
        Eigen::VectorXd coord = eig.eigenvectors().col(col) * std::sqrt(lambda);
        Eigen::Index arg = 0;
        coord.cwiseAbs().maxCoeff(&arg);
        if (coord(arg) < 0) coord = -coord;
        for (Eigen::Index i = 0; i < n; ++i) (axis == 0 ? out[i].x : out[i].y) = coord(i);
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].tag = tags[i];
    return out;
}

/// Held-out accuracy of an L2-regularized logistic-regression probe that
/// predicts a binary label from a feature vector. Features are standardized
/// with training-split statistics; even/odd indices after a seeded shuffle
/// form the train/test split.
inline double linear_probe_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                    std::uint64_t seed = 0, int epochs = 300, double lr = 0.1, double l2 = 1e-3) {
    if (features.size() != labels.size() || features.size() < 4) throw DataError("linear_probe_accuracy: bad input");
    const std::size_t d = features[0].size();
    std::vector<std::size_t> idx(features.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < idx.size(); ++i) (i % 2 == 0 ? train : test).push_back(idx[i]);

    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (auto i : train)
        for (std::size_t j = 0; j < d; ++j) mu[j] += features[i][j];
    for (double& m : mu) m /= static_cast<double>(train.size());
    for (auto i : train)
        for (std::size_t j = 0; j < d; ++j) sd[j] += (features[i][j] - mu[j]) * (features[i][j] - mu[j]);
    for (double& s : sd) s = std::sqrt(s / static_cast<double>(train.size())) + 1e-8;
    auto x = [&](std::size_t i, std::size_t j) { return (features[i][j] - mu[j]) / sd[j]; };

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    for (int e = 0; e < epochs; ++e) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (auto i : train) {
            double z = b;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x(i, j);
            const double err = 1.0 / (1.0 + std::exp(-z)) - labels[i];
            for (std::size_t j = 0; j < d; ++j) gw[j] += err * x(i, j);
            gb += err;
        }
        const double inv = 1.0 / static_cast<double>(train.size());
        for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] * inv + l2 * w[j]);
        b -= lr * gb * inv;
    }
    std::size_t correct = 0;
    for (auto i : test) {
        double z = b;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * x(i, j);
        correct += ((z > 0.0) ? 1 : 0) == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace udat
