#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "udat/core_types.hpp"
#include "udat/discovery.hpp"
#include "udat/losses.hpp"
#include "udat/model.hpp"
#include "udat/optim.hpp"

namespace udat {

enum class AdaptationMode {
    alternating,   // generator step with D frozen, then D step with G frozen
    grl_combined,  // one backward pass through the reversal layer
};

struct TrainConfig {
    double lambda_adv = 0.01;
    double base_lr_discriminator = 0.005;
    double base_lr_bridging = 0.005;
    double base_lr_backbone = 0.005;
    double poly_power = 0.8;
    int epochs = 20;
    int batch_size = 8;
    double source_label = 1.0;
    double target_label = 0.0;

    bool domain_adaptation = true;  // false: source-only training
    bool random_crop = false;       // target patches from random boxes instead of discovery
    bool freeze_backbone = false;
    AdaptationMode mode = AdaptationMode::alternating;

    int max_frame_gap = 100;
    double search_shift = 0.2;  // max centre jitter, fraction of the search side
    double scale_jitter = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lambda_adv >= 0.0)) throw ConfigError("lambda_adv must be >= 0");
        if (!(base_lr_discriminator > 0.0)) throw ConfigError("base_lr_discriminator must be > 0");
        if (!(base_lr_bridging > 0.0)) throw ConfigError("base_lr_bridging must be > 0");
        if (!(base_lr_backbone > 0.0)) throw ConfigError("base_lr_backbone must be > 0");
        if (!(poly_power >= 0.0)) throw ConfigError("poly_power must be >= 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (max_frame_gap < 0) throw ConfigError("max_frame_gap must be >= 0");
        if (!(search_shift >= 0.0 && search_shift < 0.5)) throw ConfigError("search_shift must lie in [0, 0.5)");
        if (!(scale_jitter >= 0.0 && scale_jitter < 0.5)) throw ConfigError("scale_jitter must lie in [0, 0.5)");
    }
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct SourcePair {
    Image template_patch;
    Image search_patch;
    BoundingBox box;  // ground truth in search-patch coordinates
};

struct TargetPair {
    Image template_patch;
    Image search_patch;
};

struct DomainBatch {
    std::vector<SourcePair> source;
    std::vector<TargetPair> target;
};

/// Unlabelled target sequence together with the boxes used to crop it
/// (discovered or random).
struct TargetClip {
    FrameSequence sequence;
    BoxTrack track;
};

struct TrainingCorpus {
    std::vector<FrameSequence> source;  // ground truth required
    std::vector<TargetClip> target;
};

namespace detail {

template <class Rng>
std::pair<std::size_t, std::size_t> sample_frame_pair(const std::vector<std::size_t>& usable, int max_gap, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    const std::size_t a = usable[pick(rng)];
    std::vector<std::size_t> near;
    for (std::size_t f : usable)
        if ((f > a ? f - a : a - f) <= static_cast<std::size_t>(max_gap)) near.push_back(f);
    std::uniform_int_distribution<std::size_t> pick_b(0, near.size() - 1);
    return {a, near[pick_b(rng)]};
}

/// Search crop around `box` with random centre shift and scale jitter.
/// Returns the patch and the crop frame (centre, side).
template <class Rng>
std::pair<Image, std::array<double, 3>> jittered_search(const Image& frame, const BoundingBox& box,
                                                        const CropGeometry& geo, const TrainConfig& cfg, Rng& rng) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double side = geo.search_side(box) * (1.0 + cfg.scale_jitter * unit(rng));
    const double cx = box.cx() + cfg.search_shift * side * unit(rng);
    const double cy = box.cy() + cfg.search_shift * side * unit(rng);
    return {crop_square(frame, cx, cy, side, geo.search_size), {cx, cy, side}};
}

}  // namespace detail

template <class Rng>
SourcePair sample_source_pair(const FrameSequence& seq, const CropGeometry& geo, const TrainConfig& cfg, Rng& rng) {
    if (!seq.ground_truth) throw DataError("source sequence '" + seq.name + "' has no ground truth");
    std::vector<std::size_t> frames(seq.size());
    std::iota(frames.begin(), frames.end(), std::size_t{0});
    const auto [a, b] = detail::sample_frame_pair(frames, cfg.max_frame_gap, rng);
    const auto& gt = *seq.ground_truth;
    SourcePair pair;
    pair.template_patch = crop_template(seq.frame(a), gt[a], geo);
    auto [search, frame] = detail::jittered_search(seq.frame(b), gt[b], geo, cfg, rng);
    pair.search_patch = std::move(search);
    pair.box = to_patch_coords(gt[b], frame[0], frame[1], frame[2], geo.search_size);
    return pair;
}

template <class Rng>
TargetPair sample_target_pair(const TargetClip& clip, const CropGeometry& geo, const TrainConfig& cfg, Rng& rng) {
    std::vector<std::size_t> frames;
    for (std::size_t t = 0; t < clip.track.size(); ++t)
        if (clip.track.boxes[t]) frames.push_back(t);
    if (frames.empty()) throw DataError("target clip '" + clip.sequence.name + "' has no boxes");
    const auto [a, b] = detail::sample_frame_pair(frames, cfg.max_frame_gap, rng);
    TargetPair pair;
    pair.template_patch = crop_template(clip.sequence.frame(a), *clip.track.boxes[a], geo);
    pair.search_patch = detail::jittered_search(clip.sequence.frame(b), *clip.track.boxes[b], geo, cfg, rng).first;
    return pair;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct LossRecord {
    long step = 0;
    double l_gt = 0.0;
    double l_adv = 0.0;
    double l_total = 0.0;
    std::optional<double> l_d;
    double lr = 0.0;
};

/// Network, discriminator and their optimizers.
struct TrainingState {
    SiameseNetwork network;
    Discriminator discriminator;
    Adam generator_opt;  // bridge and head
    Adam backbone_opt;
    Adam discriminator_opt;
    long step = 0;

    TrainingState() = default;
    TrainingState(const ModelConfig& model, std::uint64_t seed)
        : network(model, seed), discriminator(make_discriminator(model, seed)) {}

    /// Parameters moved by the generator phase.
    [[nodiscard]] nn::ParamList generator_parameters(const TrainConfig& cfg) const {
        if (!cfg.freeze_backbone) return network.parameters();
        nn::ParamList out;
        for (auto& p : network.parameters())
            if (p.first.rfind("backbone.", 0) != 0) out.push_back(p);
        return out;
    }
};

struct LearningRates {
    double generator = 0.0;
    double backbone = 0.0;
    double discriminator = 0.0;
};

inline LearningRates learning_rates(long step, long total_steps, const TrainConfig& cfg) {
    return {poly_lr(step, total_steps, cfg.base_lr_bridging, cfg.poly_power),
            poly_lr(step, total_steps, cfg.base_lr_backbone, cfg.poly_power),
            poly_lr(step, total_steps, cfg.base_lr_discriminator, cfg.poly_power)};
}

namespace detail {

inline void generator_update(TrainingState& state, const TrainConfig& cfg, const LearningRates& lr) {
    nn::ParamList backbone, rest;
    for (auto& p : state.generator_parameters(cfg))
        (p.first.rfind("backbone.", 0) == 0 ? backbone : rest).push_back(p);
    state.generator_opt.step(rest, lr.generator);
    if (!backbone.empty()) state.backbone_opt.step(backbone, lr.backbone);
}

struct EncodedPair {
    FeatureMap tmpl;
    FeatureMap search;
};

}  // namespace detail

/// Called after each parameter update inside train_step with the phase
/// number: 1 generator, 2 discriminator, 0 the single combined update.
using PhaseObserver = std::function<void(int phase)>;

/// One optimization step on a batch. Alternating mode: the generator
/// (backbone, bridge, head) descends L_GT + λ·L_adv with D frozen, then D
/// descends L_D on detached features with the generator frozen. Combined
/// mode: a single backward of L_GT + λ·L_D through the gradient reversal
/// layer updates both sides at once.
inline LossRecord train_step(const DomainBatch& batch, TrainingState& state, const TrainConfig& cfg,
                             const LearningRates& lr, const PhaseObserver& observer = {}) {
    if (batch.source.empty()) throw BatchError("batch has no source pairs");
    const bool adapt = cfg.domain_adaptation;
    if (adapt && batch.target.empty()) throw BatchError("batch has no target pairs");

    const auto& net = state.network;
    const auto& disc = state.discriminator;
    const ResponseGrid grid = net.config().response_grid();
    const nn::ParamList gen_params = state.generator_parameters(cfg);
    const nn::ParamList disc_params = disc.parameters();
    const double inv_src = 1.0 / static_cast<double>(batch.source.size());
    const double inv_tgt = batch.target.empty() ? 0.0 : 1.0 / static_cast<double>(batch.target.size());

    LossRecord rec;
    rec.step = state.step;
    rec.lr = lr.generator;

    std::vector<detail::EncodedPair> src_feats, tgt_feats;
    std::optional<nn::FreezeGuard> frozen_backbone;
    if (cfg.freeze_backbone) frozen_backbone.emplace(net.backbone_parameters());

    if (cfg.mode == AdaptationMode::alternating || !adapt) {
        // Phase 1: generator.
        nn::zero_grad(gen_params);
        std::vector<Var> gt_terms, adv_terms;
        // D stays frozen through the backward pass as well.
        std::optional<nn::FreezeGuard> freeze_d(std::in_place, disc_params);
        {
            for (const auto& p : batch.source) {
                auto fw = net.forward(image_to_tensor(p.template_patch), image_to_tensor(p.search_patch));
                gt_terms.push_back(tracking_loss(fw.head, p.box, grid).total);
                if (adapt) src_feats.push_back({fw.tmpl.bridged, fw.search.bridged});
            }
            if (adapt) {
                for (const auto& p : batch.target) {
                    auto z = net.features(image_to_tensor(p.template_patch), FeatureRole::bridged_template);
                    auto x = net.features(image_to_tensor(p.search_patch), FeatureRole::bridged_search);
                    adv_terms.push_back(adversarial_loss(disc(x.bridged, false), disc(z.bridged, false), cfg.source_label));
                    tgt_feats.push_back({z.bridged, x.bridged});
                }
            }
        }
        const Var l_gt = ag::scale(ag::add_n(gt_terms), inv_src);
        const Var l_adv = adapt ? ag::scale(ag::add_n(adv_terms), inv_tgt) : ag::scalar(0.0);
        const Var l_total = adapt ? total_loss(l_gt, l_adv, cfg.lambda_adv) : l_gt;
        ag::backward(l_total);
        freeze_d.reset();
        detail::generator_update(state, cfg, lr);
        if (observer) observer(1);
        rec.l_gt = l_gt->value[0];
        rec.l_adv = l_adv->value[0];
        rec.l_total = total_loss(rec.l_gt, rec.l_adv, cfg.lambda_adv);

        if (adapt) {
            // Phase 2: discriminator on detached features.
            nn::zero_grad(disc_params);
            std::vector<Var> d_terms;
            for (const auto& f : src_feats) {
                DomainScores<Var> s{disc({ag::detach(f.search.data), f.search.role}, false),
                                    disc({ag::detach(f.tmpl.data), f.tmpl.role}, false), nullptr, nullptr};
                d_terms.push_back(ag::add(ag::squared_error_mean(s.source_search, cfg.source_label),
                                          ag::squared_error_mean(s.source_template, cfg.source_label)));
            }
            std::vector<Var> t_terms;
            for (const auto& f : tgt_feats) {
                t_terms.push_back(ag::add(
                    ag::squared_error_mean(disc({ag::detach(f.search.data), f.search.role}, false), cfg.target_label),
                    ag::squared_error_mean(disc({ag::detach(f.tmpl.data), f.tmpl.role}, false), cfg.target_label)));
            }
            const Var l_d = ag::add(ag::scale(ag::add_n(d_terms), inv_src), ag::scale(ag::add_n(t_terms), inv_tgt));
            ag::backward(l_d);
            state.discriminator_opt.step(disc_params, lr.discriminator);
            if (observer) observer(2);
            rec.l_d = l_d->value[0];
        }
    } else {
        // Combined: gradients reach the generator through the reversal layer.
        nn::zero_grad(gen_params);
        nn::zero_grad(disc_params);
        std::vector<Var> gt_terms, src_d, tgt_d;
        double adv_sum = 0.0;
        for (const auto& p : batch.source) {
            auto fw = net.forward(image_to_tensor(p.template_patch), image_to_tensor(p.search_patch));
            gt_terms.push_back(tracking_loss(fw.head, p.box, grid).total);
            src_d.push_back(ag::add(ag::squared_error_mean(disc(fw.search.bridged, true), cfg.source_label),
                                    ag::squared_error_mean(disc(fw.tmpl.bridged, true), cfg.source_label)));
        }
        for (const auto& p : batch.target) {
            auto z = net.features(image_to_tensor(p.template_patch), FeatureRole::bridged_template);
            auto x = net.features(image_to_tensor(p.search_patch), FeatureRole::bridged_search);
            const Var sx = disc(x.bridged, true);
            const Var sz = disc(z.bridged, true);
            adv_sum += adversarial_loss(std::span<const double>(sx->value), std::span<const double>(sz->value),
                                        cfg.source_label);
            tgt_d.push_back(ag::add(ag::squared_error_mean(sx, cfg.target_label),
                                    ag::squared_error_mean(sz, cfg.target_label)));
        }
        const Var l_gt = ag::scale(ag::add_n(gt_terms), inv_src);
        const Var l_d = ag::add(ag::scale(ag::add_n(src_d), inv_src), ag::scale(ag::add_n(tgt_d), inv_tgt));
        ag::backward(ag::add(l_gt, ag::scale(l_d, cfg.lambda_adv)));
        detail::generator_update(state, cfg, lr);
        state.discriminator_opt.step(disc_params, lr.discriminator);
        if (observer) observer(0);
        rec.l_gt = l_gt->value[0];
        rec.l_adv = adv_sum * inv_tgt;
        rec.l_total = total_loss(rec.l_gt, rec.l_adv, cfg.lambda_adv);
        rec.l_d = l_d->value[0];
    }
    ++state.step;
    return rec;
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct TrainingHooks {
    std::function<void(const LossRecord&)> on_step;
    std::function<void(int epoch, const TrainingState&)> on_epoch;
    PhaseObserver on_phase;
};

[[nodiscard]] inline long steps_per_epoch(const TrainingCorpus& corpus, const TrainConfig& cfg) {
    return static_cast<long>((corpus.source.size() + cfg.batch_size - 1) / cfg.batch_size);
}

/// Runs cfg.epochs passes over the source sequences (one pair per sequence
/// per epoch), drawing target pairs round-robin from a shuffled target list.
/// Learning rates follow the poly schedule over all steps.
inline std::vector<LossRecord> train(TrainingState& state, const TrainingCorpus& corpus, const TrainConfig& cfg,
                                     const TrainingHooks& hooks = {}) {
    cfg.validate();
    if (corpus.source.empty()) throw BatchError("training corpus has no source sequences");
    if (cfg.domain_adaptation && corpus.target.empty()) throw BatchError("training corpus has no target sequences");
    const auto& mc = state.network.config();
    const CropGeometry geo{mc.template_size, mc.search_size, mc.context_factor};
    std::mt19937_64 rng(cfg.seed * 7919 + 17);
    const long per_epoch = steps_per_epoch(corpus, cfg);
    const long total = per_epoch * cfg.epochs;

    std::vector<std::size_t> src_order(corpus.source.size()), tgt_order(corpus.target.size());
    std::iota(src_order.begin(), src_order.end(), std::size_t{0});
    std::iota(tgt_order.begin(), tgt_order.end(), std::size_t{0});
    std::size_t tgt_cursor = 0;

    std::vector<LossRecord> log;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(src_order.begin(), src_order.end(), rng);
        for (long b = 0; b < per_epoch; ++b, ++step) {
            DomainBatch batch;
            const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t hi = std::min(lo + cfg.batch_size, src_order.size());
            for (std::size_t i = lo; i < hi; ++i)
                batch.source.push_back(sample_source_pair(corpus.source[src_order[i]], geo, cfg, rng));
            if (cfg.domain_adaptation) {
                for (std::size_t i = lo; i < hi; ++i) {
                    if (tgt_cursor == 0) std::shuffle(tgt_order.begin(), tgt_order.end(), rng);
                    batch.target.push_back(sample_target_pair(corpus.target[tgt_order[tgt_cursor]], geo, cfg, rng));
                    tgt_cursor = (tgt_cursor + 1) % tgt_order.size();
                }
            }
            const LossRecord rec = train_step(batch, state, cfg, learning_rates(step, total, cfg), hooks.on_phase);
            log.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
        }
        if (hooks.on_epoch) hooks.on_epoch(epoch, state);
    }
    return log;
}

}  // namespace udat
