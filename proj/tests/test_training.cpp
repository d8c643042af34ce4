#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "toy.hpp"
#include "udat/udat.hpp"

namespace ag = udat::ag;
using udat::DomainBatch;
using udat::TrainConfig;
using udat::TrainingState;

namespace {

using Snapshot = std::map<std::string, std::vector<double>>;

Snapshot snapshot(const udat::ParamList& params) {
    Snapshot s;
    for (const auto& [name, v] : params) s[name] = v->value;
    return s;
}

udat::ParamList all_parameters(const TrainingState& st) {
    auto out = st.network.parameters();
    for (auto& p : st.discriminator.parameters()) out.push_back(p);
    return out;
}

std::set<std::string> changed(const Snapshot& a, const Snapshot& b) {
    std::set<std::string> out;
    for (const auto& [name, v] : a)
        if (b.at(name) != v) out.insert(name);
    return out;
}

bool is_discriminator(const std::string& name) { return name.rfind("disc.", 0) == 0; }

DomainBatch make_batch(const udat::TrainingCorpus& c, std::uint64_t seed, int n = 2) {
    const auto mc = toy::model();
    const udat::CropGeometry geo{mc.template_size, mc.search_size, mc.context_factor};
    std::mt19937_64 rng(seed);
    TrainConfig cfg;
    DomainBatch b;
    for (int i = 0; i < n; ++i) {
        b.source.push_back(udat::sample_source_pair(c.source[i % c.source.size()], geo, cfg, rng));
        b.target.push_back(udat::sample_target_pair(c.target[i % c.target.size()], geo, cfg, rng));
    }
    return b;
}

const udat::TrainingCorpus& small_corpus() {
    static const udat::TrainingCorpus c = toy::corpus(6, 1);
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST(AdversarialLoss, WorkedExamples) {
    const std::vector<double> one{1.0}, zero{0.0}, half{0.5};
    EXPECT_EQ(udat::adversarial_loss(one, one, 1.0), 0.0);
    EXPECT_NEAR(udat::adversarial_loss(zero, zero, 1.0), 2.0, 1e-12);
    EXPECT_NEAR(udat::adversarial_loss(half, one, 1.0), 0.25, 1e-12);
    // Graph form agrees with the scalar form.
    const auto v = udat::adversarial_loss(ag::constant({1}, {0.5}), ag::constant({1}, {1.0}), 1.0);
    EXPECT_NEAR(v->value[0], 0.25, 1e-12);
}

TEST(AdversarialLoss, MeansOverElements) {
    const std::vector<double> s{0.0, 1.0, 0.5, 0.5}, t{1.0, 1.0};
    EXPECT_NEAR(udat::adversarial_loss(s, t, 1.0), (1.0 + 0.0 + 0.25 + 0.25) / 4.0, 1e-15);
}

TEST(DiscriminatorLoss, WorkedExamples) {
    using S = std::span<const double>;
    const std::vector<double> one{1.0}, zero{0.0}, half{0.5};
    EXPECT_EQ(udat::discriminator_loss(udat::DomainScores<S>{one, one, zero, zero}, 1.0, 0.0), 0.0);
    EXPECT_NEAR(udat::discriminator_loss(udat::DomainScores<S>{half, half, half, half}, 1.0, 0.0), 1.0, 1e-12);
    EXPECT_NEAR(udat::discriminator_loss(udat::DomainScores<S>{zero, zero, one, one}, 1.0, 0.0), 4.0, 1e-12);
    const auto g = udat::discriminator_loss(
        udat::DomainScores<ag::Var>{ag::constant({1}, {0.5}), ag::constant({1}, {0.5}), ag::constant({1}, {0.5}),
                                    ag::constant({1}, {0.5})},
        1.0, 0.0);
    EXPECT_NEAR(g->value[0], 1.0, 1e-12);
}

TEST(LeastSquaresLosses, NonNegativeAndZeroOnlyAtLabels) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int i = 0; i < 200; ++i) {
        const std::vector<double> a{u(rng)}, b{u(rng)};
        EXPECT_GT(udat::adversarial_loss(a, b, 1.0), 0.0);
    }
}

TEST(TotalLoss, WeightedSum) {
    EXPECT_NEAR(udat::total_loss(1.0, 2.0, 0.01), 1.02, 1e-15);
    EXPECT_EQ(udat::total_loss(1.7, 0.0, 0.01), 1.7);
    EXPECT_EQ(udat::total_loss(1.7, 123.0, 0.0), 1.7);
    EXPECT_EQ(TrainConfig{}.lambda_adv, 0.01);
}

TEST(TrackingLoss, FlatLogitsGiveLogTwo) {
    const udat::ResponseGrid grid{5, 32, 4.0};
    udat::HeadOutput out{ag::zeros({1, 5, 5}), ag::constant({4, 5, 5}, std::vector<double>(100, 4.0))};
    const auto parts = udat::tracking_loss(out, udat::BoundingBox::from_center(16, 16, 8, 8), grid);
    EXPECT_NEAR(parts.classification, std::log(2.0), 1e-15);
    EXPECT_GT(parts.positives, 0u);
}

TEST(TrackingLoss, ExactBoxesAndSaturatedLogitsVanish) {
    const udat::ResponseGrid grid{5, 32, 4.0};
    const udat::BoundingBox gt = udat::BoundingBox::from_center(16, 16, 12, 12);
    const auto pos = udat::positive_cells(gt, grid);
    std::vector<double> cls(25, -60.0), reg(100, 1.0);
    for (const auto& p : pos) {
        cls[p.index] = 60.0;
        reg[p.index] = p.l;
        reg[25 + p.index] = p.t;
        reg[50 + p.index] = p.r;
        reg[75 + p.index] = p.b;
    }
    const auto parts =
        udat::tracking_loss({ag::constant({1, 5, 5}, cls), ag::constant({4, 5, 5}, reg)}, gt, grid);
    EXPECT_NEAR(parts.regression, 0.0, 1e-15);
    EXPECT_LT(parts.classification, 1e-20);
}

TEST(TrackingLoss, BoxOutsideThePatchIsDataError) {
    const udat::ResponseGrid grid{5, 32, 4.0};
    udat::HeadOutput out{ag::zeros({1, 5, 5}), ag::constant({4, 5, 5}, std::vector<double>(100, 4.0))};
    EXPECT_THROW(udat::tracking_loss(out, {100, 100, 5, 5}, grid), udat::DataError);
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

TEST(PolySchedule, Endpoints) {
    EXPECT_EQ(udat::poly_lr(0, 1000, 0.005, 0.8), 0.005);
    EXPECT_EQ(udat::poly_lr(1000, 1000, 0.005, 0.8), 0.0);
    EXPECT_NEAR(udat::poly_lr(500, 1000, 0.005, 0.8), 0.005 * std::pow(0.5, 0.8), 1e-15);
    EXPECT_NEAR(udat::poly_lr(500, 1000, 0.005, 0.8), 0.002872, 1e-6);
}

TEST(PolySchedule, MonotoneAndBounded) {
    double prev = 1.0;
    for (long s = 0; s <= 357; ++s) {
        const double v = udat::poly_lr(s, 357, 0.005, 0.8);
        EXPECT_LE(v, prev);
        prev = v;
    }
    EXPECT_THROW(udat::poly_lr(358, 357, 0.005, 0.8), udat::RangeError);
    EXPECT_THROW(udat::poly_lr(-1, 357, 0.005, 0.8), udat::RangeError);
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

TEST(TrainStep, PhasesTouchDisjointParameterSets) {
    TrainingState st(toy::model(), 2);
    TrainConfig cfg;
    const auto params = all_parameters(st);
    std::set<std::string> g_changed, d_changed;
    for (int step = 0; step < 5; ++step) {
        const DomainBatch batch = make_batch(small_corpus(), 100 + step);
        Snapshot before = snapshot(params), mid;
        udat::train_step(batch, st, cfg, udat::learning_rates(step, 10, cfg), [&](int phase) {
            if (phase == 1) {
                mid = snapshot(params);
                for (const auto& name : changed(before, mid)) {
                    EXPECT_FALSE(is_discriminator(name)) << name;
                    g_changed.insert(name);
                }
            } else if (phase == 2) {
                for (const auto& name : changed(mid, snapshot(params))) {
                    EXPECT_TRUE(is_discriminator(name)) << name;
                    d_changed.insert(name);
                }
            }
        });
    }
    // Both sides actually learn.
    EXPECT_FALSE(g_changed.empty());
    EXPECT_FALSE(d_changed.empty());
}

TEST(TrainStep, ZeroLambdaMatchesPureTrackingUpdate) {
    const DomainBatch batch = make_batch(small_corpus(), 7);
    TrainConfig adapt;
    adapt.lambda_adv = 0.0;
    TrainConfig plain = adapt;
    plain.domain_adaptation = false;
    TrainingState a(toy::model(), 3), b(toy::model(), 3);
    const auto lr = udat::learning_rates(0, 10, adapt);
    const auto ra = udat::train_step(batch, a, adapt, lr);
    const auto rb = udat::train_step(batch, b, plain, lr);
    EXPECT_EQ(ra.l_gt, rb.l_gt);
    EXPECT_EQ(snapshot(a.network.parameters()), snapshot(b.network.parameters()));
}

TEST(TrainStep, WithoutAdaptationThereIsNoAdversary) {
    TrainingState st(toy::model(), 4);
    TrainConfig cfg;
    cfg.domain_adaptation = false;
    const Snapshot d0 = snapshot(st.discriminator.parameters());
    DomainBatch batch = make_batch(small_corpus(), 9);
    batch.target.clear();
    const auto rec = udat::train_step(batch, st, cfg, udat::learning_rates(0, 10, cfg));
    EXPECT_EQ(rec.l_adv, 0.0);
    EXPECT_FALSE(rec.l_d.has_value());
    EXPECT_EQ(rec.l_total, rec.l_gt);
    EXPECT_EQ(snapshot(st.discriminator.parameters()), d0);
}

TEST(TrainStep, EmptySidesAreBatchErrors) {
    TrainingState st(toy::model(), 5);
    TrainConfig cfg;
    DomainBatch batch = make_batch(small_corpus(), 10);
    DomainBatch no_src = batch, no_tgt = batch;
    no_src.source.clear();
    no_tgt.target.clear();
    const auto lr = udat::learning_rates(0, 10, cfg);
    EXPECT_THROW(udat::train_step(no_src, st, cfg, lr), udat::BatchError);
    EXPECT_THROW(udat::train_step(no_tgt, st, cfg, lr), udat::BatchError);
}

TEST(TrainStep, RecordsAreConsistent) {
    TrainingState st(toy::model(), 6);
    TrainConfig cfg;
    const auto rec = udat::train_step(make_batch(small_corpus(), 11), st, cfg, udat::learning_rates(0, 10, cfg));
    EXPECT_EQ(rec.l_total, rec.l_gt + cfg.lambda_adv * rec.l_adv);
    ASSERT_TRUE(rec.l_d.has_value());
    EXPECT_GE(*rec.l_d, 0.0);
    EXPECT_GE(rec.l_adv, 0.0);
    EXPECT_EQ(rec.lr, 0.005);
}

TEST(TrainStep, CombinedModeUpdatesBothSidesAtOnce) {
    TrainingState st(toy::model(), 7);
    TrainConfig cfg;
    cfg.mode = udat::AdaptationMode::grl_combined;
    const auto params = all_parameters(st);
    const Snapshot before = snapshot(params);
    std::vector<int> phases;
    const auto rec = udat::train_step(make_batch(small_corpus(), 12), st, cfg, udat::learning_rates(0, 10, cfg),
                                      [&](int p) { phases.push_back(p); });
    EXPECT_EQ(phases, std::vector<int>{0});
    const auto moved = changed(before, snapshot(params));
    EXPECT_TRUE(std::any_of(moved.begin(), moved.end(), is_discriminator));
    EXPECT_TRUE(std::any_of(moved.begin(), moved.end(), [](const std::string& n) { return !is_discriminator(n); }));
    EXPECT_TRUE(rec.l_d.has_value());
}

TEST(TrainStep, FrozenBackboneStaysPut) {
    TrainingState st(toy::model(), 8);
    TrainConfig cfg;
    cfg.freeze_backbone = true;
    const Snapshot b0 = snapshot(st.network.backbone_parameters());
    const Snapshot all0 = snapshot(st.network.parameters());
    udat::train_step(make_batch(small_corpus(), 13), st, cfg, udat::learning_rates(0, 10, cfg));
    EXPECT_EQ(snapshot(st.network.backbone_parameters()), b0);
    EXPECT_NE(snapshot(st.network.parameters()), all0);
    for (const auto& [name, v] : st.network.backbone_parameters()) EXPECT_TRUE(v->requires_grad);
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

TEST(TrainLoop, DeterministicForAFixedSeed) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    TrainingState a(toy::model(), 9), b(toy::model(), 9);
    const auto la = udat::train(a, small_corpus(), cfg);
    const auto lb = udat::train(b, small_corpus(), cfg);
    ASSERT_EQ(la.size(), 4u);
    for (std::size_t i = 0; i < la.size(); ++i) {
        EXPECT_EQ(la[i].l_gt, lb[i].l_gt);
        EXPECT_EQ(la[i].l_adv, lb[i].l_adv);
        EXPECT_EQ(la[i].l_d, lb[i].l_d);
        EXPECT_EQ(la[i].lr, lb[i].lr);
        EXPECT_EQ(la[i].l_total, la[i].l_gt + cfg.lambda_adv * la[i].l_adv);
    }
    EXPECT_EQ(la.front().lr, cfg.base_lr_bridging);
    EXPECT_GT(la.front().lr, la.back().lr);
}

TEST(TrainLoop, HooksSeeEveryStepAndEpoch) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    TrainingState st(toy::model(), 10);
    int steps = 0;
    std::vector<int> epochs;
    udat::TrainingHooks hooks;
    hooks.on_step = [&](const udat::LossRecord&) { ++steps; };
    hooks.on_epoch = [&](int e, const TrainingState&) { epochs.push_back(e); };
    udat::train(st, small_corpus(), cfg, hooks);
    EXPECT_EQ(steps, 4);
    EXPECT_EQ(epochs, (std::vector<int>{0, 1}));
}

TEST(TrainLoop, RejectsBadConfigsAndCorpora) {
    TrainingState st(toy::model(), 11);
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_THROW(udat::train(st, small_corpus(), cfg), udat::ConfigError);
    cfg = {};
    cfg.base_lr_discriminator = 0.0;
    EXPECT_THROW(cfg.validate(), udat::ConfigError);
    cfg = {};
    udat::TrainingCorpus no_target{small_corpus().source, {}};
    EXPECT_THROW(udat::train(st, no_target, cfg), udat::BatchError);
}

TEST(Batches, SourceBoxesLandInsideTheSearchPatch) {
    const auto mc = toy::model();
    const udat::CropGeometry geo{mc.template_size, mc.search_size, mc.context_factor};
    std::mt19937_64 rng(12);
    for (int i = 0; i < 50; ++i) {
        const auto p = udat::sample_source_pair(small_corpus().source[i % 6], geo, TrainConfig{}, rng);
        EXPECT_EQ(p.template_patch.width, 16);
        EXPECT_EQ(p.search_patch.width, 32);
        EXPECT_GT(p.box.cx(), 0.0);
        EXPECT_LT(p.box.cx(), 32.0);
        EXPECT_GT(p.box.cy(), 0.0);
        EXPECT_LT(p.box.cy(), 32.0);
    }
}
