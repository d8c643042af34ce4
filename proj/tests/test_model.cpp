#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "udat/model.hpp"

namespace ag = udat::ag;
using ag::Var;
using udat::FeatureMap;
using udat::FeatureRole;

namespace {

Var random_tensor(ag::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    return ag::constant(shape, oracle::random_values(ag::numel(shape), rng, sd));
}

void zero(const Var& v) { std::fill(v->value.begin(), v->value.end(), 0.0); }

udat::ModelConfig toy_model() {
    udat::ModelConfig mc;
    mc.backbone.channels = {4, 8, 8, 8};
    mc.backbone.strides = {2, 2, 1, 1};
    mc.backbone.used_blocks = 2;
    mc.bridge_heads = 2;
    mc.bridge_ffn_hidden = 16;
    mc.head_hidden = 8;
    mc.discriminator = {16, 2, 32, 2, 4};
    mc.template_size = 16;
    mc.search_size = 32;
    return mc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

TEST(Attention, SingleKeyReturnsItsValue) {
    std::mt19937_64 rng(1);
    const Var q = random_tensor({3, 2}, rng), k = random_tensor({1, 2}, rng), v = random_tensor({1, 4}, rng);
    const Var out = udat::attention(q, k, v);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) EXPECT_NEAR(out->value[r * 4 + c], v->value[c], 1e-15);
}

TEST(Attention, IdenticalValuesAreReturnedForOrthogonalQuery) {
    const Var q = ag::constant({1, 2}, {1, 0});
    const Var k = ag::constant({2, 2}, {0, 1, 0, -1});
    const Var v = ag::constant({2, 3}, {7, 8, 9, 7, 8, 9});
    const Var out = udat::attention(q, k, v);
    EXPECT_NEAR(out->value[0], 7, 1e-12);
    EXPECT_NEAR(out->value[1], 8, 1e-12);
    EXPECT_NEAR(out->value[2], 9, 1e-12);
}

TEST(Attention, TwoTokenHandExample) {
    Var w;
    const Var out = udat::attention(ag::constant({1, 1}, {1}), ag::constant({2, 1}, {1, 0}),
                                    ag::constant({2, 1}, {2, 4}), &w);
    const double a = std::exp(1.0) / (std::exp(1.0) + 1.0);
    EXPECT_NEAR(w->value[0], a, 1e-12);
    EXPECT_NEAR(w->value[0], 0.7311, 1e-4);
    EXPECT_NEAR(out->value[0], 2 * a + 4 * (1 - a), 1e-12);
    EXPECT_NEAR(out->value[0], 2.5379, 1e-4);
}

TEST(Attention, MismatchedShapesAreRejected) {
    EXPECT_THROW(udat::attention(ag::zeros({2, 3}), ag::zeros({2, 2}), ag::zeros({2, 1})), udat::ShapeError);
    EXPECT_THROW(udat::attention(ag::zeros({2, 2}), ag::zeros({3, 2}), ag::zeros({2, 1})), udat::ShapeError);
}

TEST(Attention, HeadCountMustDivideWidth) {
    std::mt19937_64 rng(0);
    EXPECT_THROW(udat::MultiHeadAttention(6, 4, rng), udat::ConfigError);
}

// ---------------------------------------------------------------------------
// Bridging layer
// ---------------------------------------------------------------------------

TEST(BridgingLayer, PreservesShape) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> heads(1, 4), side(1, 6), mult(1, 4);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = heads(rng), n = h * mult(rng) * 2, H = side(rng), W = side(rng);
        udat::BridgingLayer layer(n, h, 2 * n, rng);
        const FeatureMap out = layer({random_tensor({n, H, W}, rng), FeatureRole::concatenated});
        EXPECT_EQ(out.data->shape, (ag::Shape{n, H, W}));
        EXPECT_TRUE(out.finite());
    }
}

TEST(BridgingLayer, AttentionRowsAreDistributions) {
    std::mt19937_64 rng(3);
    udat::BridgingLayer layer(8, 2, 16, rng);
    std::vector<Var> weights;
    (void)layer({random_tensor({8, 3, 5}, rng), FeatureRole::concatenated}, FeatureRole::bridged_search, &weights);
    ASSERT_EQ(weights.size(), 2u);
    for (const Var& w : weights) {
        ASSERT_EQ(w->shape, (ag::Shape{15, 15}));
        for (int r = 0; r < 15; ++r) {
            double total = 0.0;
            for (int c = 0; c < 15; ++c) {
                EXPECT_GE(w->value[r * 15 + c], 0.0);
                total += w->value[r * 15 + c];
            }
            EXPECT_NEAR(total, 1.0, 1e-6);
        }
    }
}

TEST(BridgingLayer, ZeroWeightsLeaveTheResidualPath) {
    std::mt19937_64 rng(4);
    udat::BridgingLayer layer(6, 3, 12, rng);
    {
        udat::ParamList ps;
        layer.collect(ps, "bridge");
        for (auto& [name, v] : ps)
            if (name.find(".ln") == std::string::npos) zero(v);
    }
    layer.options.layer_norm = false;
    const Var x = random_tensor({6, 4, 3}, rng);
    const FeatureMap out = layer({x, FeatureRole::concatenated});
    const auto pe = udat::positional_encoding_2d(6, 4, 3);
    for (std::size_t i = 0; i < x->size(); ++i) EXPECT_NEAR(out.data->value[i], x->value[i] + pe[i], 1e-15);
}

TEST(BridgingLayer, InputGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    udat::BridgingLayer layer(4, 2, 8, rng);
    const Var x = ag::parameter({4, 3, 3}, oracle::random_values(36, rng));
    const Var w = random_tensor({4, 3, 3}, rng);
    auto loss = [&] { return ag::sum(ag::mul(layer({x, FeatureRole::concatenated}).data, w)); };
    ag::backward(loss());
    const auto numeric = oracle::numeric_gradient(x, [&] { return loss()->value[0]; });
    EXPECT_LE(oracle::relative_error(x->grad, numeric), 1e-4);
}

TEST(BridgingLayer, WrongChannelCountIsShapeError) {
    std::mt19937_64 rng(6);
    udat::BridgingLayer layer(8, 2, 16, rng);
    EXPECT_THROW(layer({ag::zeros({4, 2, 2}), FeatureRole::concatenated}), udat::ShapeError);
}

TEST(PositionalEncoding, RowAndColumnHalves) {
    const auto pe = udat::positional_encoding_2d(4, 3, 5);
    // Channel 0 encodes the row: sin(y), constant along x.
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 5; ++x) {
            EXPECT_NEAR(pe[(0 * 3 + y) * 5 + x], std::sin(double(y)), 1e-15);
            EXPECT_NEAR(pe[(2 * 3 + y) * 5 + x], std::sin(double(x)), 1e-15);
        }
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

TEST(GradientReversal, NegatesTheIdentityNetGradient) {
    std::mt19937_64 rng(7);
    const Var w1 = random_tensor({5, 6}, rng), w2 = random_tensor({6, 4}, rng), w3 = random_tensor({4, 1}, rng);
    auto net = [&](const Var& x, bool reverse) {
        Var h = ag::matmul(x, w1);
        h = reverse ? ag::gradient_reverse(h) : h;
        h = ag::mul(ag::matmul(h, w2), ag::matmul(h, w2));
        return ag::sum(ag::matmul(h, w3));
    };
    for (int trial = 0; trial < 50; ++trial) {
        const Var x = ag::parameter({1, 5}, oracle::random_values(5, rng));
        const Var y = net(x, true);
        ag::backward(y);
        const Var plain = ag::parameter({1, 5}, x->value);
        EXPECT_EQ(y->value, net(plain, false)->value);
        const auto numeric = oracle::numeric_gradient(plain, [&] { return net(plain, false)->value[0]; });
        std::vector<double> negated(numeric.size());
        for (std::size_t i = 0; i < numeric.size(); ++i) negated[i] = -numeric[i];
        EXPECT_LE(oracle::relative_error(x->grad, negated), 1e-5);
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

TEST(Discriminator, TokenCountAndChannelSoftmax) {
    std::mt19937_64 rng(8);
    udat::Discriminator d(64, udat::DiscriminatorConfig{}, rng);
    udat::DiscriminatorTrace trace;
    const Var score = d({random_tensor({64, 16, 16}, rng, 3.0), FeatureRole::bridged_search}, true, &trace);
    EXPECT_EQ(trace.token_count, 17);
    EXPECT_EQ(score->shape, (ag::Shape{1}));
    for (int p = 0; p < 256; ++p) {
        double total = 0.0;
        for (int c = 0; c < 64; ++c) total += trace.channel_softmax->value[c * 256 + p];
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Discriminator, InvariantToPerLocationChannelShift) {
    std::mt19937_64 rng(9);
    udat::Discriminator d(8, {16, 2, 32, 2, 4}, rng);
    for (const auto& [name, v] : d.parameters())
        for (double& x : v->value) x += 0.05;  // nonzero head so the score depends on the input
    const Var x = random_tensor({8, 8, 4}, rng);
    std::vector<double> shifted = x->value;
    std::uniform_real_distribution<double> off(-5, 5);
    for (int p = 0; p < 32; ++p) {
        const double c = off(rng);
        for (int ch = 0; ch < 8; ++ch) shifted[ch * 32 + p] += c;
    }
    const double a = d({x, FeatureRole::bridged_search})->value[0];
    const double b = d({ag::constant(x->shape, shifted), FeatureRole::bridged_search})->value[0];
    EXPECT_NEAR(a, b, 1e-9);
    const double c = d({random_tensor({8, 8, 4}, rng), FeatureRole::bridged_search})->value[0];
    EXPECT_NE(a, c);
}

TEST(Discriminator, SpatialSizeMustBeDivisibleByFour) {
    std::mt19937_64 rng(10);
    udat::Discriminator d(8, {16, 2, 32, 2, 4}, rng);
    EXPECT_THROW(d({ag::zeros({8, 6, 8}), FeatureRole::bridged_search}), udat::ShapeError);
}

TEST(Discriminator, ReversalOnlyFlipsTheInputGradient) {
    std::mt19937_64 rng(11);
    udat::Discriminator d(4, {8, 2, 16, 2, 4}, rng);
    for (const auto& [name, v] : d.parameters())
        for (double& x : v->value) x += 0.1;
    const auto values = oracle::random_values(64, rng);
    const Var a = ag::parameter({4, 4, 4}, values), b = ag::parameter({4, 4, 4}, values);
    ag::backward(d({a, FeatureRole::bridged_search}, true));
    ag::backward(d({b, FeatureRole::bridged_search}, false));
    for (std::size_t i = 0; i < a->grad.size(); ++i) EXPECT_DOUBLE_EQ(a->grad[i], -b->grad[i]);
}

// ---------------------------------------------------------------------------
// Correlation and head
// ---------------------------------------------------------------------------

TEST(Correlation, MatchesSlidingWindowOracle) {
    std::mt19937_64 rng(12);
    const auto z = oracle::random_values(18, rng), x = oracle::random_values(50, rng);
    const Var out = ag::depthwise_xcorr(ag::constant({2, 3, 3}, z), ag::constant({2, 5, 5}, x));
    EXPECT_EQ(out->shape, (ag::Shape{2, 3, 3}));
    EXPECT_EQ(out->value, oracle::naive_xcorr(z, 2, 3, 3, x, 5, 5));
    // The network-level correlation divides by the template area.
    const FeatureMap c = udat::cross_correlate({ag::constant({2, 3, 3}, z), FeatureRole::bridged_template},
                                               {ag::constant({2, 5, 5}, x), FeatureRole::bridged_search});
    const auto ref = oracle::naive_xcorr(z, 2, 3, 3, x, 5, 5);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c.data->value[i], ref[i] / 9.0, 1e-15);
    EXPECT_EQ(c.role, FeatureRole::correlation);
}

TEST(Correlation, EqualSizesGiveChannelInnerProducts) {
    std::mt19937_64 rng(13);
    const auto z = oracle::random_values(3 * 4 * 4, rng);
    const Var t = ag::constant({3, 4, 4}, z);
    const Var out = ag::depthwise_xcorr(t, t);
    ASSERT_EQ(out->shape, (ag::Shape{3, 1, 1}));
    for (int c = 0; c < 3; ++c) {
        double dot = 0.0;
        for (int i = 0; i < 16; ++i) dot += z[c * 16 + i] * z[c * 16 + i];
        EXPECT_NEAR(out->value[c], dot, 1e-12);
    }
}

TEST(Correlation, PeakAtTheEmbeddedOffset) {
    std::mt19937_64 rng(14);
    const auto z = oracle::random_values(2 * 3 * 3, rng);
    std::vector<double> x(2 * 9 * 9, 0.0);
    const int oy = 4, ox = 2;
    for (int c = 0; c < 2; ++c)
        for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) x[(c * 9 + oy + u) * 9 + ox + v] = z[(c * 3 + u) * 3 + v];
    const Var out = ag::depthwise_xcorr(ag::constant({2, 3, 3}, z), ag::constant({2, 9, 9}, x));
    for (int c = 0; c < 2; ++c) {
        const auto first = out->value.begin() + c * 49;
        const auto arg = std::max_element(first, first + 49) - first;
        EXPECT_EQ(arg, oy * 7 + ox);
    }
}

TEST(Correlation, TemplateLargerThanSearchIsShapeError) {
    EXPECT_THROW(udat::cross_correlate({ag::zeros({2, 5, 5}), FeatureRole::bridged_template},
                                       {ag::zeros({2, 3, 3}), FeatureRole::bridged_search}),
                 udat::ShapeError);
}

TEST(TrackerHead, ShapesAndPositiveRegression) {
    std::mt19937_64 rng(15);
    udat::TrackerHead head(6, 8, 4.0, rng);
    for (int trial = 0; trial < 5; ++trial) {
        const auto out = head({random_tensor({6, 5, 7}, rng, 10.0), FeatureRole::correlation});
        EXPECT_EQ(out.cls->shape, (ag::Shape{1, 5, 7}));
        EXPECT_EQ(out.reg->shape, (ag::Shape{4, 5, 7}));
        for (double v : out.reg->value) EXPECT_GT(v, 0.0);
    }
}

TEST(TrackerHead, ConstantOffsetsDecodeToCentredBox) {
    const udat::ResponseGrid grid{5, 32, 4.0};
    const Var reg = ag::constant({4, 5, 5}, std::vector<double>(100, 5.0));
    const udat::BoundingBox b = udat::decode_box(reg, grid, 2, 2);
    EXPECT_DOUBLE_EQ(b.w, 10.0);
    EXPECT_DOUBLE_EQ(b.h, 10.0);
    EXPECT_DOUBLE_EQ(b.cx(), 16.0);
    EXPECT_DOUBLE_EQ(b.cy(), 16.0);
    EXPECT_DOUBLE_EQ(grid.coord(2), 16.0);
    EXPECT_DOUBLE_EQ(grid.coord(3) - grid.coord(2), 4.0);
}

// ---------------------------------------------------------------------------
// Backbone and full network
// ---------------------------------------------------------------------------

TEST(Backbone, ConcatenatesTrailingBlocks) {
    std::mt19937_64 rng(16);
    udat::BackboneConfig cfg;
    cfg.channels = {4, 8, 64, 128};
    cfg.used_blocks = 2;
    udat::Backbone bb(cfg, rng);
    const FeatureMap f = bb(random_tensor({1, 16, 16}, rng));
    EXPECT_EQ(f.channels(), 192);
    EXPECT_EQ(f.height(), 4);
    cfg.used_blocks = 1;
    udat::Backbone one(cfg, rng);
    EXPECT_EQ(one(random_tensor({1, 16, 16}, rng)).channels(), 128);
    EXPECT_EQ(udat::BackboneConfig{}.output_channels(), 96 + 128);
}

TEST(Backbone, IncompatiblePatchIsShapeError) {
    std::mt19937_64 rng(17);
    udat::Backbone bb(udat::BackboneConfig{}, rng);
    EXPECT_THROW(bb(ag::zeros({1, 15, 16})), udat::ShapeError);
    udat::BackboneConfig bad;
    bad.strides = {2, 2, 2, 1};
    bad.used_blocks = 3;
    EXPECT_THROW(bad.validate(), udat::ConfigError);
}

TEST(Network, BranchesShareWeights) {
    udat::SiameseNetwork net(toy_model(), 3);
    std::mt19937_64 rng(18);
    const Var patch = random_tensor({1, 16, 16}, rng);
    const auto a = net.features(patch, FeatureRole::bridged_template);
    const auto b = net.features(patch, FeatureRole::bridged_search);
    EXPECT_EQ(a.backbone.data->value, b.backbone.data->value);
    EXPECT_EQ(a.bridged.data->value, b.bridged.data->value);
}

TEST(Network, ForwardIsFiniteAndShaped) {
    const auto mc = toy_model();
    udat::SiameseNetwork net(mc, 4);
    std::mt19937_64 rng(19);
    const auto r = net.forward(random_tensor({1, 16, 16}, rng), random_tensor({1, 32, 32}, rng));
    const int m = mc.response_grid().map_size;
    EXPECT_EQ(m, 5);
    EXPECT_EQ(r.head.cls->shape, (ag::Shape{1, m, m}));
    EXPECT_EQ(r.head.reg->shape, (ag::Shape{4, m, m}));
    EXPECT_TRUE(r.correlation.finite());
    for (double v : r.head.cls->value) EXPECT_TRUE(std::isfinite(v));
}

TEST(Network, BridgeToggleKeepsSharedModulesIdentical) {
    auto mc = toy_model();
    udat::SiameseNetwork with(mc, 5);
    mc.use_bridge = false;
    udat::SiameseNetwork without(mc, 5);
    EXPECT_FALSE(without.bridge().has_value());
    const auto pa = with.parameters(), pb = without.parameters();
    for (const auto& [name, v] : pb) {
        auto it = std::find_if(pa.begin(), pa.end(), [&](const auto& p) { return p.first == name; });
        ASSERT_NE(it, pa.end()) << name;
        EXPECT_EQ(it->second->value, v->value) << name;
    }
}

TEST(Network, ParameterNamesAreHierarchical) {
    udat::SiameseNetwork net(toy_model(), 6);
    for (const auto& [name, v] : net.parameters()) {
        EXPECT_GE(std::count(name.begin(), name.end(), '.'), 2) << name;
        EXPECT_TRUE(name.rfind("backbone.", 0) == 0 || name.rfind("bridge.", 0) == 0 || name.rfind("head.", 0) == 0);
    }
}

TEST(Network, InvalidConfigIsRejected) {
    auto mc = toy_model();
    mc.bridge_heads = 3;
    EXPECT_THROW(mc.validate(), udat::ConfigError);
    mc = toy_model();
    mc.template_size = 17;  // not a multiple of the total stride 4
    EXPECT_THROW(mc.validate(), udat::ShapeError);
}
