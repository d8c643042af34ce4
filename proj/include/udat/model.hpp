#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "udat/autograd.hpp"
#include "udat/core_types.hpp"
#include "udat/nn.hpp"
#include "udat/raster.hpp"

namespace udat {

using ag::Var;
using nn::ParamList;

// ---------------------------------------------------------------------------
// FeatureMap
// ---------------------------------------------------------------------------

enum class FeatureRole { backbone_block, concatenated, bridged_template, bridged_search, correlation };

/// A [C,H,W] tensor tagged with where it sits in the network.
struct FeatureMap {
    Var data;
    FeatureRole role = FeatureRole::concatenated;

    [[nodiscard]] int channels() const { return data->dim(0); }
    [[nodiscard]] int height() const { return data->dim(1); }
    [[nodiscard]] int width() const { return data->dim(2); }
    [[nodiscard]] bool finite() const {
        for (double v : data->value)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Grayscale raster -> [1,H,W] tensor scaled to [0,1].
inline Var image_to_tensor(const Image& img) {
    const Image g = to_gray(img);
    std::vector<double> v(g.data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = g.data[i] / 255.0;
    return ag::constant({1, g.height, g.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Softmax(Q·Kᵀ/√d_k)·V for Q [Tq,d_k], K [Tk,d_k], V [Tk,d_v]. The softmax
/// runs over the key axis. `weights`, when given, receives the attention matrix.
inline Var attention(const Var& q, const Var& k, const Var& v, Var* weights = nullptr) {
    ag::expect_rank(q, 2, "attention");
    ag::expect_rank(k, 2, "attention");
    ag::expect_rank(v, 2, "attention");
    if (q->dim(1) != k->dim(1)) throw ShapeError("attention: query/key width mismatch");
    if (k->dim(0) != v->dim(0)) throw ShapeError("attention: key/value count mismatch");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(k->dim(1)));
    Var w = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv_sqrt));
    if (weights) *weights = w;
    return ag::matmul(w, v);
}

struct MultiHeadAttention {
    nn::Linear query, key, value, output;
    int heads = 1;

    MultiHeadAttention() = default;
    template <class Rng>
    MultiHeadAttention(int dim, int heads_, Rng& rng)
        : query(dim, dim, rng), key(dim, dim, rng), value(dim, dim, rng), output(dim, dim, rng), heads(heads_) {
        if (heads <= 0 || dim % heads != 0)
            throw ConfigError("head count " + std::to_string(heads) + " must divide width " + std::to_string(dim));
    }

    [[nodiscard]] Var operator()(const Var& x, std::vector<Var>* weights = nullptr) const {
        const int dim = x->dim(1);
        const int dk = dim / heads;
        const Var q = query(x), k = key(x), v = value(x);
        std::vector<Var> parts;
        parts.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            Var w;
            parts.push_back(attention(ag::slice_cols(q, h * dk, dk), ag::slice_cols(k, h * dk, dk),
                                      ag::slice_cols(v, h * dk, dk), weights ? &w : nullptr));
            if (weights) weights->push_back(w);
        }
        return output(heads == 1 ? parts.front() : ag::concat_cols(parts));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        query.collect(out, prefix + ".q");
        key.collect(out, prefix + ".k");
        value.collect(out, prefix + ".v");
        output.collect(out, prefix + ".o");
    }
};

/// Fixed 2-D sinusoidal encoding [N,H,W]: the first half of the channels
/// encodes the row, the second half the column.
inline std::vector<double> positional_encoding_2d(int channels, int height, int width) {
    std::vector<double> pe(static_cast<std::size_t>(channels) * height * width);
    const int row_dims = channels / 2;
    const int col_dims = channels - row_dims;
    for (int c = 0; c < channels; ++c) {
        const bool is_row = c < row_dims;
        const int j = is_row ? c : c - row_dims;
        const int dims = is_row ? row_dims : col_dims;
        const double freq = std::pow(10000.0, -2.0 * (j / 2) / std::max(1, dims));
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double a = (is_row ? y : x) * freq;
                pe[(static_cast<std::size_t>(c) * height + y) * width + x] = (j % 2 == 0) ? std::sin(a) : std::cos(a);
            }
    }
    return pe;
}

/// Content-conditioned per-channel affine modulation:
/// t ⊙ (1 + t·W_s + b_s) + t·W_h + b_h.
struct Modulation {
    nn::Linear scale;
    nn::Linear shift;

    Modulation() = default;
    template <class Rng>
    Modulation(int dim, Rng& rng) : scale(dim, dim, rng, 0.1), shift(dim, dim, rng, 0.1) {}

    [[nodiscard]] Var operator()(const Var& t) const {
        return ag::add(ag::add(t, ag::mul(t, scale(t))), shift(t));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        scale.collect(out, prefix + ".scale");
        shift.collect(out, prefix + ".shift");
    }
};

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
    int input_channels = 1;
    std::vector<int> channels{32, 64, 96, 128};
    std::vector<int> strides{2, 2, 1, 1};
    int used_blocks = 2;

    [[nodiscard]] int total_blocks() const { return static_cast<int>(channels.size()); }

    [[nodiscard]] int output_channels() const {
        int sum = 0;
        for (int b = total_blocks() - used_blocks; b < total_blocks(); ++b) sum += channels[b];
        return sum;
    }

    [[nodiscard]] int total_stride() const {
        int s = 1;
        for (int v : strides) s *= v;
        return s;
    }

    void validate() const {
        if (channels.empty()) throw ConfigError("backbone needs at least one block");
        if (strides.size() != channels.size()) throw ConfigError("backbone strides/channels length mismatch");
        if (used_blocks < 1 || used_blocks > total_blocks())
            throw ConfigError("used_blocks must lie in [1, total_blocks]");
        for (int c : channels)
            if (c <= 0) throw ConfigError("backbone channel counts must be positive");
        for (int s : strides)
            if (s != 1 && s != 2) throw ConfigError("backbone strides must be 1 or 2");
        // Concatenated blocks must share a spatial size.
        for (int b = total_blocks() - used_blocks + 1; b < total_blocks(); ++b)
            if (strides[b] != 1) throw ConfigError("trailing used blocks must have stride 1");
    }

    /// Spatial size of the concatenated output for a square input patch.
    [[nodiscard]] int output_size(int input) const {
        if (input % total_stride() != 0)
            throw ShapeError("patch size " + std::to_string(input) + " is not divisible by the backbone stride " +
                             std::to_string(total_stride()));
        return input / total_stride();
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Plain conv blocks (3×3 conv + ReLU); the trailing `used_blocks` outputs are
/// concatenated along channels.
struct Backbone {
    BackboneConfig config;
    std::vector<nn::Conv2d> blocks;

    Backbone() = default;
    template <class Rng>
    Backbone(BackboneConfig cfg, Rng& rng) : config(std::move(cfg)) {
        config.validate();
        int in = config.input_channels;
        for (int b = 0; b < config.total_blocks(); ++b) {
            blocks.emplace_back(in, config.channels[b], 3, config.strides[b], 1, rng);
            in = config.channels[b];
        }
    }

    [[nodiscard]] FeatureMap operator()(const Var& patch) const {
        ag::expect_rank(patch, 3, "backbone");
        if (patch->dim(0) != config.input_channels) throw ShapeError("backbone: input channel mismatch");
        if (patch->dim(1) % config.total_stride() != 0 || patch->dim(2) % config.total_stride() != 0)
            throw ShapeError("patch " + ag::shape_str(patch->shape) + " incompatible with backbone stride " +
                             std::to_string(config.total_stride()));
        std::vector<Var> used;
        Var x = patch;
        for (int b = 0; b < config.total_blocks(); ++b) {
            x = ag::relu(blocks[b](x));
            if (b >= config.total_blocks() - config.used_blocks) used.push_back(x);
        }
        return {used.size() == 1 ? used.front() : ag::concat_channels(used), FeatureRole::concatenated};
    }

    void collect(ParamList& out, const std::string& prefix) const {
        for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].collect(out, prefix + ".block" + std::to_string(b));
    }
};

/// Channel-wise concatenation of the trailing used blocks of `config`.
inline FeatureMap extract_features(const Var& patch, const Backbone& backbone) { return backbone(patch); }

// ---------------------------------------------------------------------------
// Bridging layer
// ---------------------------------------------------------------------------

struct BridgeOptions {
    bool layer_norm = true;  // false bypasses both normalizations (test hook)
};

/// Transformer block applied to backbone features:
///   y' = MSA(P + x) + P + x
///   y  = LN(FFN(Mod(LN(y'))) + y')
struct BridgingLayer {
    int dim = 0;
    MultiHeadAttention msa;
    nn::LayerNorm norm1;
    Modulation mod;
    nn::FeedForward ffn;
    nn::LayerNorm norm2;
    BridgeOptions options;

    BridgingLayer() = default;
    template <class Rng>
    BridgingLayer(int dim_, int heads, int ffn_hidden, Rng& rng)
        : dim(dim_), msa(dim_, heads, rng), norm1(dim_), mod(dim_, rng), ffn(dim_, ffn_hidden, rng), norm2(dim_) {}

    [[nodiscard]] FeatureMap operator()(const FeatureMap& feat, FeatureRole role = FeatureRole::bridged_search,
                                        std::vector<Var>* attention_weights = nullptr) const {
        const Var& x = feat.data;
        ag::expect_rank(x, 3, "bridging layer");
        if (x->dim(0) != dim)
            throw ShapeError("bridging layer expects " + std::to_string(dim) + " channels, got " +
                             ag::shape_str(x->shape));
        const int H = x->dim(1), W = x->dim(2);
        const Var pos = ag::constant(x->shape, positional_encoding_2d(dim, H, W));
        const Var tokens = ag::chw_to_tokens(ag::add(x, pos));
        const Var inter = ag::add(msa(tokens, attention_weights), tokens);
        const Var normed = options.layer_norm ? norm1(inter) : inter;
        Var out = ag::add(ffn(mod(normed)), inter);
        if (options.layer_norm) out = norm2(out);
        return {ag::tokens_to_chw(out, H, W), role};
    }

    void collect(ParamList& out, const std::string& prefix) const {
        msa.collect(out, prefix + ".attn");
        norm1.collect(out, prefix + ".ln1");
        mod.collect(out, prefix + ".mod");
        ffn.collect(out, prefix + ".ffn");
        norm2.collect(out, prefix + ".ln2");
    }
};

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
    int embed_dim = 64;
    int heads = 4;
    int ffn_hidden = 128;
    int layers = 2;
    int patch = 4;

    friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

/// Pre-norm Transformer encoder layer.
struct EncoderLayer {
    nn::LayerNorm norm1;
    MultiHeadAttention msa;
    nn::LayerNorm norm2;
    nn::FeedForward ffn;

    EncoderLayer() = default;
    template <class Rng>
    EncoderLayer(int dim, int heads, int hidden, Rng& rng)
        : norm1(dim), msa(dim, heads, rng), norm2(dim), ffn(dim, hidden, rng) {}

    [[nodiscard]] Var operator()(const Var& x) const {
        const Var y = ag::add(x, msa(norm1(x)));
        return ag::add(y, ffn(norm2(y)));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        norm1.collect(out, prefix + ".ln1");
        msa.collect(out, prefix + ".attn");
        norm2.collect(out, prefix + ".ln2");
        ffn.collect(out, prefix + ".ffn");
    }
};

/// Intermediate values of one discriminator pass, for inspection.
struct DiscriminatorTrace {
    Var channel_softmax;  // [N,H,W]
    int token_count = 0;  // including the classification token
};

/// Domain classifier over bridged features:
/// channel softmax -> GRL -> 4×4/stride-4 patch embedding -> [c; tokens] ->
/// encoder layers -> projection of the classification token.
struct Discriminator {
    DiscriminatorConfig config;
    int in_channels = 0;
    nn::Conv2d embed;
    Var cls_token;
    std::vector<EncoderLayer> layers;
    nn::LayerNorm norm;
    nn::Linear head;

    Discriminator() = default;
    template <class Rng>
    Discriminator(int in_channels_, DiscriminatorConfig cfg, Rng& rng)
        : config(cfg),
          in_channels(in_channels_),
          embed(in_channels_, cfg.embed_dim, cfg.patch, cfg.patch, 0, rng),
          cls_token(ag::parameter({1, cfg.embed_dim}, nn::normal_values(cfg.embed_dim, 0.02, rng))),
          norm(cfg.embed_dim),
          head(cfg.embed_dim, 1, rng) {
        for (int l = 0; l < cfg.layers; ++l) layers.emplace_back(cfg.embed_dim, cfg.heads, cfg.ffn_hidden, rng);
        // Zero projection: scores start at 0 for every input instead of
        // large random values that the first updates would have to undo.
        std::fill(head.weight->value.begin(), head.weight->value.end(), 0.0);
    }

    /// Returns the [1] domain score. `reverse_gradient` switches the GRL
    /// between reversal and plain pass-through.
    [[nodiscard]] Var operator()(const FeatureMap& feat, bool reverse_gradient = true,
                                 DiscriminatorTrace* trace = nullptr) const {
        const Var& x = feat.data;
        ag::expect_rank(x, 3, "discriminator");
        const int H = x->dim(1), W = x->dim(2);
        if (H % config.patch != 0 || W % config.patch != 0)
            throw ShapeError("discriminator input " + ag::shape_str(x->shape) + " not divisible by patch size " +
                             std::to_string(config.patch));
        const Var soft = ag::tokens_to_chw(ag::softmax_rows(ag::chw_to_tokens(x)), H, W);
        const Var f = reverse_gradient ? ag::gradient_reverse(soft) : soft;
        // ×N keeps a uniform distribution at unit scale for the embedding.
        const Var tokens = ag::chw_to_tokens(embed(ag::scale(f, static_cast<double>(x->dim(0)))));
        Var seq = ag::concat_rows({cls_token, tokens});
        if (trace) {
            trace->channel_softmax = soft;
            trace->token_count = seq->dim(0);
        }
        for (const auto& layer : layers) seq = layer(seq);
        return ag::reshape(head(norm(ag::select_row(seq, 0))), {1});
    }

    [[nodiscard]] ParamList parameters() const {
        ParamList out;
        embed.collect(out, "disc.embed");
        out.emplace_back("disc.cls_token", cls_token);
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, "disc.layer" + std::to_string(l));
        norm.collect(out, "disc.ln");
        head.collect(out, "disc.head");
        return out;
    }
};

// ---------------------------------------------------------------------------
// Correlation and head
// ---------------------------------------------------------------------------

/// Depth-wise correlation divided by the template area, so response scale
/// does not grow with template size.
inline FeatureMap cross_correlate(const FeatureMap& tmpl, const FeatureMap& search) {
    if (tmpl.channels() != search.channels()) throw ShapeError("cross_correlate: channel mismatch");
    const double area = static_cast<double>(tmpl.height()) * tmpl.width();
    return {ag::scale(ag::depthwise_xcorr(tmpl.data, search.data), 1.0 / area), FeatureRole::correlation};
}

struct HeadOutput {
    Var cls;  // [1,H,W] logits
    Var reg;  // [4,H,W] positive side distances (l,t,r,b), search-patch pixels
};

/// Per-location objectness logits and side-distance regression.
struct TrackerHead {
    nn::Conv2d cls_conv, cls_out, reg_conv, reg_out;
    double reg_scale = 1.0;

    TrackerHead() = default;
    template <class Rng>
    TrackerHead(int in, int hidden, double reg_scale_, Rng& rng)
        : cls_conv(in, hidden, 3, 1, 1, rng),
          cls_out(hidden, 1, 1, 1, 0, rng),
          reg_conv(in, hidden, 3, 1, 1, rng),
          reg_out(hidden, 4, 1, 1, 0, rng),
          reg_scale(reg_scale_) {
        // Start from a low objectness prior.
        std::fill(cls_out.bias->value.begin(), cls_out.bias->value.end(), -2.0);
    }

    [[nodiscard]] HeadOutput operator()(const FeatureMap& corr) const {
        const Var c = cls_out(ag::relu(cls_conv(corr.data)));
        const Var r = ag::scale(ag::exp_clamped(reg_out(ag::relu(reg_conv(corr.data))), -8.0, 8.0), reg_scale);
        return {c, r};
    }

    void collect(ParamList& out, const std::string& prefix) const {
        cls_conv.collect(out, prefix + ".cls.conv");
        cls_out.collect(out, prefix + ".cls.out");
        reg_conv.collect(out, prefix + ".reg.conv");
        reg_out.collect(out, prefix + ".reg.out");
    }
};

/// Maps response-map cells to search-patch coordinates. The centre cell sits
/// on the patch centre; neighbouring cells are one backbone stride apart.
struct ResponseGrid {
    int map_size = 1;
    int patch_size = 1;
    double stride = 1.0;

    [[nodiscard]] double coord(int i) const { return 0.5 * patch_size + (i - 0.5 * (map_size - 1)) * stride; }
};

/// Box (patch coordinates) from side distances at one cell.
inline BoundingBox decode_box(double l, double t, double r, double b, double px, double py) {
    return {px - l, py - t, l + r, t + b};
}

inline BoundingBox decode_box(const Var& reg, const ResponseGrid& grid, int row, int col) {
    const int H = reg->dim(1), W = reg->dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t i = static_cast<std::size_t>(row) * W + col;
    return decode_box(reg->value[i], reg->value[plane + i], reg->value[2 * plane + i], reg->value[3 * plane + i],
                      grid.coord(col), grid.coord(row));
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

struct ModelConfig {
    BackboneConfig backbone;
    bool use_bridge = true;
    int bridge_heads = 4;
    int bridge_ffn_hidden = 256;
    int head_hidden = 64;
    DiscriminatorConfig discriminator;
    int template_size = 128;  // patch sizes must be multiples of the backbone stride
    int search_size = 256;
    double context_factor = 0.5;

    void validate() const {
        backbone.validate();
        const int dim = backbone.output_channels();
        if (bridge_heads <= 0 || dim % bridge_heads != 0)
            throw ConfigError("bridge_heads must divide the concatenated channel count " + std::to_string(dim));
        if (discriminator.embed_dim % discriminator.heads != 0)
            throw ConfigError("discriminator heads must divide embed_dim");
        if (template_size >= search_size) throw ConfigError("template_size must be smaller than search_size");
        const int zt = backbone.output_size(template_size);
        const int xs = backbone.output_size(search_size);
        if (zt % discriminator.patch != 0 || xs % discriminator.patch != 0)
            throw ConfigError("feature sizes must be divisible by the discriminator patch size");
    }

    [[nodiscard]] ResponseGrid response_grid() const {
        const int m = backbone.output_size(search_size) - backbone.output_size(template_size) + 1;
        return {m, search_size, static_cast<double>(backbone.total_stride())};
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BranchFeatures {
    FeatureMap backbone;
    FeatureMap bridged;  // same tensor as `backbone` when the bridge is off
};

struct ForwardResult {
    BranchFeatures tmpl;
    BranchFeatures search;
    FeatureMap correlation;
    HeadOutput head;
};

/// Siamese tracker: shared backbone and bridging layer for both branches,
/// depth-wise correlation, anchor-free head.
class SiameseNetwork {
public:
    SiameseNetwork() = default;
    SiameseNetwork(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        // Separate streams keep shared modules identical whether or not the
        // bridge exists.
        std::mt19937_64 rb(seed * 4 + 1), rl(seed * 4 + 2), rh(seed * 4 + 3);
        backbone_ = Backbone(config_.backbone, rb);
        const int dim = config_.backbone.output_channels();
        if (config_.use_bridge) bridge_.emplace(dim, config_.bridge_heads, config_.bridge_ffn_hidden, rl);
        head_ = TrackerHead(dim, config_.head_hidden, config_.backbone.total_stride(), rh);
    }

    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] const Backbone& backbone() const noexcept { return backbone_; }
    [[nodiscard]] const std::optional<BridgingLayer>& bridge() const noexcept { return bridge_; }
    [[nodiscard]] std::optional<BridgingLayer>& bridge() noexcept { return bridge_; }
    [[nodiscard]] const TrackerHead& head() const noexcept { return head_; }

    [[nodiscard]] BranchFeatures features(const Var& patch, FeatureRole role) const {
        FeatureMap f = backbone_(patch);
        if (!bridge_) return {f, {f.data, role}};
        return {f, (*bridge_)(f, role)};
    }

    [[nodiscard]] HeadOutput predict(const FeatureMap& tmpl, const FeatureMap& search) const {
        return head_(cross_correlate(tmpl, search));
    }

    [[nodiscard]] ForwardResult forward(const Var& tmpl, const Var& search) const {
        ForwardResult r;
        r.tmpl = features(tmpl, FeatureRole::bridged_template);
        r.search = features(search, FeatureRole::bridged_search);
        r.correlation = cross_correlate(r.tmpl.bridged, r.search.bridged);
        r.head = head_(r.correlation);
        return r;
    }

    [[nodiscard]] ParamList parameters() const {
        ParamList out;
        backbone_.collect(out, "backbone");
        if (bridge_) bridge_->collect(out, "bridge");
        head_.collect(out, "head");
        return out;
    }

    [[nodiscard]] ParamList backbone_parameters() const {
        ParamList out;
        backbone_.collect(out, "backbone");
        return out;
    }

private:
    ModelConfig config_;
    Backbone backbone_;
    std::optional<BridgingLayer> bridge_;
    TrackerHead head_;
};

inline Discriminator make_discriminator(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed * 4 + 4);
    return Discriminator(config.backbone.output_channels(), config.discriminator, rng);
}

}  // namespace udat
