#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "udat/core_types.hpp"
#include "udat/discovery.hpp"
#include "udat/evaluation.hpp"
#include "udat/model.hpp"
#include "udat/training.hpp"

namespace udat {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration files
// ---------------------------------------------------------------------------

namespace detail {

/// Strict object reader: every key present must be consumed, and each value
/// must have the expected type. Errors name the full key path.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_arithmetic_v<T>) {
                if (!it->is_number()) throw ConfigError("");
                if constexpr (std::is_integral_v<T>)
                    if (!it->is_number_integer() && !it->is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError("");
            }
            out = it->template get<T>();
        } catch (const std::exception&) {
            throw ConfigError("invalid value for '" + key_path(key) + "'");
        }
    }

    [[nodiscard]] const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    [[nodiscard]] std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key '" + key_path(it.key()) + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const BackboneConfig& c) {
    return {{"input_channels", c.input_channels}, {"channels", c.channels}, {"strides", c.strides},
            {"used_blocks", c.used_blocks}};
}

inline json to_json(const DiscriminatorConfig& c) {
    return {{"embed_dim", c.embed_dim}, {"heads", c.heads}, {"ffn_hidden", c.ffn_hidden}, {"layers", c.layers},
            {"patch", c.patch}};
}

inline json to_json(const ModelConfig& c) {
    return {{"backbone", to_json(c.backbone)},
            {"use_bridge", c.use_bridge},
            {"bridge_heads", c.bridge_heads},
            {"bridge_ffn_hidden", c.bridge_ffn_hidden},
            {"head_hidden", c.head_hidden},
            {"discriminator", to_json(c.discriminator)},
            {"template_size", c.template_size},
            {"search_size", c.search_size},
            {"context_factor", c.context_factor}};
}

inline json to_json(const TrainConfig& c) {
    return {{"lambda_adv", c.lambda_adv},
            {"base_lr_discriminator", c.base_lr_discriminator},
            {"base_lr_bridging", c.base_lr_bridging},
            {"base_lr_backbone", c.base_lr_backbone},
            {"poly_power", c.poly_power},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"source_label", c.source_label},
            {"target_label", c.target_label},
            {"domain_adaptation", c.domain_adaptation},
            {"random_crop", c.random_crop},
            {"freeze_backbone", c.freeze_backbone},
            {"mode", c.mode == AdaptationMode::alternating ? "alternating" : "grl_combined"},
            {"max_frame_gap", c.max_frame_gap},
            {"search_shift", c.search_shift},
            {"scale_jitter", c.scale_jitter},
            {"seed", c.seed}};
}

inline json to_json(const DiscoveryConfig& c) {
    return {{"incremental_reward", c.incremental_reward},
            {"saliency_threshold", c.saliency_threshold},
            {"min_region_area", c.min_region_area},
            {"enhancement_stage", c.enhancement_stage},
            {"saliency_stage", c.saliency_stage},
            {"gamma", c.gamma},
            {"saliency_window", c.saliency_window},
            {"template_size", c.crop.template_size},
            {"search_size", c.crop.search_size},
            {"context_factor", c.crop.context_factor}};
}

inline BackboneConfig backbone_config_from_json(const json& j, const std::string& path) {
    BackboneConfig c;
    detail::ObjectReader r(j, path);
    r.read("input_channels", c.input_channels);
    r.read("channels", c.channels);
    r.read("strides", c.strides);
    r.read("used_blocks", c.used_blocks);
    r.finish();
    return c;
}

inline DiscriminatorConfig discriminator_config_from_json(const json& j, const std::string& path) {
    DiscriminatorConfig c;
    detail::ObjectReader r(j, path);
    r.read("embed_dim", c.embed_dim);
    r.read("heads", c.heads);
    r.read("ffn_hidden", c.ffn_hidden);
    r.read("layers", c.layers);
    r.read("patch", c.patch);
    r.finish();
    return c;
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model") {
    ModelConfig c;
    detail::ObjectReader r(j, path);
    if (const json* b = r.child("backbone")) c.backbone = backbone_config_from_json(*b, r.key_path("backbone"));
    r.read("use_bridge", c.use_bridge);
    r.read("bridge_heads", c.bridge_heads);
    r.read("bridge_ffn_hidden", c.bridge_ffn_hidden);
    r.read("head_hidden", c.head_hidden);
    if (const json* d = r.child("discriminator"))
        c.discriminator = discriminator_config_from_json(*d, r.key_path("discriminator"));
    r.read("template_size", c.template_size);
    r.read("search_size", c.search_size);
    r.read("context_factor", c.context_factor);
    r.finish();
    return c;
}

inline TrainConfig train_config_from_json(const json& j, const std::string& path = "train") {
    TrainConfig c;
    detail::ObjectReader r(j, path);
    r.read("lambda_adv", c.lambda_adv);
    r.read("base_lr_discriminator", c.base_lr_discriminator);
    r.read("base_lr_bridging", c.base_lr_bridging);
    r.read("base_lr_backbone", c.base_lr_backbone);
    r.read("poly_power", c.poly_power);
    r.read("epochs", c.epochs);
    r.read("batch_size", c.batch_size);
    r.read("source_label", c.source_label);
    r.read("target_label", c.target_label);
    r.read("domain_adaptation", c.domain_adaptation);
    r.read("random_crop", c.random_crop);
    r.read("freeze_backbone", c.freeze_backbone);
    std::string mode = c.mode == AdaptationMode::alternating ? "alternating" : "grl_combined";
    r.read("mode", mode);
    if (mode == "alternating")
        c.mode = AdaptationMode::alternating;
    else if (mode == "grl_combined")
        c.mode = AdaptationMode::grl_combined;
    else
        throw ConfigError("invalid value for '" + r.key_path("mode") + "'");
    r.read("max_frame_gap", c.max_frame_gap);
    r.read("search_shift", c.search_shift);
    r.read("scale_jitter", c.scale_jitter);
    r.read("seed", c.seed);
    r.finish();
    return c;
}

inline DiscoveryConfig discovery_config_from_json(const json& j, const std::string& path = "discovery") {
    DiscoveryConfig c;
    detail::ObjectReader r(j, path);
    r.read("incremental_reward", c.incremental_reward);
    r.read("saliency_threshold", c.saliency_threshold);
    r.read("min_region_area", c.min_region_area);
    r.read("enhancement_stage", c.enhancement_stage);
    r.read("saliency_stage", c.saliency_stage);
    r.read("gamma", c.gamma);
    r.read("saliency_window", c.saliency_window);
    r.read("template_size", c.crop.template_size);
    r.read("search_size", c.crop.search_size);
    r.read("context_factor", c.crop.context_factor);
    r.finish();
    return c;
}

/// Top-level run configuration: {"model": {...}, "train": {...},
/// "discovery": {...}, "data": {"source": ..., "target": ...}}; every section
/// is optional.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DiscoveryConfig discovery;
    std::string source_root;
    std::string target_root;

    void validate() const {
        model.validate();
        train.validate();
        discovery.validate();
    }
};

inline json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"discovery", to_json(c.discovery)},
            {"data", {{"source", c.source_root}, {"target", c.target_root}}}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    detail::ObjectReader r(j, "");
    if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
    if (const json* t = r.child("train")) c.train = train_config_from_json(*t);
    if (const json* d = r.child("discovery")) c.discovery = discovery_config_from_json(*d);
    if (const json* d = r.child("data")) {
        detail::ObjectReader dr(*d, "data");
        dr.read("source", c.source_root);
        dr.read("target", c.target_root);
        dr.finish();
    }
    r.finish();
    return c;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout: 8-byte magic "UDATCKPT", u32 version, u64 header length, a JSON
// header, then the parameter values as raw little-endian binary64 in header
// order.

inline constexpr char kCheckpointMagic[8] = {'U', 'D', 'A', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    ag::Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string kind = "network";  // "network" or "oracle"
    ModelConfig model;
    std::map<std::string, CheckpointTensor> tensors;
    std::vector<std::string> order;
};

namespace detail {

template <class T>
void write_le(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const std::string& what) {
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("checkpoint truncated in " + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

}  // namespace detail

inline Checkpoint make_checkpoint(const SiameseNetwork& net, const Discriminator* disc = nullptr) {
    Checkpoint ck;
    ck.model = net.config();
    auto add = [&](const ParamList& params) {
        for (const auto& [name, p] : params) {
            ck.tensors[name] = {p->shape, p->value};
            ck.order.push_back(name);
        }
    };
    add(net.parameters());
    if (disc) add(disc->parameters());
    return ck;
}

inline Checkpoint make_oracle_checkpoint() {
    Checkpoint ck;
    ck.kind = "oracle";
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    json header{{"kind", ck.kind}, {"model", to_json(ck.model)}, {"tensors", json::array()}};
    for (const auto& name : ck.order) header["tensors"].push_back({{"name", name}, {"shape", ck.tensors.at(name).shape}});
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_le<std::uint32_t>(out, kCheckpointVersion);
    detail::write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : ck.order)
        for (double v : ck.tensors.at(name).values) detail::write_le<double>(out, v);
    if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("checkpoint '" + path.string() + "' not found");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError("'" + path.string() + "' is not a checkpoint");
    if (detail::read_le<std::uint32_t>(in, "version") != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version");
    const auto len = detail::read_le<std::uint64_t>(in, "header length");
    if (len > (1u << 30)) throw FormatError("checkpoint header too large");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint truncated in header");
    Checkpoint ck;
    try {
        const json header = json::parse(text);
        ck.kind = header.at("kind").get<std::string>();
        ck.model = model_config_from_json(header.at("model"));
        for (const auto& t : header.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            CheckpointTensor tensor{t.at("shape").get<ag::Shape>(), {}};
            ck.tensors[name] = std::move(tensor);
            ck.order.push_back(name);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (ck.kind != "network" && ck.kind != "oracle") throw FormatError("unknown checkpoint kind '" + ck.kind + "'");
    for (const auto& name : ck.order) {
        auto& t = ck.tensors[name];
        t.values.resize(ag::numel(t.shape));
        for (double& v : t.values) v = detail::read_le<double>(in, name);
    }
    return ck;
}

/// Copies checkpoint tensors into same-named parameters. Unless
/// `allow_missing`, every parameter of `params` must be present; shapes must
/// always match. Returns the number of parameters copied.
inline std::size_t apply_checkpoint(const Checkpoint& ck, const ParamList& params, bool allow_missing = false) {
    std::size_t copied = 0;
    for (const auto& [name, p] : params) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) {
            if (allow_missing) continue;
            throw FormatError("checkpoint lacks parameter '" + name + "'");
        }
        if (it->second.shape != p->shape)
            throw FormatError("checkpoint parameter '" + name + "' has shape " + ag::shape_str(it->second.shape) +
                              ", expected " + ag::shape_str(p->shape));
        p->value = it->second.values;
        ++copied;
    }
    return copied;
}

inline SiameseNetwork network_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "network") throw FormatError("checkpoint kind '" + ck.kind + "' holds no network");
    SiameseNetwork net(ck.model, 0);
    apply_checkpoint(ck, net.parameters());
    return net;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v, int digits = 17) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);  // binary: LF line endings everywhere
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    return out;
}

}  // namespace detail

/// `frame_index,x,y,w,h,provenance`; missing frames are omitted.
inline void write_track_csv(const std::filesystem::path& path, const BoxTrack& track) {
    auto out = detail::open_csv(path);
    out << "frame_index,x,y,w,h,provenance\n";
    for (std::size_t t = 0; t < track.size(); ++t) {
        if (!track.boxes[t]) continue;
        const auto& b = *track.boxes[t];
        out << t << ',' << detail::fmt_double(b.x) << ',' << detail::fmt_double(b.y) << ','
            << detail::fmt_double(b.w) << ',' << detail::fmt_double(b.h) << ',' << to_string(track.provenance[t])
            << '\n';
    }
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
    auto out = detail::open_csv(path);
    out << "step,l_gt,l_adv,l_total,l_d,lr\n";
    for (const auto& r : log) {
        out << r.step << ',' << detail::fmt_double(r.l_gt) << ',' << detail::fmt_double(r.l_adv) << ','
            << detail::fmt_double(r.l_total) << ',' << (r.l_d ? detail::fmt_double(*r.l_d) : std::string()) << ','
            << detail::fmt_double(r.lr) << '\n';
    }
}

/// `frame,x,y,w,h`; a failed frame is written as 0,0,0,0.
inline void write_result_csv(const std::filesystem::path& path, const TrackResult& result) {
    auto out = detail::open_csv(path);
    out << "frame,x,y,w,h\n";
    for (std::size_t t = 0; t < result.boxes.size(); ++t) {
        const BoundingBox b = result.boxes[t].value_or(BoundingBox{0, 0, 0, 0});
        out << t << ',' << detail::fmt_double(b.x) << ',' << detail::fmt_double(b.y) << ','
            << detail::fmt_double(b.w) << ',' << detail::fmt_double(b.h) << '\n';
    }
}

struct ReportRow {
    std::string tracker;
    std::string subset;
    MetricSummary metrics;
};

inline void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    auto out = detail::open_csv(path);
    out << "tracker,subset,precision,norm_precision,success\n";
    for (const auto& r : rows)
        out << r.tracker << ',' << r.subset << ',' << detail::fmt_double(r.metrics.precision) << ','
            << detail::fmt_double(r.metrics.norm_precision) << ',' << detail::fmt_double(r.metrics.success) << '\n';
}

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<double>& thresholds,
                            const std::vector<double>& values) {
    auto out = detail::open_csv(path);
    out << "threshold,value\n";
    for (std::size_t i = 0; i < thresholds.size(); ++i)
        out << detail::fmt_double(thresholds[i]) << ',' << detail::fmt_double(values[i]) << '\n';
}

inline void write_attribute_csv(const std::filesystem::path& path, const std::vector<AttributeReport>& reports,
                                double iv_threshold) {
    auto out = detail::open_csv(path);
    out << "sequence,ambient_intensity,max_illuminance_difference,iv_threshold,LAI,IV\n";
    for (const auto& r : reports)
        out << r.sequence << ',' << detail::fmt_double(r.ambient_intensity) << ','
            << detail::fmt_double(r.max_illuminance_difference) << ',' << detail::fmt_double(iv_threshold) << ','
            << r.labels.count("LAI") << ',' << r.labels.count("IV") << '\n';
}

struct ProjectionRow {
    std::string stage;  // "backbone" or "bridged"
    std::string domain;
    std::string sequence;
    double pc1 = 0.0;
    double pc2 = 0.0;
};

inline void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows) {
    auto out = detail::open_csv(path);
    out << "stage,domain,sequence,pc1,pc2\n";
    for (const auto& r : rows)
        out << r.stage << ',' << r.domain << ',' << r.sequence << ',' << detail::fmt_double(r.pc1) << ','
            << detail::fmt_double(r.pc2) << '\n';
}

}  // namespace udat
