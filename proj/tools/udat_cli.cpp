// Command-line front end: discover, train, eval, attributes, plot-features.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "udat/io.hpp"
#include "udat/udat.hpp"

namespace fs = std::filesystem;
using namespace udat;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Accepts either a run config or a manifest written by `train` (its
/// "config" member is the snapshot).
RunConfig read_config(const std::string& path) {
    if (path.empty()) return {};
    const json j = read_json_file(path);
    if (j.is_object() && j.contains("manifest_version")) {
        if (!j.contains("config")) throw ConfigError("manifest '" + path + "' has no 'config' member");
        return run_config_from_json(j.at("config"));
    }
    return run_config_from_json(j);
}

std::vector<FrameSequence> load_split(const std::string& root, Split split) {
    DatasetLayout layout;
    layout.root = root;
    layout.split = split;
    return load_dataset(layout);
}

// ---------------------------------------------------------------------------

struct DiscoverArgs {
    std::string data, out, config;
    bool patches = true;
};

int run_discover(const DiscoverArgs& a) {
    const RunConfig rc = read_config(a.config);
    rc.discovery.validate();
    const auto seqs = load_split(a.data, Split::train_unlabeled);
    for (const auto& seq : seqs) {
        const fs::path dir = fs::path(a.out) / seq.name;
        fs::create_directories(dir);
        try {
            const DiscoveryResult res = discover_objects(seq, rc.discovery);
            write_track_csv(dir / "track.csv", res.track);
            if (a.patches) {
                for (std::size_t t = 0; t < seq.size(); ++t) {
                    if (!res.track.boxes[t]) continue;
                    const Image frame = seq.frame(t);
                    const fs::path stem = fs::path(seq.frame_ids[t]).stem();
                    save_image(dir / (stem.string() + "_z.png"), crop_template(frame, *res.track.boxes[t], rc.discovery.crop));
                    save_image(dir / (stem.string() + "_x.png"), crop_search(frame, *res.track.boxes[t], rc.discovery.crop));
                }
            }
        } catch (const EmptyTrackError&) {
            write_track_csv(dir / "track.csv", BoxTrack(seq.size()));
            std::cerr << "discover: no candidates in '" << seq.name << "'\n";
        }
    }
    std::cout << "discovered " << seqs.size() << " sequences\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string source, target, config, out;
    bool no_da = false, random_crop = false, no_bridge = false;
};

int run_train(const TrainArgs& a) {
    RunConfig rc = read_config(a.config);
    if (!a.source.empty()) rc.source_root = a.source;
    if (!a.target.empty()) rc.target_root = a.target;
    if (a.no_da) rc.train.domain_adaptation = false;
    if (a.random_crop) rc.train.random_crop = true;
    if (a.no_bridge) rc.model.use_bridge = false;
    rc.validate();
    if (rc.source_root.empty()) throw ConfigError("missing source root ('--source' or 'data.source')");
    if (rc.train.domain_adaptation && rc.target_root.empty())
        throw ConfigError("missing target root ('--target' or 'data.target')");

    const fs::path out = a.out;
    fs::create_directories(out / "checkpoints");
    const std::string started = utc_timestamp();

    TrainingCorpus corpus;
    corpus.source = load_split(rc.source_root, Split::test_labeled);
    if (rc.train.domain_adaptation) {
        std::mt19937_64 crop_rng(rc.train.seed * 31 + 7);
        for (auto& seq : load_split(rc.target_root, Split::train_unlabeled)) {
            BoxTrack track;
            if (rc.train.random_crop) {
                const Image f0 = seq.frame(0);
                track = random_crop_track(seq.size(), f0.width, f0.height, crop_rng);
            } else {
                try {
                    track = discover_objects(seq, rc.discovery).track;
                } catch (const EmptyTrackError&) {
                    std::cerr << "train: skipping target '" << seq.name << "' (no candidates)\n";
                    continue;
                }
            }
            corpus.target.push_back({std::move(seq), std::move(track)});
        }
    }

    TrainingState state(rc.model, rc.train.seed);
    std::vector<std::string> checkpoints;
    TrainingHooks hooks;
    hooks.on_epoch = [&](int epoch, const TrainingState& st) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch + 1);
        const fs::path p = out / "checkpoints" / name;
        save_checkpoint(p, make_checkpoint(st.network, &st.discriminator));
        checkpoints.push_back(fs::relative(p, out).string());
    };
    const auto log = train(state, corpus, rc.train, hooks);
    write_loss_csv(out / "losses.csv", log);
    save_checkpoint(out / "final.ckpt", make_checkpoint(state.network, &state.discriminator));

    json manifest{{"manifest_version", 1},
                  {"config", to_json(rc)},
                  {"seed", rc.train.seed},
                  {"artifacts",
                   {{"losses", "losses.csv"}, {"final_checkpoint", "final.ckpt"}, {"checkpoints", checkpoints}}},
                  {"counts", {{"source_sequences", corpus.source.size()}, {"target_sequences", corpus.target.size()},
                              {"steps", log.size()}}},
                  {"started", started},
                  {"finished", utc_timestamp()}};
    std::ofstream(out / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
    std::cout << "trained " << log.size() << " steps; final l_gt " << (log.empty() ? 0.0 : log.back().l_gt) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string data, checkpoint, out, subset, attribute, name;
};

int run_eval(const EvalArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    std::optional<SiameseNetwork> net;
    if (ck.kind == "network") net = network_from_checkpoint(ck);
    const std::string tracker_name = a.name.empty() ? fs::path(a.checkpoint).stem().string() : a.name;

    auto seqs = load_split(a.data, Split::test_labeled);
    std::string subset = "all";
    if (!a.subset.empty()) {
        if (a.subset != "long-term") throw ConfigError("unknown subset '" + a.subset + "' (expected 'long-term')");
        seqs = longterm_subset(seqs);
        subset = "long-term";
    }
    if (!a.attribute.empty()) {
        std::vector<FrameSequence> kept;
        for (auto& s : seqs)
            if (s.attributes.count(a.attribute)) kept.push_back(std::move(s));
        seqs = std::move(kept);
        subset = a.attribute;
    }
    if (seqs.empty()) throw DataError("no sequences selected for evaluation");

    const fs::path out = a.out;
    std::vector<TrackResult> results;
    for (const auto& seq : seqs) {
        TrackResult r;
        if (net) {
            SiameseTracker tracker(*net);
            r = run_ope(seq, tracker, tracker_name);
        } else {
            OracleTracker tracker(*seq.ground_truth);
            r = run_ope(seq, tracker, tracker_name);
        }
        write_result_csv(out / "results" / tracker_name / (seq.name + ".csv"), r);
        results.push_back(std::move(r));
    }

    std::vector<ReportRow> rows{{tracker_name, subset, summarize(results, seqs)}};
    // Per-attribute rows over the selected sequences, tags in sorted order.
    std::set<std::string> tags;
    for (const auto& s : seqs) tags.insert(s.attributes.begin(), s.attributes.end());
    for (const auto& tag : tags) {
        if (tag == a.attribute) continue;
        std::vector<TrackResult> rs;
        std::vector<FrameSequence> ss;
        for (std::size_t i = 0; i < seqs.size(); ++i)
            if (seqs[i].attributes.count(tag)) {
                rs.push_back(results[i]);
                ss.push_back(seqs[i]);
            }
        rows.push_back({tracker_name, tag, summarize(rs, ss)});
    }
    write_report_csv(out / "report.csv", rows);

    std::vector<std::optional<BoundingBox>> pred;
    std::vector<BoundingBox> gt;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        pred.insert(pred.end(), results[i].boxes.begin(), results[i].boxes.end());
        gt.insert(gt.end(), seqs[i].ground_truth->begin(), seqs[i].ground_truth->end());
    }
    std::vector<double> th;
    for (int k = 0; k < kSuccessThresholds; ++k) th.push_back(success_threshold(k));
    write_curve_csv(out / "curves" / "success.csv", th, success_curve(pred, gt));
    th.clear();
    for (int t = 0; t <= 50; ++t) th.push_back(t);
    write_curve_csv(out / "curves" / "precision.csv", th, precision_curve(pred, gt));
    th.clear();
    for (int k = 0; k <= 50; ++k) th.push_back(0.5 * k / 50);
    write_curve_csv(out / "curves" / "norm_precision.csv", th, normalized_precision_curve(pred, gt));

    const auto& m = rows.front().metrics;
    std::printf("%s %s: precision %.4f norm_precision %.4f success %.4f (%zu sequences)\n", tracker_name.c_str(),
                subset.c_str(), m.precision, m.norm_precision, m.success, seqs.size());
    return 0;
}

// ---------------------------------------------------------------------------

struct AttributeArgs {
    std::string data, out;
    double iv_threshold = 30.0;
};

int run_attributes(const AttributeArgs& a) {
    std::vector<AttributeReport> reports;
    for (const auto& seq : load_split(a.data, Split::test_labeled)) reports.push_back(label_attributes(seq, a.iv_threshold));
    write_attribute_csv(a.out, reports, a.iv_threshold);
    std::cout << "labelled " << reports.size() << " sequences\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct PlotArgs {
    std::string checkpoint, day, night, out, config;
    int frames = 1;
};

/// Box used to cut a feature patch: ground truth when present, otherwise the
/// discovered track, otherwise the central quarter of the frame.
std::vector<std::pair<std::size_t, BoundingBox>> feature_boxes(const FrameSequence& seq, int frames,
                                                               const DiscoveryConfig& dc) {
    std::vector<std::optional<BoundingBox>> boxes(seq.size());
    if (seq.ground_truth) {
        for (std::size_t t = 0; t < seq.size(); ++t) boxes[t] = (*seq.ground_truth)[t];
    } else {
        try {
            boxes = discover_objects(seq, dc).track.boxes;
        } catch (const EmptyTrackError&) {
            const Image f = seq.frame(0);
            boxes[0] = BoundingBox{f.width * 0.375, f.height * 0.375, f.width * 0.25, f.height * 0.25};
        }
    }
    std::vector<std::pair<std::size_t, BoundingBox>> out;
    for (std::size_t t = 0; t < seq.size() && static_cast<int>(out.size()) < frames; ++t)
        if (boxes[t]) out.emplace_back(t, *boxes[t]);
    return out;
}

int run_plot_features(const PlotArgs& a) {
    const RunConfig rc = read_config(a.config);
    const SiameseNetwork net = network_from_checkpoint(load_checkpoint(a.checkpoint));
    const auto& mc = net.config();
    const CropGeometry geo{mc.template_size, mc.search_size, mc.context_factor};

    std::vector<std::vector<double>> backbone, bridged;
    std::vector<std::string> domains, names;
    for (const auto& [domain, root] : {std::pair{"day", a.day}, std::pair{"night", a.night}}) {
        for (const auto& seq : load_split(root, Split::train_unlabeled)) {
            for (const auto& [t, box] : feature_boxes(seq, a.frames, rc.discovery)) {
                const auto f = net.features(image_to_tensor(crop_search(seq.frame(t), box, geo)),
                                            FeatureRole::bridged_search);
                backbone.push_back(f.backbone.data->value);
                bridged.push_back(f.bridged.data->value);
                domains.push_back(domain);
                names.push_back(seq.name);
            }
        }
    }
    std::vector<ProjectionRow> rows;
    auto emit = [&](const std::string& stage, const std::vector<std::vector<double>>& feats) {
        const auto pts = project_features_2d(feats, domains);
        for (std::size_t i = 0; i < pts.size(); ++i) rows.push_back({stage, domains[i], names[i], pts[i].x, pts[i].y});
    };
    emit("backbone", backbone);
    if (net.bridge()) emit("bridged", bridged);
    write_projection_csv(a.out, rows);
    std::cout << "projected " << backbone.size() << " features\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unsupervised day-to-night domain adaptation for Siamese tracking"};
    app.require_subcommand(1);

    DiscoverArgs da;
    auto* discover = app.add_subcommand("discover", "Discover object tracks in unlabeled videos");
    discover->add_option("--data", da.data, "Root of the unlabeled split")->required();
    discover->add_option("--out", da.out, "Output directory")->required();
    discover->add_option("--config", da.config, "Run config (JSON); its 'discovery' section is used");
    discover->add_flag("!--no-patches", da.patches, "Skip writing patch pairs");

    TrainArgs ta;
    auto* trainc = app.add_subcommand("train", "Adversarial day-to-night training");
    trainc->add_option("--source", ta.source, "Labeled source (day) root");
    trainc->add_option("--target", ta.target, "Unlabeled target (night) root");
    trainc->add_option("--config", ta.config, "Run config or manifest (JSON)")->required();
    trainc->add_option("--out", ta.out, "Run directory")->required();
    trainc->add_flag("--no-da", ta.no_da, "Disable domain adaptation (source-only training)");
    trainc->add_flag("--random-crop", ta.random_crop, "Random target crops instead of object discovery");
    trainc->add_flag("--no-bridge", ta.no_bridge, "Remove the bridging layer");

    EvalArgs ea;
    auto* evalc = app.add_subcommand("eval", "One-pass evaluation");
    evalc->add_option("--data", ea.data, "Labeled test root")->required();
    evalc->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    evalc->add_option("--out", ea.out, "Output directory")->required();
    evalc->add_option("--subset", ea.subset, "Sequence subset (long-term)");
    evalc->add_option("--attribute", ea.attribute, "Only sequences carrying this attribute tag");
    evalc->add_option("--name", ea.name, "Tracker name in reports (default: checkpoint stem)");

    AttributeArgs aa;
    auto* attrc = app.add_subcommand("attributes", "Compute illumination attributes");
    attrc->add_option("--data", aa.data, "Labeled root")->required();
    attrc->add_option("--out", aa.out, "Output CSV file")->required();
    attrc->add_option("--iv-threshold", aa.iv_threshold, "Illumination-variation threshold")->capture_default_str();

    PlotArgs pa;
    auto* plotc = app.add_subcommand("plot-features", "2-D projection of day/night features");
    plotc->add_option("--checkpoint", pa.checkpoint, "Checkpoint file")->required();
    plotc->add_option("--data-day", pa.day, "Day root")->required();
    plotc->add_option("--data-night", pa.night, "Night root")->required();
    plotc->add_option("--out", pa.out, "Output CSV file")->required();
    plotc->add_option("--frames", pa.frames, "Frames sampled per sequence")->capture_default_str();
    plotc->add_option("--config", pa.config, "Run config (JSON); its 'discovery' section is used");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*discover) return run_discover(da);
        if (*trainc) return run_train(ta);
        if (*evalc) return run_eval(ea);
        if (*attrc) return run_attributes(aa);
        if (*plotc) return run_plot_features(pa);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitData;
    } catch (const NotFoundError& e) {
        std::cerr << "not found: " << e.what() << '\n';
        return kExitData;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
