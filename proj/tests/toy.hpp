#pragma once

// Desk-scale configurations shared by the training tests, the CLI tests and
// the acceptance binary. Patches are small enough that a step takes tens of
// milliseconds on one core.

#include "udat/udat.hpp"

namespace toy {

inline udat::ModelConfig model(bool bridge = true) {
    udat::ModelConfig mc;
    mc.backbone.channels = {8, 16, 24, 32};
    mc.backbone.strides = {2, 2, 1, 1};
    mc.backbone.used_blocks = 2;
    mc.use_bridge = bridge;
    mc.bridge_heads = 4;
    mc.bridge_ffn_hidden = 64;
    mc.head_hidden = 32;
    mc.discriminator = {32, 4, 64, 2, 4};
    mc.template_size = 16;
    mc.search_size = 32;
    return mc;
}

inline udat::DiscoveryConfig discovery() {
    udat::DiscoveryConfig dc;
    dc.crop = {16, 32, 0.5};
    return dc;
}

inline udat::TrainingCorpus corpus(int per_domain, std::uint64_t seed, bool random_crop = false,
                                   const udat::synthetic::SceneConfig& scene = {}) {
    using namespace udat::synthetic;
    udat::TrainingCorpus c;
    c.source = make_corpus(Domain::day, per_domain, scene, 11 + seed, "day");
    std::mt19937_64 rng(seed * 31 + 5);
    for (auto& s : make_corpus(Domain::night, per_domain, scene, 22 + seed, "night")) {
        udat::BoxTrack track = random_crop
                                   ? udat::random_crop_track(s.size(), scene.width, scene.height, rng)
                                   : udat::discover_objects(s, discovery()).track;
        c.target.push_back({std::move(s), std::move(track)});
    }
    return c;
}

}  // namespace toy
