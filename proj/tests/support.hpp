#pragma once

// Independent oracles and helpers shared by the test binaries. Nothing here
// calls the routine it is used to check.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "udat/autograd.hpp"
#include "udat/core_types.hpp"
#include "udat/discovery.hpp"

namespace oracle {

using udat::BoundingBox;

inline BoundingBox random_box(std::mt19937_64& rng, double span = 100.0) {
    std::uniform_real_distribution<double> pos(-span, span), size(0.5, span / 2);
    return {pos(rng), pos(rng), size(rng), size(rng)};
}

/// Squared-offset and squared-log-ratio distance written out term by term.
inline double box_distance(const BoundingBox& c, const BoundingBox& r) {
    const double dx = (c.x - r.x) / r.w;
    const double dy = (c.y - r.y) / r.h;
    const double lw = std::log(c.w / r.w);
    const double lh = std::log(c.h / r.h);
    return dx * dx + dy * dy + lw * lw + lh * lh;
}

/// Exhaustive search over every assignment of "skip or candidate k" to each
/// frame. Returns the best objective.
inline double brute_force_best(const udat::CandidateSet& cs, double reward) {
    const std::size_t T = cs.frames.size();
    std::vector<int> choice(T, -1);
    double best = -std::numeric_limits<double>::infinity();
    std::function<void(std::size_t)> rec = [&](std::size_t t) {
        if (t == T) {
            double total = 0.0;
            std::optional<BoundingBox> prev;
            bool any = false;
            for (std::size_t u = 0; u < T; ++u) {
                if (choice[u] < 0) continue;
                const BoundingBox& b = cs.frames[u][choice[u]];
                total += reward - (prev ? box_distance(b, *prev) : 0.0);
                prev = b;
                any = true;
            }
            if (any) best = std::max(best, total);
            return;
        }
        choice[t] = -1;
        rec(t + 1);
        for (int k = 0; k < static_cast<int>(cs.frames[t].size()); ++k) {
            choice[t] = k;
            rec(t + 1);
        }
        choice[t] = -1;
    };
    rec(0);
    return best;
}

/// 8-connected flood fill with an explicit stack; returns tight boxes of all
/// components (any order).
inline std::vector<BoundingBox> flood_fill_boxes(const udat::Mask& m) {
    std::vector<char> seen(m.data.size(), 0);
    std::vector<BoundingBox> out;
    for (int y0 = 0; y0 < m.height; ++y0)
        for (int x0 = 0; x0 < m.width; ++x0) {
            if (!m.at(x0, y0) || seen[y0 * m.width + x0]) continue;
            int minx = x0, maxx = x0, miny = y0, maxy = y0;
            std::vector<std::pair<int, int>> stack{{x0, y0}};
            seen[y0 * m.width + x0] = 1;
            while (!stack.empty()) {
                auto [x, y] = stack.back();
                stack.pop_back();
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= m.width || ny >= m.height) continue;
                        if (!m.at(nx, ny) || seen[ny * m.width + nx]) continue;
                        seen[ny * m.width + nx] = 1;
                        stack.emplace_back(nx, ny);
                    }
            }
            out.push_back({double(minx), double(miny), double(maxx - minx + 1), double(maxy - miny + 1)});
        }
    return out;
}

/// Sliding-window correlation per channel, [C,H,W] row-major.
inline std::vector<double> naive_xcorr(const std::vector<double>& z, int C, int hz, int wz, const std::vector<double>& x,
                                       int hx, int wx) {
    const int ho = hx - hz + 1, wo = wx - wz + 1;
    std::vector<double> out(static_cast<std::size_t>(C) * ho * wo, 0.0);
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
                double s = 0.0;
                for (int u = 0; u < hz; ++u)
                    for (int v = 0; v < wz; ++v)
                        s += z[(c * hz + u) * wz + v] * x[(c * hx + i + u) * wx + j + v];
                out[(c * ho + i) * wo + j] = s;
            }
    return out;
}

/// Central finite differences of a scalar function of `x`'s values.
inline std::vector<double> numeric_gradient(const udat::ag::Var& x, const std::function<double()>& f,
                                            double h = 1e-6) {
    std::vector<double> g(x->value.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double keep = x->value[i];
        x->value[i] = keep + h;
        const double up = f();
        x->value[i] = keep - h;
        const double down = f();
        x->value[i] = keep;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

/// max |a-b| / max(1e-8, max |b|): relative error normalised by the scale of
/// the reference gradient.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max(scale, std::abs(b[i]));
    }
    return diff / std::max(1e-8, scale);
}

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

}  // namespace oracle
