#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "udat/autograd.hpp"

namespace udat::nn {

using ag::Var;

/// Named parameter handles, `<module>.<layer>.<param>`.
using ParamList = std::vector<std::pair<std::string, Var>>;

inline void set_requires_grad(const ParamList& params, bool flag) {
    for (const auto& [name, v] : params) v->requires_grad = flag;
}

inline void zero_grad(const ParamList& params) {
    for (const auto& [name, v] : params) v->grad.assign(v->value.size(), 0.0);
}

/// Restores requires_grad on scope exit.
class FreezeGuard {
public:
    explicit FreezeGuard(ParamList params) : params_(std::move(params)) { set_requires_grad(params_, false); }
    ~FreezeGuard() { set_requires_grad(params_, true); }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    ParamList params_;
};

template <class Rng>
std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

struct Linear {
    Var weight;  // [in, out]
    Var bias;    // [out]

    Linear() = default;
    template <class Rng>
    Linear(int in, int out, Rng& rng, double gain = 1.0)
        : weight(ag::parameter({in, out}, normal_values(static_cast<std::size_t>(in) * out,
                                                         gain * std::sqrt(2.0 / (in + out)), rng))),
          bias(ag::parameter({out}, std::vector<double>(out, 0.0))) {}

    [[nodiscard]] Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

struct LayerNorm {
    Var gain;
    Var bias;

    LayerNorm() = default;
    explicit LayerNorm(int dim)
        : gain(ag::parameter({dim}, std::vector<double>(dim, 1.0))),
          bias(ag::parameter({dim}, std::vector<double>(dim, 0.0))) {}

    [[nodiscard]] Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gain, bias); }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".gain", gain);
        out.emplace_back(prefix + ".bias", bias);
    }
};

struct Conv2d {
    Var weight;  // [out, in, k, k]
    Var bias;
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    template <class Rng>
    Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng)
        : weight(ag::parameter({out, in, kernel, kernel},
                               normal_values(static_cast<std::size_t>(out) * in * kernel * kernel,
                                             std::sqrt(2.0 / (in * kernel * kernel)), rng))),
          bias(ag::parameter({out}, std::vector<double>(out, 0.0))),
          stride(stride_),
          pad(pad_) {}

    [[nodiscard]] Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Two linear maps with a ReLU in between.
struct FeedForward {
    Linear fc1;
    Linear fc2;

    FeedForward() = default;
    template <class Rng>
    FeedForward(int dim, int hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

    [[nodiscard]] Var operator()(const Var& x) const { return fc2(ag::relu(fc1(x))); }

    void collect(ParamList& out, const std::string& prefix) const {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

}  // namespace udat::nn
