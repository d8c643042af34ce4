#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "udat/core_types.hpp"
#include "udat/nn.hpp"

namespace udat {

/// base_lr · (1 - step/total)^power.
inline double poly_lr(long step, long total_steps, double base_lr, double power) {
    if (total_steps <= 0) throw RangeError("poly_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw RangeError("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adaptive-moment descent with bias correction. Moment buffers are keyed
/// by parameter node, so one optimizer serves a fixed parameter group.
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamOptions opts) : opts_(opts) {}

    void step(const nn::ParamList& params, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (const auto& [name, p] : params) {
            if (p->grad.size() != p->value.size()) continue;
            auto& st = state_[p.get()];
            if (st.m.empty()) {
                st.m.assign(p->value.size(), 0.0);
                st.v.assign(p->value.size(), 0.0);
            }
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i] + opts_.weight_decay * p->value[i];
                st.m[i] = opts_.beta1 * st.m[i] + (1.0 - opts_.beta1) * g;
                st.v[i] = opts_.beta2 * st.v[i] + (1.0 - opts_.beta2) * g * g;
                p->value[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + opts_.eps);
            }
        }
    }

    [[nodiscard]] long steps() const noexcept { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamOptions opts_;
    long t_ = 0;
    std::unordered_map<const ag::Node*, Moments> state_;
};

}  // namespace udat
