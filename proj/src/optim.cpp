#include "mktod/optim.hpp"

#include <algorithm>
#include <cmath>

namespace mktod::optim {

Adam::Adam(ad::ParameterStore& store, AdamConfig cfg, std::string prefix) : cfg_(cfg) {
    for (auto& [name, tensor] : store) {
        if (name.rfind(prefix, 0) != 0) continue;
        Slot s;
        s.param = tensor;
        s.m.assign(tensor.values().size(), 0.0);
        s.v.assign(tensor.values().size(), 0.0);
        slots_.push_back(std::move(s));
    }
}

double Adam::current_lr() const {
    if (cfg_.total_steps <= 0) return cfg_.lr;
    const double remaining =
        std::max(0.0, static_cast<double>(cfg_.total_steps - t_) / cfg_.total_steps);
    return cfg_.lr * remaining;
}

void Adam::step() {
    double sq = 0.0;
    for (const auto& s : slots_) {
        for (double g : s.param.grad()) sq += g * g;
    }
    last_grad_norm_ = std::sqrt(sq);
    const double clip_scale =
        (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm)
            ? cfg_.clip_norm / last_grad_norm_
            : 1.0;

    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);

    for (auto& s : slots_) {
        auto& p = s.param.values();
        const auto& g = s.param.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i] * clip_scale;
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
        }
    }
}

}  // namespace mktod::optim
