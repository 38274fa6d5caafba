#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mktod/autodiff.hpp"

namespace mktod::optim {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled, applied outside the adaptive term
    double clip_norm = 0.01;     // global-norm clip over this optimizer's group
    int total_steps = 0;         // > 0 enables linear decay to zero
};

// Adam over the subset of a ParameterStore whose names start with `prefix`
// (empty prefix = all parameters). Gradient clipping and weight decay are
// scoped to that group.
class Adam {
public:
    Adam(ad::ParameterStore& store, AdamConfig cfg, std::string prefix = "");

    void step();
    int steps_done() const { return t_; }
    double current_lr() const;
    // Grad norm of the group before clipping, from the most recent step().
    double last_grad_norm() const { return last_grad_norm_; }

private:
    struct Slot {
        ad::Tensor param;
        std::vector<double> m, v;
    };

    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int t_ = 0;
    double last_grad_norm_ = 0.0;
};

}  // namespace mktod::optim
