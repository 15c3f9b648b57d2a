#pragma once

#include <map>
#include <string>
#include <vector>

#include "explora/vit.hpp"

namespace explora {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Per-parameter moment buffers, keyed by canonical parameter name. Slots are
// created on first update, so state exists exactly for parameters that have
// actually trained.
struct OptimizerState {
    struct Slot {
        Tensor m, v;
        int64_t step = 0;
    };
    std::map<std::string, Slot> slots;

    void clear() { slots.clear(); }
};

// Decoupled-weight-decay Adam. Every parameter in `params` must carry a
// gradient; frozen parameters must not be passed.
void adamw_step(const std::vector<NamedParam>& params, OptimizerState& state, double lr,
                const AdamWConfig& cfg = {});

// Global-norm clip over all present gradients; returns the pre-clip norm.
double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm);

void zero_grads(const std::vector<NamedParam>& params);

// Linear warmup to base_lr, then cosine decay to zero at total_iters.
struct Schedule {
    double base_lr = 1e-3;
    int64_t warmup_iters = 0;
    int64_t total_iters = 1;

    double lr_at(int64_t t) const;
};

} // namespace explora
