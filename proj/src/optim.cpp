#include "explora/optim.hpp"

#include <cmath>
#include <numbers>

namespace explora {

void adamw_step(const std::vector<NamedParam>& params, OptimizerState& state, double lr,
                const AdamWConfig& cfg) {
    for (const NamedParam& np : params) {
        if (!np.tensor.has_grad())
            throw ContractError("adamw_step: parameter '" + np.name + "' has no gradient");
        auto it = state.slots.find(np.name);
        if (it == state.slots.end()) {
            OptimizerState::Slot slot;
            slot.m = Tensor::zeros(np.tensor.shape(), np.tensor.dtype());
            slot.v = Tensor::zeros(np.tensor.shape(), np.tensor.dtype());
            it = state.slots.emplace(np.name, std::move(slot)).first;
        }
        OptimizerState::Slot& slot = it->second;
        if (slot.m.shape() != np.tensor.shape())
            throw ContractError("adamw_step: state shape mismatch for '" + np.name + "'");
        slot.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.step));
        Tensor p = np.tensor;
        const int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double g = p.dtype() == DType::f32
                                 ? static_cast<double>(std::as_const(p).grad<float>()[static_cast<size_t>(i)])
                                 : std::as_const(p).grad<double>()[static_cast<size_t>(i)];
            const double m = cfg.beta1 * slot.m.at(i) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * slot.v.at(i) + (1.0 - cfg.beta2) * g * g;
            slot.m.set(i, m);
            slot.v.set(i, v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            const double w = p.at(i);
            p.set(i, w - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w));
        }
    }
}

double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm) {
    if (max_norm <= 0) throw ContractError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const NamedParam& np : params) {
        if (!np.tensor.has_grad()) continue;
        const Tensor& p = np.tensor;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double g = p.dtype() == DType::f32
                                 ? static_cast<double>(std::as_const(p).grad<float>()[static_cast<size_t>(i)])
                                 : std::as_const(p).grad<double>()[static_cast<size_t>(i)];
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const double scale = max_norm / norm;
        for (const NamedParam& np : params) {
            if (!np.tensor.has_grad()) continue;
            Tensor p = np.tensor;
            if (p.dtype() == DType::f32) {
                auto g = p.grad<float>();
                for (float& x : g) x = static_cast<float>(x * scale);
            } else {
                auto g = p.grad<double>();
                for (double& x : g) x *= scale;
            }
        }
    }
    return norm;
}

void zero_grads(const std::vector<NamedParam>& params) {
    for (const NamedParam& np : params) {
        Tensor t = np.tensor;
        t.zero_grad();
    }
}

double Schedule::lr_at(int64_t t) const {
    if (t < 0 || t > total_iters)
        throw ContractError("Schedule::lr_at: iteration " + std::to_string(t) + " outside [0, " +
                            std::to_string(total_iters) + "]");
    if (warmup_iters > 0 && t < warmup_iters)
        return base_lr * static_cast<double>(t + 1) / static_cast<double>(warmup_iters);
    const int64_t span = total_iters - warmup_iters;
    if (span <= 0) return base_lr;
    const double progress = static_cast<double>(t - warmup_iters) / static_cast<double>(span);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace explora
