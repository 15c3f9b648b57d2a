#include "explora/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace explora {

namespace {

double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

double eval_scalar(const std::function<Tensor()>& fn) {
    NoGrad ng;
    Tensor v = fn();
    if (v.numel() != 1)
        throw ContractError("grad_check: function must return a scalar, got shape " + shape_str(v.shape()));
    return v.item();
}

double check_one(const std::function<Tensor()>& fn, Tensor param, const std::vector<double>& analytic,
                 double step) {
    double worst = 0.0;
    const int64_t n = param.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double orig = param.at(i);
        param.set(i, orig + step);
        const double fp = eval_scalar(fn);
        param.set(i, orig - step);
        const double fm = eval_scalar(fn);
        param.set(i, orig);
        const double numeric = (fp - fm) / (2.0 * step);
        worst = std::max(worst, rel_error(analytic[static_cast<size_t>(i)], numeric));
    }
    return worst;
}

} // namespace

double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double step) {
    if (step <= 0) throw ContractError("grad_check: step must be positive");
    std::vector<bool> saved_flags;
    for (const Tensor& p : params) saved_flags.push_back(p.requires_grad());
    for (Tensor p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tape tape;
        Tensor loss = fn();
        if (loss.numel() != 1)
            throw ContractError("grad_check: function must return a scalar, got shape " +
                                shape_str(loss.shape()));
        tape.backward(loss);
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        std::vector<double> analytic(static_cast<size_t>(p.numel()), 0.0);
        if (p.has_grad()) {
            for (int64_t i = 0; i < p.numel(); ++i) {
                if (p.dtype() == DType::f32)
                    analytic[static_cast<size_t>(i)] = std::as_const(p).grad<float>()[static_cast<size_t>(i)];
                else
                    analytic[static_cast<size_t>(i)] = std::as_const(p).grad<double>()[static_cast<size_t>(i)];
            }
        }
        worst = std::max(worst, check_one(fn, p, analytic, step));
        p.zero_grad();
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        p.set_requires_grad(saved_flags[pi]);
    }
    return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step) {
    Tensor x = point.clone();
    return grad_check_params([&fn, &x]() { return fn(x); }, {x}, step);
}

} // namespace explora
