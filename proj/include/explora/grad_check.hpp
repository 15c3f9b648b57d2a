#pragma once

#include <functional>
#include <vector>

#include "explora/tensor.hpp"

namespace explora {

// Compares tape gradients against central finite differences.
// The relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.

// Gradient of fn w.r.t. a single input point. fn must return a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step);

// Gradient of a closure w.r.t. a list of parameters it captures. Parameter
// data is perturbed in place and restored.
double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double step);

} // namespace explora
