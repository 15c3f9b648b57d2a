#pragma once

#include <vector>

#include "explora/tensor.hpp"

namespace explora {
namespace ops {

// All operations validate shapes/dtypes, reject non-finite inputs, and record
// a backward closure on the active tape when any input requires grad.

// c[m,n] = a[m,k] * b[k,n]; backward dA = G*B^T, dB = A^T*G
Tensor matmul(const Tensor& a, const Tensor& b);

// batched: a[g,m,k] * b[g,k,n] with optional transposition of the stored
// per-batch matrices (a stored [g,k,m] when trans_a, b stored [g,n,k] when trans_b)
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// elementwise with right-aligned numpy-style broadcasting
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor gelu(const Tensor& x);  // exact erf formulation
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor clamp_min(const Tensor& x, double v);

// last-axis kernels
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// data movement
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor transpose2d(const Tensor& x);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& indices);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// stack n tensors of identical shape along a fresh leading axis
Tensor stack(const std::vector<Tensor>& parts);
// broadcast a tensor of shape s to [n, s...] (copying); backward sums over the axis
Tensor expand_leading(const Tensor& x, int64_t n);

// reductions
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);

// losses
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

} // namespace ops
} // namespace explora
