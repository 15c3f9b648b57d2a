#pragma once

#include "explora/rng.hpp"
#include "explora/tensor.hpp"

namespace explora {

// Additive low-rank update on a frozen weight W0 [in, out]:
//   y = x W0 + (alpha / rank) * (x A) B
// A is the down projection drawn from N(0, 1/rank); B starts at zero so a
// fresh adapter contributes exactly nothing.
struct LoRAAdapter {
    Tensor a;  // [in, rank]
    Tensor b;  // [rank, out]
    int64_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    static LoRAAdapter init(int64_t in_dim, int64_t out_dim, int64_t rank, double alpha, Rng& rng,
                            DType dt);
};

} // namespace explora
