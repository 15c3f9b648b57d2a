#include "doctest.h"

#include <cmath>

#include "explora/ops.hpp"
#include "explora/rng.hpp"
#include "explora/tensor.hpp"

using namespace explora;

TEST_CASE("tensor shape/data invariants") {
    Tensor t = Tensor::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.data<float>().size() == 24);
    CHECK(t.dim(-1) == 4);
    CHECK(t.dtype() == DType::f32);

    Tensor v = Tensor::from_values({2, 2}, {1, 2, 3, 4}, DType::f64);
    CHECK(v.at(3) == doctest::Approx(4.0));
    CHECK_THROWS_AS((void)Tensor::from_values({3}, {1, 2}), ShapeError);
}

TEST_CASE("grad buffer matches shape and dtype") {
    Tensor t = Tensor::zeros({5}, DType::f64);
    t.set_requires_grad(true);
    CHECK(!t.has_grad());
    auto g = t.grad<double>();
    CHECK(g.size() == 5);
    CHECK(g[0] == 0.0);
    CHECK_THROWS_AS((void)t.grad<float>(), ContractError);  // dtype must match
}

TEST_CASE("clone is deep and astype converts") {
    Tensor a = Tensor::from_values({2}, {1.5, -2.5});
    Tensor b = a.clone();
    b.set(0, 9.0);
    CHECK(a.at(0) == doctest::Approx(1.5));
    Tensor d = a.astype(DType::f64);
    CHECK(d.dtype() == DType::f64);
    CHECK(d.at(1) == doctest::Approx(-2.5));
}

TEST_CASE("rng determinism and serialization") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(a.normal() == b.normal());
    const std::string state = a.serialize();
    const double expect0 = a.normal();
    const double expect1 = a.uniform();
    Rng c(0);
    c.deserialize(state);
    CHECK(c.normal() == expect0);
    CHECK(c.uniform() == expect1);
}

TEST_CASE("rng permutation covers all indices") {
    Rng rng(7);
    auto p = rng.permutation(32);
    std::vector<bool> seen(32, false);
    for (int64_t i : p) seen[static_cast<size_t>(i)] = true;
    for (bool s : seen) CHECK(s);
}

TEST_CASE("ops reject NaN and Inf inputs") {
    Tensor bad = Tensor::from_values({2}, {1.0, std::nan("")});
    Tensor good = Tensor::from_values({2}, {1.0, 2.0});
    CHECK_THROWS_AS((void)ops::add(bad, good), NumericError);
    CHECK_THROWS_AS((void)ops::scale(bad, 2.0), NumericError);
    Tensor inf = Tensor::from_values({1, 2}, {1.0, INFINITY});
    CHECK_THROWS_AS((void)ops::softmax(inf), NumericError);
    CHECK_THROWS_AS((void)ops::mse(inf, Tensor::zeros({1, 2})), NumericError);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        (void)ops::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 2]") != std::string::npos);
    }
}

TEST_CASE("determinism: identical seed and op sequence is bitwise identical") {
    auto run = [] {
        Rng rng(123);
        Tensor a = Tensor::randn({8, 8}, rng, 1.0);
        Tensor b = Tensor::randn({8, 8}, rng, 1.0);
        Tensor c = ops::gelu(ops::matmul(a, b));
        return c;
    };
    Tensor x = run(), y = run();
    auto px = x.data<float>(), py = y.data<float>();
    for (size_t i = 0; i < px.size(); ++i) CHECK(px[i] == py[i]);
}
