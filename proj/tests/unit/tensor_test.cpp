// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <doctest.h>

#include "../support/grad_cases.hpp"
#include "pvt/gradcheck.hpp"
#include "pvt/optim.hpp"
#include "pvt/tensor.hpp"

using namespace pvt;

namespace {

Tensor f64(Shape shape, std::vector<double> v) { return Tensor::from(std::move(shape), std::move(v), DType::f64); }

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::IoFailure;
}

}  // namespace

TEST_CASE("matmul by identity returns the input") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(a, Tensor::eye(2)).bit_equal(a));
}

TEST_CASE("softmax of equal logits is uniform") {
    Tensor s = softmax(f64({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) {
        CHECK(s[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
}

TEST_CASE("cross entropy matches the closed form") {
    // -log softmax([2, 0])[0] = log(1 + e^-2)
    const int64_t target[] = {0};
    const double oracle = std::log1p(std::exp(-2.0));
    CHECK(cross_entropy(f64({1, 2}, {2, 0}), target).item() == doctest::Approx(oracle).epsilon(1e-14));
    CHECK(oracle == doctest::Approx(0.1269).epsilon(1e-3));
}

TEST_CASE("quadratic gradient") {
    Tensor x = f64({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    GradMap g = backward(sum(mul(x, x)));
    Tensor gx = grad_of(g, x);
    CHECK(gx[0] == 2.0);
    CHECK(gx[1] == 4.0);
    CHECK(gx[2] == 6.0);
}

TEST_CASE("constant leaves are absent from the gradient map") {
    Tensor x = f64({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor c = f64({2}, {3, 4});
    Tape tape;
    TapeScope scope(tape);
    GradMap g = backward(sum(mul(x, c)));
    CHECK(g.count(x.id()) == 1);
    CHECK(g.count(c.id()) == 0);
}

TEST_CASE("unreachable parameters get zero gradients") {
    Tensor x = f64({2}, {1, 2});
    Tensor y = f64({2}, {5, 6});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor unused = mul(y, y);
    GradMap g = backward(sum(x));
    Tensor gy = grad_of(g, y);
    CHECK(gy[0] == 0.0);
    CHECK(gy[1] == 0.0);
}

TEST_CASE("fan-out accumulates gradients") {
    Tensor x = f64({1}, {3});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = add(mul(x, x), scale(x, 2.0));
    CHECK(grad_of(backward(sum(y)), x)[0] == 8.0);
}

TEST_CASE("backward errors") {
    Tensor x = f64({2}, {1, 2});
    x.set_requires_grad(true);
    CHECK(code_of([&] { backward(sum(x)); }) == ErrorCode::NoTape);
    Tape tape;
    TapeScope scope(tape);
    CHECK(code_of([&] { backward(mul(x, x)); }) == ErrorCode::NotScalar);
}

TEST_CASE("shape and dtype errors") {
    Tensor a = Tensor::zeros({2, 3});
    CHECK(code_of([&] { matmul(a, Tensor::zeros({2, 3})); }) == ErrorCode::ShapeMismatch);
    CHECK(code_of([&] { add(a, Tensor::zeros({2})); }) == ErrorCode::ShapeMismatch);
    CHECK(code_of([&] { add(a, Tensor::zeros({2, 3}, DType::f64)); }) == ErrorCode::DTypeMismatch);
}

TEST_CASE("softmax rows sum to one and layernorm standardizes") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 3.0);
    std::vector<double> v(4 * 7);
    for (double& x : v) {
        x = n(rng);
    }
    Tensor x = Tensor::from({4, 7}, v);
    Tensor s = softmax(x);
    Tensor ln = layernorm(x.to(DType::f64), Tensor::full({7}, 1.0, DType::f64), Tensor::zeros({7}, DType::f64));
    for (int64_t r = 0; r < 4; ++r) {
        double total = 0.0;
        double m = 0.0;
        double sq = 0.0;
        for (int64_t c = 0; c < 7; ++c) {
            total += s[r * 7 + c];
            m += ln[r * 7 + c] / 7.0;
            sq += ln[r * 7 + c] * ln[r * 7 + c] / 7.0;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
        CHECK(std::abs(m) < 1e-5);
        // eps = 1e-5 in the denominator shrinks the variance slightly.
        CHECK(std::abs(sq - m * m - 1.0) < 1e-5);
    }
}

TEST_CASE("f32 outputs hold float-representable values") {
    Tensor a = Tensor::from({3}, {0.1, 0.2, 0.3});
    Tensor y = tanh(scale(a, 1.0 / 3.0));
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(static_cast<double>(static_cast<float>(y[i])) == y[i]);
    }
}

TEST_CASE("forward passes are deterministic") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> v(20);
    for (double& x : v) {
        x = u(rng);
    }
    Tensor x = Tensor::from({4, 5}, v);
    Tensor y1 = gelu(layernorm(x, Tensor::full({5}, 1.0), Tensor::zeros({5})));
    Tensor y2 = gelu(layernorm(x, Tensor::full({5}, 1.0), Tensor::zeros({5})));
    CHECK(y1.bit_equal(y2));
}

TEST_CASE("finite differences agree for every primitive") {
    for (const auto& c : testing::primitive_grad_cases()) {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const double err = c.run(seed);
            INFO(c.name << " seed " << seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("finite differences on sum are exact") {
    Tensor x = f64({4}, {0.5, -1.0, 2.0, 0.25});
    CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, x) < 1e-9);
}

TEST_CASE("saturated tanh stays within the looser bound") {
    Tensor x = f64({4}, {20.0, -20.0, 19.5, -19.5});
    Tensor w = f64({4}, {1.0, -2.0, 0.5, 3.0});
    const double err = finite_diff_check([&](const Tensor& t) { return sum(mul(tanh(t), w)); }, x);
    CHECK(err < 1e-3);
}

TEST_CASE("adam leaves parameters alone on zero gradient") {
    Tensor p = f64({3}, {1, 2, 3});
    std::vector<Tensor> params{p};
    Adam adam({.lr = 0.1});
    adam.step(params, std::vector<Tensor>{Tensor::zeros({3}, DType::f64)});
    CHECK(p.bit_equal(f64({3}, {1, 2, 3})));
    CHECK(adam.state().step == 1);
}

TEST_CASE("adam minimizes a one-dimensional quadratic") {
    // (x - 3)^2 from x = -2
    Tensor x = f64({1}, {-2.0});
    x.set_requires_grad(true);
    std::vector<Tensor> params{x};
    Adam adam({.lr = 0.1});
    for (int i = 0; i < 200; ++i) {
        Tape tape;
        TapeScope scope(tape);
        Tensor d = add_scalar(x, -3.0);
        adam.step(params, backward(sum(mul(d, d))));
    }
    CHECK(std::abs(x[0] - 3.0) < 1e-3);
}

TEST_CASE("adam step counter") {
    Tensor p = f64({1}, {0});
    std::vector<Tensor> params{p};
    std::vector<Tensor> g{f64({1}, {1})};
    Adam once;
    once.step(params, g);
    Adam twice;
    twice.step(params, g);
    twice.step(params, g);
    CHECK(once.state().step == 1);
    CHECK(twice.state().step == 2);
    CHECK(code_of([&] { once.step(params, std::vector<Tensor>{f64({2}, {1, 1})}); }) == ErrorCode::ShapeMismatch);
}
