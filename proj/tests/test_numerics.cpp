#include "doctest.h"

#include <cmath>
#include <vector>

#include "peftkit/optim.hpp"
#include "peftkit/tensor.hpp"

#include "grad_check.hpp"

using namespace peftkit;

namespace {

template <class S>
Tensor<S> random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    return Tensor<S>::randn(std::move(shape), rng, 1.0, requires_grad);
}

// scalar triple-loop reference, independent of the matmul implementation
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    return out;
}

} // namespace

TEST_CASE("matmul identity and annihilator") {
    Rng rng(1);
    Tensor<float> m = random_tensor<float>({3, 3}, rng);
    std::vector<float> eye(9, 0.0f);
    eye[0] = eye[4] = eye[8] = 1.0f;
    Tensor<float> id = Tensor<float>::from_data({3, 3}, eye);

    Tensor<float> out = matmul(id, m);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(out.values()[i] == m.values()[i]);
    }

    Tensor<float> z = Tensor<float>::zeros({3, 4});
    Tensor<float> zero_out = matmul(m, z);
    for (float v : zero_out.values()) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(7);
    Tensor<double> a = random_tensor<double>({4, 5}, rng);
    Tensor<double> b = random_tensor<double>({5, 3}, rng);
    const std::vector<double> expect = matmul_oracle(a.values(), b.values(), 4, 5, 3);
    Tensor<double> got = matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(got.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor<float> a = Tensor<float>::zeros({2, 3});
    Tensor<float> b = Tensor<float>::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax uniform, shift invariance and oracle") {
    Tensor<float> flat = Tensor<float>::from_data({4}, {0.0f, 0.0f, 0.0f, 0.0f});
    Tensor<float> uniform = softmax(flat);
    for (float v : uniform.values()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
    }

    Tensor<double> x = Tensor<double>::from_data({3}, {0.3, -1.2, 2.0});
    Tensor<double> shifted = Tensor<double>::from_data({3}, {0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0});
    Tensor<double> sx = softmax(x);
    Tensor<double> ss = softmax(shifted);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(sx.values()[i] == doctest::Approx(ss.values()[i]).epsilon(1e-12));
    }

    // direct exp/sum oracle in 64-bit
    Tensor<double> v = Tensor<double>::from_data({3}, {1.0, 2.0, 3.0});
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    Tensor<double> sv = softmax(v);
    CHECK(sv.values()[0] == doctest::Approx(std::exp(1.0) / denom).epsilon(1e-12));
    CHECK(sv.values()[1] == doctest::Approx(std::exp(2.0) / denom).epsilon(1e-12));
    CHECK(sv.values()[2] == doctest::Approx(std::exp(3.0) / denom).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
    Rng rng(11);
    Tensor<float> x = random_tensor<float>({6, 8}, rng);
    Tensor<float> y = softmax(x);
    for (std::size_t r = 0; r < 6; ++r) {
        float total = 0.0f;
        for (std::size_t c = 0; c < 8; ++c) {
            const float v = y.values()[r * 8 + c];
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
            total += v;
        }
        CHECK(total == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("softmax rejects scalars and bad axes") {
    Tensor<float> s = Tensor<float>::scalar(1.0f);
    CHECK_THROWS_AS(softmax(s), ShapeError);
    Tensor<float> x = Tensor<float>::zeros({2, 3});
    CHECK_THROWS_AS(softmax(x, 2), ShapeError);
}

TEST_CASE("rmsnorm trivial rows and 64-bit oracle") {
    const std::size_t c = 6;
    Tensor<float> ones_row = Tensor<float>::full({c}, 1.0f);
    Tensor<float> w = Tensor<float>::full({c}, 1.0f);
    Tensor<float> out = rmsnorm(ones_row, w, 1e-12f);
    for (float v : out.values()) {
        CHECK(v == doctest::Approx(1.0f).epsilon(1e-5));
    }

    Tensor<float> zero_w = Tensor<float>::zeros({c});
    Tensor<float> zeroed = rmsnorm(ones_row, zero_w, 1e-6f);
    for (float v : zeroed.values()) {
        CHECK(v == 0.0f);
    }

    Rng rng(3);
    Tensor<double> x = random_tensor<double>({c}, rng);
    Tensor<double> wd = random_tensor<double>({c}, rng);
    const double eps = 1e-5;
    double ms = 0.0;
    for (double v : x.values()) {
        ms += v * v;
    }
    ms = ms / static_cast<double>(c) + eps;
    Tensor<double> got = rmsnorm(x, wd, eps);
    for (std::size_t i = 0; i < c; ++i) {
        const double expect = x.values()[i] / std::sqrt(ms) * wd.values()[i];
        CHECK(got.values()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("backward on a linear map matches the hand formula") {
    // loss = sum(x W): dW[i][j] = x[i], broadcast over output columns
    Rng rng(5);
    Tensor<double> x = random_tensor<double>({1, 4}, rng);
    Tensor<double> w = random_tensor<double>({4, 3}, rng, true);
    Tensor<double> loss = sum(matmul(x, w));
    backward(loss);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(w.grad()[i * 3 + j] == doctest::Approx(x.values()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("constant loss leaves gradients zero") {
    Tensor<float> w = Tensor<float>::full({2, 2}, 3.0f, true);
    Tensor<float> constant = Tensor<float>::scalar(7.0f);
    backward(constant); // no-op: the loss does not depend on anything trainable
    CHECK(!w.has_grad());
}

TEST_CASE("backward rejects non-scalar seeds") {
    Tensor<float> w = Tensor<float>::full({2, 2}, 1.0f, true);
    Tensor<float> y = scale(w, 2.0f);
    CHECK_THROWS_AS(backward(y), UsageError);
}

TEST_CASE("gradient accumulation is additive until zeroed") {
    Tensor<double> w = Tensor<double>::full({2}, 1.5, true);
    for (int round = 0; round < 2; ++round) {
        Tensor<double> loss = sum(mul(w, w));
        backward(loss);
    }
    CHECK(w.grad()[0] == doctest::Approx(2.0 * 3.0).epsilon(1e-12)); // 2 rounds of d(w^2) = 2w
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("finite differences: elementwise ops") {
    Rng rng(21);
    Tensor<double> a = random_tensor<double>({3, 4}, rng, true);
    Tensor<double> b = random_tensor<double>({3, 4}, rng, true);
    CHECK(testing::max_grad_error({a, b}, [&] {
              return sum(mul(add(a, b), silu(scale(b, 0.7))));
          }) <= 1e-5);
}

TEST_CASE("finite differences: matmul") {
    Rng rng(22);
    Tensor<double> a = random_tensor<double>({4, 5}, rng, true);
    Tensor<double> b = random_tensor<double>({5, 3}, rng, true);
    CHECK(testing::max_grad_error({a, b}, [&] { return sum(matmul(a, b)); }) <= 1e-5);
}

TEST_CASE("finite differences: softmax") {
    Rng rng(23);
    Tensor<double> x = random_tensor<double>({4, 6}, rng, true);
    Tensor<double> mix = random_tensor<double>({4, 6}, rng);
    CHECK(testing::max_grad_error({x}, [&] { return sum(mul(softmax(x), mix)); }) <= 1e-5);
}

TEST_CASE("finite differences: rmsnorm") {
    Rng rng(24);
    Tensor<double> x = random_tensor<double>({3, 8}, rng, true);
    Tensor<double> w = random_tensor<double>({8}, rng, true);
    Tensor<double> mix = random_tensor<double>({3, 8}, rng);
    CHECK(testing::max_grad_error({x, w}, [&] {
              return sum(mul(rmsnorm(x, w, 1e-5), mix));
          }) <= 1e-5);
}

TEST_CASE("finite differences: embedding") {
    Rng rng(25);
    Tensor<double> table = random_tensor<double>({7, 4}, rng, true);
    const std::vector<int> ids{1, 3, 3, 0};
    Tensor<double> mix = random_tensor<double>({4, 4}, rng);
    CHECK(testing::max_grad_error({table}, [&] {
              return sum(mul(embedding(table, ids), mix));
          }) <= 1e-5);
}

TEST_CASE("finite differences: cross entropy") {
    Rng rng(26);
    Tensor<double> logits = random_tensor<double>({5, 6}, rng, true);
    const std::vector<int> targets{2, -100, 0, 5, -100};
    CHECK(testing::max_grad_error({logits}, [&] {
              return cross_entropy(logits, targets, -100);
          }) <= 1e-5);
}

TEST_CASE("finite differences: rope") {
    Rng rng(27);
    Tensor<double> x = random_tensor<double>({5, 8}, rng, true);
    Tensor<double> mix = random_tensor<double>({5, 8}, rng);
    CHECK(testing::max_grad_error({x}, [&] {
              return sum(mul(rope(x, 2, 10000.0, 3), mix));
          }) <= 1e-5);
}

TEST_CASE("finite differences: causal attention") {
    Rng rng(28);
    Tensor<double> q = random_tensor<double>({5, 8}, rng, true);
    Tensor<double> k = random_tensor<double>({5, 8}, rng, true);
    Tensor<double> v = random_tensor<double>({5, 8}, rng, true);
    Tensor<double> mix = random_tensor<double>({5, 8}, rng);
    CHECK(testing::max_grad_error({q, k, v}, [&] {
              return sum(mul(causal_attention(q, k, v, 2), mix));
          }) <= 1e-5);
}

TEST_CASE("finite differences: gated prefix attention") {
    Rng rng(29);
    Tensor<double> q = random_tensor<double>({4, 8}, rng, true);
    Tensor<double> k = random_tensor<double>({4, 8}, rng, true);
    Tensor<double> v = random_tensor<double>({4, 8}, rng, true);
    Tensor<double> pk = random_tensor<double>({3, 8}, rng, true);
    Tensor<double> pv = random_tensor<double>({3, 8}, rng, true);
    Tensor<double> gates = Tensor<double>::from_data({2}, {0.4, -0.3}, true);
    Tensor<double> mix = random_tensor<double>({4, 8}, rng);
    CHECK(testing::max_grad_error({q, k, v, pk, pv, gates}, [&] {
              return sum(mul(causal_attention(q, k, v, 2, pk, pv, gates), mix));
          }) <= 1e-5);
}

TEST_CASE("cross entropy with everything ignored is exactly zero") {
    Rng rng(30);
    Tensor<float> logits = random_tensor<float>({3, 5}, rng, true);
    const std::vector<int> targets{-100, -100, -100};
    Tensor<float> loss = cross_entropy(logits, targets, -100);
    CHECK(loss.item() == 0.0f);
    backward(loss);
    CHECK(!logits.has_grad());
}

TEST_CASE("adamw: zero gradient and zero decay leaves parameters alone") {
    Tensor<float> p = Tensor<float>::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    p.grad_mut(); // zero gradient buffer
    AdamWOptions opt;
    opt.learning_rate = 0.1;
    opt.weight_decay = 0.0;
    AdamW<float> optimizer({p}, opt);
    optimizer.step();
    CHECK(p.values()[0] == 1.0f);
    CHECK(p.values()[1] == -2.0f);
    CHECK(p.values()[2] == 0.5f);
}

TEST_CASE("adamw: one step matches the hand recurrence") {
    // p0 = 1.0, g = 0.3, lr = 0.1, wd = 0.05, beta1 = 0.9, beta2 = 0.999
    Tensor<double> p = Tensor<double>::from_data({1}, {1.0}, true);
    p.grad_mut()[0] = 0.3;
    AdamWOptions opt;
    opt.learning_rate = 0.1;
    opt.weight_decay = 0.05;
    AdamW<double> optimizer({p}, opt);
    optimizer.step();

    const double m = 0.1 * 0.3;            // (1 - beta1) * g
    const double v = 0.001 * 0.09;         // (1 - beta2) * g^2
    const double mhat = m / (1.0 - 0.9);   // bias correction, t = 1
    const double vhat = v / (1.0 - 0.999);
    double expect = 1.0 - 0.1 * 0.05 * 1.0; // decoupled decay first
    expect -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw: decay with zero gradient shrinks by lr * wd * p") {
    Tensor<double> p = Tensor<double>::from_data({2}, {2.0, -4.0}, true);
    p.grad_mut();
    AdamWOptions opt;
    opt.learning_rate = 0.01;
    opt.weight_decay = 0.5;
    AdamW<double> optimizer({p}, opt);
    optimizer.step();
    CHECK(p.values()[0] == doctest::Approx(2.0 * (1.0 - 0.005)).epsilon(1e-12));
    CHECK(p.values()[1] == doctest::Approx(-4.0 * (1.0 - 0.005)).epsilon(1e-12));
}

TEST_CASE("adamw: missing gradient is a usage error") {
    Tensor<float> p = Tensor<float>::full({2}, 1.0f, true);
    AdamW<float> optimizer({p}, AdamWOptions{});
    CHECK_THROWS_AS(optimizer.step(), UsageError);
}

TEST_CASE("adamw: step count advances by one per step") {
    Tensor<float> p = Tensor<float>::full({1}, 1.0f, true);
    p.grad_mut()[0] = 0.1f;
    AdamW<float> optimizer({p}, AdamWOptions{});
    CHECK(optimizer.step_count() == 0);
    optimizer.step();
    CHECK(optimizer.step_count() == 1);
    optimizer.step();
    CHECK(optimizer.step_count() == 2);
}

TEST_CASE("determinism: identical seeds give bitwise-identical values and gradients") {
    auto run = [] {
        Rng rng(99);
        Tensor<float> a = random_tensor<float>({4, 4}, rng, true);
        Tensor<float> b = random_tensor<float>({4, 4}, rng, true);
        Tensor<float> loss = sum(mul(softmax(matmul(a, b)), silu(add(a, b))));
        backward(loss);
        std::vector<float> out;
        out.push_back(loss.item());
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        return out;
    };
    const std::vector<float> first = run();
    const std::vector<float> second = run();
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        CHECK(first[i] == second[i]);
    }
}
