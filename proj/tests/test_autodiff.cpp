#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "fd_util.hpp"
#include "pfm/ops.hpp"

using namespace pfm;
using fdtest::fd_max_rel_err;
using fdtest::random_tensor;

namespace {

Tensor<double> make(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

}  // namespace

TEST_CASE("record: elementwise shape preservation") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>(Shape{2, 3}));
    auto b = tape.input(Tensor<double>(Shape{2, 3}));
    auto y = add(a, b);
    CHECK(y.shape() == Shape{2, 3});
}

TEST_CASE("record: matrix product shape rule") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>(Shape{4, 5}));
    auto b = tape.input(Tensor<double>(Shape{5, 6}));
    auto y = matmul(a, b);
    CHECK(y.shape() == Shape{4, 6});
}

TEST_CASE("record: inner dimension disagreement rejected") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>(Shape{4, 5}));
    auto b = tape.input(Tensor<double>(Shape{7, 6}));
    CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("backward: d(sum x^2)/dx = 2x") {
    Tape<double> tape;
    auto a = tape.input(make({3}, {1, 2, 3}), true);
    auto loss = sum_all(mul(a, a));
    tape.backward(loss);
    const auto& g = a.grad();
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));
    CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("backward: gradient accumulation over fan-out") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>::full({2, 2}, 1.0), true);
    auto loss = sum_all(add(a, a));
    tape.backward(loss);
    for (i64 i = 0; i < 4; ++i) CHECK(a.grad()[i] == doctest::Approx(2.0));
}

TEST_CASE("backward: non-scalar root rejected") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>(Shape{2, 2}), true);
    auto y = add(a, a);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: detached variables keep no grad") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>::full({3}, 2.0), false);
    auto b = tape.input(Tensor<double>::full({3}, 3.0), true);
    auto loss = sum_all(mul(a, b));
    tape.backward(loss);
    CHECK(!a.has_grad());
    CHECK_THROWS(a.grad());
    CHECK(b.has_grad());
}

TEST_CASE("backward: random 3-layer MLP matches finite differences") {
    Rng rng(7);
    auto x = random_tensor({2, 6}, rng);
    auto w1 = random_tensor({6, 8}, rng, 0.5);
    auto w2 = random_tensor({8, 8}, rng, 0.5);
    auto w3 = random_tensor({8, 3}, rng, 0.5);
    auto b1 = random_tensor({8}, rng, 0.1);
    auto b2 = random_tensor({8}, rng, 0.1);
    auto b3 = random_tensor({3}, rng, 0.1);
    auto build = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        auto h1 = gelu(add(matmul(v[0], v[1]), v[4]));
        auto h2 = gelu(add(matmul(h1, v[2]), v[5]));
        auto out = add(matmul(h2, v[3]), v[6]);
        return mean_all(mul(out, out));
    };
    CHECK(fd_max_rel_err(build, {x, w1, w2, w3, b1, b2, b3}) < 1e-6);
}

TEST_CASE("primitives: permute axes") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>(Shape{2, 3, 4}));
    auto y = permute(x, {2, 0, 1});
    CHECK(y.shape() == Shape{4, 2, 3});
}

TEST_CASE("primitives: permute round-trip is exact") {
    Rng rng(3);
    auto t = random_tensor({3, 4, 5}, rng);
    Tape<double> tape;
    auto x = tape.input(t);
    std::vector<int> p{1, 2, 0};
    auto y = permute(permute(x, p), inverse_permutation(p));
    CHECK(std::memcmp(y.value().data(), t.data(), sizeof(double) * t.size()) == 0);
}

TEST_CASE("primitives: mean of ones over axis 1") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>::full({3, 5}, 1.0));
    auto y = mean_axes(x, {1});
    CHECK(y.shape() == Shape{3});
    for (i64 i = 0; i < 3; ++i) CHECK(y.value()[i] == doctest::Approx(1.0));
}

TEST_CASE("primitives: log and sqrt reject negative input") {
    Tape<double> tape;
    auto x = tape.input(make({2}, {1.0, -0.5}));
    CHECK_THROWS_AS(log(x), std::domain_error);
    CHECK_THROWS_AS(sqrt(x), std::domain_error);
}

TEST_CASE("primitives: finite-difference oracle per op") {
    Rng rng(11);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    // keep |a-b| away from ties for maximum's kink
    for (i64 i = 0; i < a.size(); ++i) {
        if (std::fabs(a[i] - b[i]) < 0.1) b[i] += 0.5;
    }
    auto positive = random_tensor({3, 4}, rng);
    for (i64 i = 0; i < positive.size(); ++i) positive[i] = std::fabs(positive[i]) + 0.5;

    auto loss_of = [](Var<double> y) { return mean_all(mul(y, y)); };

    SUBCASE("add") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  return mean_all(mul(add(v[0], v[1]), add(v[0], v[1])));
              },
                             {a, b}) < 1e-6);
    }
    SUBCASE("sub-mul-div") {
        CHECK(fd_max_rel_err(
                  [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                      return mean_all(mul(sub(v[0], v[1]), div(v[0], add_scalar(mul(v[1], v[1]), 1.0))));
                  },
                  {a, b}) < 1e-6);
    }
    SUBCASE("maximum away from ties") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = maximum(v[0], v[1]);
                  return mean_all(mul(y, y));
              },
                             {a, b}) < 1e-6);
    }
    SUBCASE("exp") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = exp(scale(v[0], 0.3));
                  return mean_all(mul(y, y));
              },
                             {a}) < 1e-6);
    }
    SUBCASE("log sqrt erf") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = add(log(v[0]), add(sqrt(v[0]), erf(v[0])));
                  return mean_all(mul(y, y));
              },
                             {positive}) < 1e-6);
    }
    SUBCASE("relu and gelu away from origin") {
        auto shifted = a;
        for (i64 i = 0; i < shifted.size(); ++i) {
            if (std::fabs(shifted[i]) < 0.1) shifted[i] += 0.5;
        }
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = add(relu(v[0]), gelu(v[0]));
                  return mean_all(mul(y, y));
              },
                             {shifted}) < 1e-6);
    }
    SUBCASE("matmul all transpose modes") {
        Rng r2(5);
        auto m = random_tensor({4, 5}, r2);
        auto n = random_tensor({5, 3}, r2);
        auto nt = random_tensor({3, 5}, r2);
        auto mt = random_tensor({5, 4}, r2);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  return mean_all(mul(matmul(v[0], v[1]), matmul(v[0], v[1])));
              },
                             {m, n}) < 1e-6);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = matmul(v[0], v[1], false, true);
                  return mean_all(mul(y, y));
              },
                             {m, nt}) < 1e-6);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = matmul(v[0], v[1], true, false);
                  return mean_all(mul(y, y));
              },
                             {mt, n}) < 1e-6);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = matmul(v[0], v[1], true, true);
                  return mean_all(mul(y, y));
              },
                             {mt, nt}) < 1e-6);
    }
    SUBCASE("batched matmul with shared rhs") {
        Rng r2(6);
        auto m = random_tensor({2, 3, 4, 5}, r2);
        auto n = random_tensor({5, 3}, r2);
        auto nb = random_tensor({2, 3, 4, 5}, r2);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = matmul(v[0], v[1]);
                  return mean_all(mul(y, y));
              },
                             {m, n}) < 1e-6);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = matmul(v[0], v[1], false, true);  // (B,4,5) x (B,4,5)^T
                  return mean_all(mul(y, y));
              },
                             {m, nb}) < 1e-6);
    }
    SUBCASE("reshape permute broadcast slice concat") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = reshape(v[0], {2, 6});
                  y = permute(y, {1, 0});
                  auto z = broadcast_to(v[1], {2, 3, 4});
                  auto s = slice(z, 1, 1, 2);
                  auto c = concat<double>({s, s}, 1);
                  return add(mean_all(mul(y, y)), mean_all(mul(c, c)));
              },
                             {a, b}) < 1e-6);
    }
    SUBCASE("reductions") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto s = sum_axes(v[0], {0}, true);
                  auto m2 = mean_axes(v[0], {1}, false);
                  return add(mean_all(mul(s, s)), mean_all(mul(m2, m2)));
              },
                             {a}) < 1e-6);
    }
    SUBCASE("softmax and log_softmax") {
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = softmax(v[0], -1);
                  auto z = log_softmax(v[0], 0);
                  return add(mean_all(mul(y, y)), mean_all(mul(z, z)));
              },
                             {a}) < 1e-6);
    }
    SUBCASE("broadcast gradient reduction in binary ops") {
        auto row = random_tensor({4}, rng);
        CHECK(fd_max_rel_err([&](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = mul(add(v[0], v[1]), v[1]);
                  return mean_all(mul(y, y));
              },
                             {a, row}) < 1e-6);
    }
    (void)loss_of;
}

TEST_CASE("softmax: uniform logits and stability under large values") {
    Tape<double> tape;
    auto x = tape.input(make({4}, {0, 0, 0, 0}));
    auto y = softmax(x);
    for (i64 i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(0.25));

    auto big = tape.input(make({2}, {1000.0, 0.0}));
    auto z = softmax(big);
    CHECK(std::fabs(z.value()[0] - 1.0) < 1e-12);
    CHECK(std::fabs(z.value()[1]) < 1e-12);
}

TEST_CASE("conv2d: 1x1 kernel scales input") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>::full({1, 1, 3, 3}, 1.0));
    auto w = tape.input(make({1, 1, 1, 1}, {2.0}));
    auto y = conv2d<double>(x, w, std::nullopt, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (i64 i = 0; i < 9; ++i) CHECK(y.value()[i] == doctest::Approx(2.0));
}

TEST_CASE("conv2d: channel projection shape") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>(Shape{2, 512, 7, 7}));
    auto w = tape.input(Tensor<double>(Shape{128, 512, 1, 1}));
    auto y = conv2d<double>(x, w, std::nullopt, 1, 0);
    CHECK(y.shape() == Shape{2, 128, 7, 7});
}

TEST_CASE("conv2d: mismatched channels and degenerate sizes rejected") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>(Shape{1, 3, 8, 8}));
    auto w_bad = tape.input(Tensor<double>(Shape{4, 5, 3, 3}));
    CHECK_THROWS_AS(conv2d<double>(x, w_bad, std::nullopt, 1, 1), std::invalid_argument);
    auto small = tape.input(Tensor<double>(Shape{1, 3, 2, 2}));
    auto w = tape.input(Tensor<double>(Shape{4, 3, 5, 5}));
    CHECK_THROWS_AS(conv2d<double>(small, w, std::nullopt, 1, 0), std::invalid_argument);
}

namespace {

// Direct six-loop cross-correlation oracle.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>* bias, i64 stride, i64 pad) {
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const i64 CO = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const i64 HO = (H + 2 * pad - KH) / stride + 1;
    const i64 WO = (W + 2 * pad - KW) / stride + 1;
    Tensor<double> out(Shape{N, CO, HO, WO});
    for (i64 n = 0; n < N; ++n)
        for (i64 co = 0; co < CO; ++co)
            for (i64 ho = 0; ho < HO; ++ho)
                for (i64 wo = 0; wo < WO; ++wo) {
                    double acc = bias ? (*bias)[co] : 0.0;
                    for (i64 ci = 0; ci < C; ++ci)
                        for (i64 ki = 0; ki < KH; ++ki)
                            for (i64 kj = 0; kj < KW; ++kj) {
                                const i64 ih = ho * stride - pad + ki;
                                const i64 iw = wo * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at({n, ci, ih, iw}) * w.at({co, ci, ki, kj});
                            }
                    out.at({n, co, ho, wo}) = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d: matches the nested-loop oracle and finite differences") {
    Rng rng(23);
    auto x = random_tensor({1, 2, 5, 5}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);

    Tape<double> tape;
    auto vx = tape.input(x);
    auto vw = tape.input(w);
    auto vb = tape.input(b);
    auto y = conv2d<double>(vx, vw, vb, 2, 1);
    auto ref = conv_oracle(x, w, &b, 2, 1);
    REQUIRE(y.shape() == ref.shape());
    for (i64 i = 0; i < ref.size(); ++i) {
        CHECK(std::fabs(y.value()[i] - ref[i]) < 1e-6);
    }

    for (auto [stride, pad] : std::vector<std::pair<i64, i64>>{{1, 0}, {1, 1}, {2, 1}, {2, 3}}) {
        CHECK(fd_max_rel_err(
                  [stride, pad](Tape<double>& t, const std::vector<Var<double>>& v) {
                      auto out = conv2d<double>(v[0], v[1], v[2], stride, pad);
                      return mean_all(mul(out, out));
                  },
                  {x, w, b}, 256) < 1e-6);
    }
}

TEST_CASE("maxpool2d: downsamples and differentiates") {
    Rng rng(31);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    Tape<double> tape;
    auto y = maxpool2d(tape.input(x), 3, 2, 1);
    CHECK(y.shape() == Shape{2, 3, 4, 4});
    CHECK(fd_max_rel_err(
              [](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto out = maxpool2d(v[0], 3, 2, 1);
                  return mean_all(mul(out, out));
              },
              {x}, 256) < 1e-6);
}

TEST_CASE("drop_path: identity in eval mode and for p=0") {
    Rng rng(1);
    auto x = random_tensor({4, 3}, rng);
    Tape<double> tape;
    auto vx = tape.input(x);
    auto e = drop_path(vx, 0.5, false, rng);
    CHECK(e.id == vx.id);
    auto z = drop_path(vx, 0.0, true, rng);
    CHECK(z.id == vx.id);
    CHECK_THROWS_AS(drop_path(vx, 1.0, true, rng), std::invalid_argument);
}

TEST_CASE("drop_path: expectation preserved (Monte Carlo)") {
    Rng rng(99);
    double sum = 0.0;
    const int trials = 100000;
    for (int i = 0; i < trials; ++i) {
        Tape<double> tape;
        auto x = tape.input(Tensor<double>::full({1, 1}, 1.0));
        auto y = drop_path(x, 0.1, true, rng);
        sum += y.value()[0];
    }
    CHECK(std::fabs(sum / trials - 1.0) < 0.01);
}

TEST_CASE("drop_path: gradient with a frozen mask") {
    Rng data_rng(5);
    auto x = fdtest::random_tensor({4, 6}, data_rng);
    CHECK(fd_max_rel_err(
              [](Tape<double>& t, const std::vector<Var<double>>& v) {
                  Rng rng(123);  // same mask on every evaluation
                  auto y = drop_path(v[0], 0.5, true, rng);
                  return mean_all(mul(y, y));
              },
              {x}) < 1e-6);
}

TEST_CASE("tape replay determinism: bitwise identical forward+backward") {
    auto run = [](std::vector<Tensor<double>>& values, std::vector<Tensor<double>>& grads) {
        Rng rng(17);
        auto x = fdtest::random_tensor({3, 5}, rng);
        auto w = fdtest::random_tensor({5, 4}, rng);
        Tape<double> tape;
        auto vx = tape.input(x, true);
        auto vw = tape.input(w, true);
        auto y = gelu(matmul(vx, vw));
        auto loss = mean_all(mul(y, y));
        tape.backward(loss);
        values.push_back(y.value());
        values.push_back(loss.value());
        grads.push_back(vx.grad());
        grads.push_back(vw.grad());
    };
    std::vector<Tensor<double>> v1, g1, v2, g2;
    run(v1, g1);
    run(v2, g2);
    for (std::size_t i = 0; i < v1.size(); ++i) {
        CHECK(std::memcmp(v1[i].data(), v2[i].data(), sizeof(double) * v1[i].size()) == 0);
    }
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(std::memcmp(g1[i].data(), g2[i].data(), sizeof(double) * g1[i].size()) == 0);
    }
}

TEST_CASE("global_avg_pool: mean of ones") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>::full({1, 8, 7, 7}, 1.0));
    auto y = global_avg_pool(x);
    CHECK(y.shape() == Shape{1, 8});
    for (i64 i = 0; i < 8; ++i) CHECK(y.value()[i] == doctest::Approx(1.0));
}
