#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "fd_util.hpp"
#include "pfm/graft.hpp"

using namespace pfm;
using fdtest::fd_max_rel_err;
using fdtest::random_tensor;
using fdtest::random_tensor_f;

namespace {

GraftConfig cfg(GraftMode m, i64 tokens, i64 embed, i64 c1, i64 h, i64 w) {
    GraftConfig c;
    c.mode = m;
    c.n_tokens = tokens;
    c.embed_dim = embed;
    c.in_channels = c1;
    c.in_h = h;
    c.in_w = w;
    return c;
}

}  // namespace

TEST_CASE("transpose-patch: 49 spatial tokens from a 7x7 map") {
    Graft<float> g(cfg(GraftMode::TransposePatch, 49, 768, 2048, 7, 7));
    Tape<float> tape;
    auto y = g.forward(tape, tape.input(Tensor<float>(Shape{1, 2048, 7, 7})));
    CHECK(y.shape() == Shape{1, 49, 768});
    CHECK_THROWS_AS(Graft<float>(cfg(GraftMode::TransposePatch, 64, 768, 2048, 7, 7)),
                    std::invalid_argument);
}

TEST_CASE("transpose-patch: token t = i*W'+j carries the conv vector at (i,j)") {
    const i64 C = 4;
    Graft<float> g(cfg(GraftMode::TransposePatch, 9, C, C, 3, 3));
    // identity-like 1x1 conv
    g.conv.weight.value.fill(0.0f);
    for (i64 c = 0; c < C; ++c) g.conv.weight.value.at({c, c, 0, 0}) = 1.0f;
    g.conv.bias.value.fill(0.0f);
    Tensor<float> x1(Shape{1, C, 3, 3});
    const i64 ii = 1, jj = 2;
    for (i64 c = 0; c < C; ++c) x1.at({0, c, ii, jj}) = static_cast<float>(c + 1);
    Tape<float> tape;
    auto y = g.forward(tape, tape.input(x1));
    for (i64 t = 0; t < 9; ++t) {
        for (i64 c = 0; c < C; ++c) {
            const float expect = (t == ii * 3 + jj) ? static_cast<float>(c + 1) : 0.0f;
            CHECK(y.value().at({0, t, c}) == doctest::Approx(expect));
        }
    }
}

TEST_CASE("pattern: channels become tokens") {
    SUBCASE("Res50-ViT_B shape") {
        Graft<float> g(cfg(GraftMode::Pattern, 128, 768, 2048, 7, 7));
        Tape<float> tape;
        auto y = g.forward(tape, tape.input(Tensor<float>(Shape{2, 2048, 7, 7})));
        CHECK(y.shape() == Shape{2, 128, 768});
    }
    SUBCASE("64-token 576-dim shape") {
        Graft<float> g(cfg(GraftMode::Pattern, 64, 576, 1024, 7, 7));
        Tape<float> tape;
        auto y = g.forward(tape, tape.input(Tensor<float>(Shape{2, 1024, 7, 7})));
        CHECK(y.shape() == Shape{2, 64, 576});
    }
}

TEST_CASE("pattern: permuting conv output channels permutes tokens") {
    Rng rng(3);
    Graft<float> g(cfg(GraftMode::Pattern, 6, 5, 8, 2, 2));
    Rng irng(5);
    g.init(irng);
    auto x1 = random_tensor_f({1, 8, 2, 2}, rng);

    Tape<float> tape;
    auto base = g.forward(tape, tape.input(x1));

    std::vector<i64> perm{2, 0, 5, 1, 3, 4};
    Graft<float> gp(cfg(GraftMode::Pattern, 6, 5, 8, 2, 2));
    gp.linear.weight.value = g.linear.weight.value;
    gp.linear.bias.value = g.linear.bias.value;
    for (i64 t = 0; t < 6; ++t) {
        for (i64 c = 0; c < 8; ++c) {
            gp.conv.weight.value.at({t, c, 0, 0}) = g.conv.weight.value.at({perm[t], c, 0, 0});
        }
        gp.conv.bias.value[t] = g.conv.bias.value[perm[t]];
    }
    auto permuted = gp.forward(tape, tape.input(x1));
    for (i64 t = 0; t < 6; ++t) {
        for (i64 d = 0; d < 5; ++d) {
            CHECK(permuted.value().at({0, t, d}) == doctest::Approx(base.value().at({0, perm[t], d})));
        }
    }
}

TEST_CASE("pattern: resolution-bound linear rejects other activation sizes") {
    Graft<float> g(cfg(GraftMode::Pattern, 16, 32, 64, 7, 7));
    Tape<float> tape;
    CHECK_THROWS_WITH_AS(g.forward(tape, tape.input(Tensor<float>(Shape{1, 64, 8, 8}))),
                         doctest::Contains("resolution"), std::invalid_argument);
    // token count itself is resolution-independent: same T from another build
    Graft<float> g2(cfg(GraftMode::Pattern, 16, 32, 64, 8, 8));
    auto y = g2.forward(tape, tape.input(Tensor<float>(Shape{1, 64, 8, 8})));
    CHECK(y.shape() == Shape{1, 16, 32});
}

TEST_CASE("flexible-patch: 49 patches convert up to 128 patches") {
    Graft<float> g(cfg(GraftMode::FlexiblePatch, 128, 768, 2048, 7, 7));
    Tape<float> tape;
    auto y = g.forward(tape, tape.input(Tensor<float>(Shape{1, 2048, 7, 7})));
    CHECK(y.shape() == Shape{1, 128, 768});
}

TEST_CASE("flexible-patch: identity linear reduces to transpose-patch exactly") {
    Rng rng(7);
    const i64 C1 = 8, C2 = 6, H = 7, W = 7;
    Graft<float> eq1(cfg(GraftMode::TransposePatch, H * W, C2, C1, H, W));
    Rng irng(9);
    eq1.init(irng);

    Graft<float> eq3(cfg(GraftMode::FlexiblePatch, H * W, C2, C1, H, W));
    eq3.conv.weight.value = eq1.conv.weight.value;
    eq3.conv.bias.value = eq1.conv.bias.value;
    eq3.linear.weight.value.fill(0.0f);
    for (i64 i = 0; i < H * W; ++i) eq3.linear.weight.value.at({i, i}) = 1.0f;
    eq3.linear.bias.value.fill(0.0f);

    auto x1 = random_tensor_f({2, C1, H, W}, rng);
    Tape<float> tape;
    auto y1 = eq1.forward(tape, tape.input(x1));
    auto y3 = eq3.forward(tape, tape.input(x1));
    REQUIRE(y1.shape() == y3.shape());
    for (i64 i = 0; i < y1.value().size(); ++i) CHECK(y1.value()[i] == y3.value()[i]);
}

TEST_CASE("all grafts are linear maps of x1 when biases are zero") {
    Rng rng(11);
    for (GraftMode mode :
         {GraftMode::TransposePatch, GraftMode::Pattern, GraftMode::FlexiblePatch}) {
        const i64 tokens = mode == GraftMode::TransposePatch ? 4 : 6;
        Graft<float> g(cfg(mode, tokens, 5, 8, 2, 2));
        Rng irng(13);
        g.init(irng);
        g.conv.bias.value.fill(0.0f);
        if (g.has_linear) g.linear.bias.value.fill(0.0f);

        auto xa = random_tensor_f({1, 8, 2, 2}, rng);
        auto xb = random_tensor_f({1, 8, 2, 2}, rng);
        const float alpha = 0.7f, beta = -1.3f;
        Tensor<float> mix(Shape{1, 8, 2, 2});
        for (i64 i = 0; i < mix.size(); ++i) mix[i] = alpha * xa[i] + beta * xb[i];

        Tape<float> tape;
        auto ga = g.forward(tape, tape.input(xa));
        auto gb = g.forward(tape, tape.input(xb));
        auto gm = g.forward(tape, tape.input(mix));
        for (i64 i = 0; i < gm.value().size(); ++i) {
            const float expect = alpha * ga.value()[i] + beta * gb.value()[i];
            CHECK(gm.value()[i] == doctest::Approx(expect).epsilon(1e-5));
        }
    }
}

TEST_CASE("grafts: gradients match finite differences") {
    Rng rng(17);
    auto x1 = random_tensor({1, 6, 3, 3}, rng);
    for (GraftMode mode :
         {GraftMode::TransposePatch, GraftMode::Pattern, GraftMode::FlexiblePatch}) {
        const i64 tokens = mode == GraftMode::TransposePatch ? 9 : 5;
        Graft<double> g(cfg(mode, tokens, 4, 6, 3, 3));
        Rng irng(19);
        g.init(irng);
        CHECK(fd_max_rel_err(
                  [&g](Tape<double>& t, const std::vector<Var<double>>& v) {
                      auto y = g.forward(t, v[0]);
                      return mean_all(mul(y, y));
                  },
                  {x1}, 256) < 1e-6);
    }
}
