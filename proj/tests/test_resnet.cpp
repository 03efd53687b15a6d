#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "fd_util.hpp"
#include "pfm/resnet.hpp"

using namespace pfm;
using fdtest::fd_max_rel_err;

namespace {

i64 trunk_params(Tokenizer<float>& t) {
    NamedParams<float> np;
    t.collect("tokenizer", np);
    i64 n = 0;
    for (auto& [p, q] : np) n += q->value.size();
    return n;
}

}  // namespace

TEST_CASE("build: standard ResNet50 trunk") {
    Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 64}, StagePlan{{3, 4, 6, 3}},
                       NormKind::Batch);
    CHECK(t.out_channels == 2048);
    // well-known 25.56M total minus the 1000-class fc (2,049,000)
    CHECK(trunk_params(t) == 23508032);
}

TEST_CASE("build: standard ResNet34 trunk") {
    Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Basic, 64}, StagePlan{{3, 4, 6, 3}},
                       NormKind::Batch);
    CHECK(t.out_channels == 512);
    // 21,797,672 total minus the 513,000-parameter fc
    CHECK(trunk_params(t) == 21284672);
}

TEST_CASE("build: invalid width/kind combinations rejected") {
    CHECK_THROWS_AS(Tokenizer<float>(BlockSpec{BlockSpec::Kind::Basic, 32}, StagePlan{},
                                     NormKind::Batch),
                    std::invalid_argument);
    CHECK_THROWS_AS(Tokenizer<float>(BlockSpec{BlockSpec::Kind::Bottle, 48}, StagePlan{},
                                     NormKind::Batch),
                    std::invalid_argument);
}

TEST_CASE("build: zero-count stages keep projection shortcuts") {
    Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 64}, StagePlan{{0, 0, 0, 0}},
                       NormKind::Batch);
    CHECK(t.out_channels == 2048);
    Tape<float> tape;
    auto x = tape.input(Tensor<float>(Shape{1, 3, 64, 64}));
    auto y = t.forward(tape, x, false);
    CHECK(y.shape() == Shape{1, 2048, 2, 2});
}

TEST_CASE("forward: output shape contract") {
    SUBCASE("bottle-64 at 224") {
        Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 64}, StagePlan{{3, 4, 6, 3}},
                           NormKind::Batch);
        Tape<float> tape;
        auto y = t.forward(tape, tape.input(Tensor<float>(Shape{2, 3, 224, 224})), false);
        CHECK(y.shape() == Shape{2, 2048, 7, 7});
    }
    SUBCASE("bottle-32 at 64") {
        Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 32}, StagePlan{{1, 1, 6, 3}},
                           NormKind::Batch);
        Tape<float> tape;
        auto y = t.forward(tape, tape.input(Tensor<float>(Shape{2, 3, 64, 64})), false);
        CHECK(y.shape() == Shape{2, 1024, 2, 2});
    }
    SUBCASE("indivisible spatial size rejected") {
        Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 8}, StagePlan{{1, 1, 1, 1}},
                           NormKind::Batch);
        Tape<float> tape;
        CHECK_THROWS_WITH_AS(t.forward(tape, tape.input(Tensor<float>(Shape{1, 3, 100, 100})), false),
                             doctest::Contains("divisible"), std::invalid_argument);
    }
}

TEST_CASE("block: stage-1 bottleneck parameter count") {
    ResidualBlock<float> blk(BlockSpec::Kind::Bottle, 64, 64, 256, 1, NormKind::Batch);
    // 1x1(64*64) + 3x3(64*64*9) + 1x1(64*256) + projection(64*256) + norm affine
    CHECK(blk.param_count() == 75008);
}

TEST_CASE("block: zeroed residual branch reduces to the shortcut") {
    Rng rng(3);
    ResidualBlock<float> blk(BlockSpec::Kind::Bottle, 16, 4, 16, 1, NormKind::Batch);
    CHECK(!blk.has_down);
    blk.init(rng);
    blk.norm3.gamma.value.fill(0.0f);  // zero the branch output scale
    Tensor<float> x(Shape{2, 16, 5, 5});
    for (i64 i = 0; i < x.size(); ++i) x[i] = static_cast<float>(std::fabs(rng.normal()));
    Tape<float> tape;
    auto y = blk.forward(tape, tape.input(x), false);
    for (i64 i = 0; i < x.size(); ++i) CHECK(y.value()[i] == doctest::Approx(x[i]).epsilon(1e-6));
}

TEST_CASE("block: stride-2 halves the spatial dims, channel mismatch rejected") {
    ResidualBlock<float> blk(BlockSpec::Kind::Bottle, 8, 4, 16, 2, NormKind::Batch);
    Tape<float> tape;
    auto y = blk.forward(tape, tape.input(Tensor<float>(Shape{1, 8, 10, 10})), false);
    CHECK(y.shape() == Shape{1, 16, 5, 5});
    CHECK_THROWS_AS(blk.forward(tape, tape.input(Tensor<float>(Shape{1, 12, 10, 10})), false),
                    std::invalid_argument);
}

TEST_CASE("block: gradients match finite differences") {
    Rng rng(7);
    auto x = fdtest::random_tensor({2, 6, 6, 6}, rng);
    ResidualBlock<double> bottle(BlockSpec::Kind::Bottle, 6, 4, 12, 2, NormKind::Batch);
    Rng irng(11);
    bottle.init(irng);
    CHECK(fd_max_rel_err(
              [&bottle](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = bottle.forward(t, v[0], true);
                  return mean_all(mul(y, y));
              },
              {x}, 256) < 1e-6);

    ResidualBlock<double> basic(BlockSpec::Kind::Basic, 6, 6, 6, 1, NormKind::Group);
    basic.init(irng);
    CHECK(fd_max_rel_err(
              [&basic](Tape<double>& t, const std::vector<Var<double>>& v) {
                  auto y = basic.forward(t, v[0], true);
                  return mean_all(mul(y, y));
              },
              {x}, 256) < 1e-6);
}

TEST_CASE("shift consistency: 32-pixel input shift moves x1 by one cell") {
    // Content lives away from the borders, so zero padding matches the
    // translated content exactly and equivariance holds to float precision.
    Rng rng(13);
    Tokenizer<float> t(BlockSpec{BlockSpec::Kind::Bottle, 8}, StagePlan{{1, 1, 1, 1}},
                       NormKind::Batch);
    Rng irng(17);
    t.init(irng);

    Tensor<float> a(Shape{1, 3, 224, 224});
    Tensor<float> b(Shape{1, 3, 224, 224});
    for (i64 c = 0; c < 3; ++c) {
        for (i64 y = 80; y < 144; ++y) {
            for (i64 x = 80; x < 144; ++x) {
                const float v = static_cast<float>(rng.normal());
                a.at({0, c, y, x}) = v;
                b.at({0, c, y + 32, x + 32}) = v;
            }
        }
    }
    Tape<float> tape;
    auto xa = t.forward(tape, tape.input(a), false);
    auto xb = t.forward(tape, tape.input(b), false);
    const i64 C = t.out_channels;
    double worst = 0;
    for (i64 c = 0; c < C; ++c) {
        for (i64 i = 1; i < 5; ++i) {
            for (i64 j = 1; j < 5; ++j) {
                const double va = xa.value().at({0, c, i, j});
                const double vb = xb.value().at({0, c, i + 1, j + 1});
                worst = std::max(worst, std::fabs(va - vb));
            }
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("macs: trunk totals at 224 match the known ResNet costs") {
    Tokenizer<float> r50(BlockSpec{BlockSpec::Kind::Bottle, 64}, StagePlan{{3, 4, 6, 3}},
                         NormKind::Batch);
    Tokenizer<float> r34(BlockSpec{BlockSpec::Kind::Basic, 64}, StagePlan{{3, 4, 6, 3}},
                         NormKind::Batch);
    CHECK(std::fabs(r50.macs(224) / 1e9 - 4.09) < 0.05);
    CHECK(std::fabs(r34.macs(224) / 1e9 - 3.66) < 0.05);
}
