#pragma once

// Central finite-difference gradient oracle used across the test suites.
// Deliberately independent of the tape's backward rules: it only calls the
// forward path of the closure under test.

#include <cmath>
#include <cstdint>
#include <vector>

#include "pfm/ops.hpp"
#include "pfm/rng.hpp"
#include "pfm/tape.hpp"
#include "pfm/tensor.hpp"

namespace fdtest {

inline double rel_err(double a, double n) {
    const double denom = std::max({std::fabs(a), std::fabs(n), 1.0});
    return std::fabs(a - n) / denom;
}

/// build(tape, vars) must return a scalar Var and be pure given the inputs.
/// Returns the max relative error between analytic and central differences
/// over up to max_coords sampled coordinates.
template <class BuildLoss>
double fd_max_rel_err(BuildLoss build, std::vector<pfm::Tensor<double>> inputs,
                      pfm::i64 max_coords = 512, double eps = 1e-5, std::uint64_t seed = 42) {
    using namespace pfm;

    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(tape.input(t, true));
    Var<double> loss = build(tape, vars);
    if (loss.value().size() != 1) throw std::logic_error("fd check needs scalar loss");
    tape.backward(loss);
    std::vector<Tensor<double>> grads;
    for (auto& v : vars) {
        grads.push_back(v.has_grad() ? v.grad() : Tensor<double>(v.shape()));
    }

    auto eval = [&](const std::vector<Tensor<double>>& ins) {
        Tape<double> t2;
        std::vector<Var<double>> vs;
        vs.reserve(ins.size());
        for (const auto& t : ins) vs.push_back(t2.input(t, false));
        return build(t2, vs).value()[0];
    };

    i64 total = 0;
    for (const auto& t : inputs) total += t.size();
    Rng rng(seed);
    double worst = 0.0;
    const i64 checks = std::min<i64>(max_coords, total);
    for (i64 c = 0; c < checks; ++c) {
        i64 flat = (checks == total) ? c : rng.uniform_int(total);
        std::size_t k = 0;
        while (flat >= inputs[k].size()) {
            flat -= inputs[k].size();
            ++k;
        }
        const double orig = inputs[k][flat];
        inputs[k][flat] = orig + eps;
        const double fp = eval(inputs);
        inputs[k][flat] = orig - eps;
        const double fm = eval(inputs);
        inputs[k][flat] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, rel_err(grads[k][flat], numeric));
    }
    return worst;
}

inline pfm::Tensor<double> random_tensor(pfm::Shape shape, pfm::Rng& rng, double scale = 1.0) {
    pfm::Tensor<double> t(std::move(shape));
    for (pfm::i64 i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
    return t;
}

inline pfm::Tensor<float> random_tensor_f(pfm::Shape shape, pfm::Rng& rng, double scale = 1.0) {
    pfm::Tensor<float> t(std::move(shape));
    for (pfm::i64 i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal() * scale);
    return t;
}

}  // namespace fdtest
