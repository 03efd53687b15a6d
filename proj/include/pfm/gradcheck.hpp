#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pfm/model.hpp"
#include "pfm/train.hpp"

namespace pfm {

struct GradCheckOffender {
    std::string param;
    i64 index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel = 0;
};

struct GradCheckReport {
    std::string fragment;
    double max_rel_err = 0;
    i64 coords_checked = 0;
    double tol = 1e-6;
    std::vector<GradCheckOffender> offenders;  // rel > tol, worst first

    bool pass() const { return offenders.empty(); }
};

/// Central finite differences over sampled parameter coordinates of a
/// double-precision loss closure. The closure must be pure given the current
/// parameter values (stochastic pieces must reseed internally).
inline GradCheckReport check_gradients(const std::function<Var<double>(Tape<double>&)>& build_loss,
                                       const NamedParams<double>& params, i64 max_coords = 512,
                                       double eps = 1e-5, double tol = 1e-6,
                                       std::uint64_t seed = 42) {
    GradCheckReport report;
    report.tol = tol;

    for (auto& [path, p] : params) p->zero_grad();
    {
        Tape<double> tape;
        Var<double> loss = build_loss(tape);
        if (loss.value().size() != 1) throw std::logic_error("gradcheck loss must be scalar");
        tape.backward(loss);
    }
    std::vector<Tensor<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [path, p] : params) {
        analytic.push_back(p->has_grad() ? p->grad : Tensor<double>(p->value.shape()));
    }

    auto eval = [&]() {
        Tape<double> tape;
        return build_loss(tape).value()[0];
    };

    i64 total = 0;
    for (auto& [path, p] : params) total += p->value.size();
    const i64 checks = std::min<i64>(max_coords, total);
    Rng rng(seed);
    for (i64 c = 0; c < checks; ++c) {
        i64 flat = (checks == total) ? c : rng.uniform_int(total);
        std::size_t k = 0;
        while (flat >= params[k].second->value.size()) {
            flat -= params[k].second->value.size();
            ++k;
        }
        Parameter<double>* p = params[k].second;
        const double orig = p->value[flat];
        p->value[flat] = orig + eps;
        const double fp = eval();
        p->value[flat] = orig - eps;
        const double fm = eval();
        p->value[flat] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[k][flat];
        const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1.0});
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.coords_checked;
        if (rel > tol) {
            GradCheckOffender bad;
            bad.param = params[k].first;
            bad.index = flat;
            bad.analytic = a;
            bad.numeric = numeric;
            bad.rel = rel;
            report.offenders.push_back(bad);
        }
    }
    std::sort(report.offenders.begin(), report.offenders.end(),
              [](const auto& a, const auto& b) { return a.rel > b.rel; });
    if (report.offenders.size() > 8) report.offenders.resize(8);
    return report;
}

// ---------------------------------------------------------------------------
// named fragments for the CLI and the acceptance suite
// ---------------------------------------------------------------------------

/// A self-contained gradcheck unit: layers plus probed inputs, all owned by
/// the holder so their lifetime covers every tape the check builds.
struct GradCheckFragment {
    std::string name;
    double tol = 1e-6;
    std::function<GradCheckReport(i64 max_coords, double eps)> run;
};

namespace detail {

template <class Holder>
GradCheckFragment make_fragment(const char* name, double tol, std::shared_ptr<Holder> holder,
                                std::function<Var<double>(Tape<double>&)> build) {
    GradCheckFragment f;
    f.name = name;
    f.tol = tol;
    f.run = [name, tol, holder, build](i64 max_coords, double eps) {
        GradCheckReport r = check_gradients(build, holder->params, max_coords, eps, tol);
        r.fragment = name;
        return r;
    };
    return f;
}

inline Parameter<double>* hold_input(NamedParams<double>& params,
                                     std::vector<std::unique_ptr<Parameter<double>>>& storage,
                                     const std::string& name, Tensor<double> v) {
    storage.push_back(std::make_unique<Parameter<double>>(std::move(v)));
    params.emplace_back(name, storage.back().get());
    return storage.back().get();
}

struct FragmentHolder {
    NamedParams<double> params;
    std::vector<std::unique_ptr<Parameter<double>>> inputs;
    // layer storage; only the members a given fragment uses are populated
    std::unique_ptr<Conv2d<double>> conv;
    std::unique_ptr<Linear<double>> linear;
    std::unique_ptr<Norm<double>> norm;
    std::unique_ptr<MultiheadSelfAttention<double>> msa;
    std::unique_ptr<Graft<double>> graft;
    std::unique_ptr<ResidualBlock<double>> block;
    std::unique_ptr<EncoderBlock<double>> enc1, enc2;
    std::unique_ptr<Patternformer<double>> model;
    Tensor<double> labels;
};

inline Tensor<double> frag_random(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (i64 i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
    return t;
}

}  // namespace detail

inline std::vector<GradCheckFragment> gradcheck_fragments() {
    using detail::frag_random;
    using detail::FragmentHolder;
    using detail::hold_input;
    using detail::make_fragment;
    std::vector<GradCheckFragment> out;
    const auto loss_of = [](Var<double> y) { return mean_all(mul(y, y)); };

    auto conv_fragment = [&](const char* name, i64 cin, i64 cout, i64 k, i64 s, i64 p, i64 hw) {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(101);
        h->conv = std::make_unique<Conv2d<double>>(cin, cout, k, s, p, true);
        h->conv->init(rng);
        h->params.emplace_back("weight", &h->conv->weight);
        h->params.emplace_back("bias", &h->conv->bias);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({2, cin, hw, hw}, rng));
        return make_fragment(name, 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->conv->forward(t, t.param(*x)));
        });
    };
    out.push_back(conv_fragment("conv7x7s2p3", 3, 4, 7, 2, 3, 14));
    out.push_back(conv_fragment("conv3x3s1p1", 4, 6, 3, 1, 1, 6));
    out.push_back(conv_fragment("conv3x3s2p1", 4, 6, 3, 2, 1, 7));
    out.push_back(conv_fragment("conv1x1", 6, 8, 1, 1, 0, 5));
    out.push_back(conv_fragment("conv1x1s2", 6, 8, 1, 2, 0, 6));

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(103);
        h->linear = std::make_unique<Linear<double>>(9, 5);
        h->linear->init(rng);
        h->params.emplace_back("weight", &h->linear->weight);
        h->params.emplace_back("bias", &h->linear->bias);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({3, 4, 9}, rng));
        out.push_back(make_fragment("linear", 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->linear->forward(t, t.param(*x)));
        }));
    }

    auto norm_fragment = [&](const char* name, NormKind kind) {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(105);
        h->norm = std::make_unique<Norm<double>>(kind, 8);
        for (i64 i = 0; i < 8; ++i) {
            h->norm->gamma.value[i] = 1.0 + 0.2 * rng.normal();
            h->norm->beta.value[i] = 0.2 * rng.normal();
        }
        h->params.emplace_back("gamma", &h->norm->gamma);
        h->params.emplace_back("beta", &h->norm->beta);
        Shape xs = kind == NormKind::Layer ? Shape{3, 5, 8} : Shape{3, 8, 4, 4};
        auto* x = hold_input(h->params, h->inputs, "x", frag_random(xs, rng));
        return make_fragment(name, 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->norm->forward(t, t.param(*x), true));
        });
    };
    out.push_back(norm_fragment("layer-norm", NormKind::Layer));
    out.push_back(norm_fragment("batch-norm", NormKind::Batch));
    out.push_back(norm_fragment("group-norm", NormKind::Group));

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(107);
        h->msa = std::make_unique<MultiheadSelfAttention<double>>(8, 2);
        h->msa->init(rng);
        h->msa->collect("msa", h->params);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({2, 5, 8}, rng));
        out.push_back(make_fragment("msa", 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->msa->forward(t, t.param(*x)));
        }));
    }

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(109);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({4, 6}, rng));
        out.push_back(make_fragment("gelu", 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(gelu(t.param(*x)));
        }));
        auto h2 = std::make_shared<FragmentHolder>();
        Rng rng2(111);
        auto* x2 = hold_input(h2->params, h2->inputs, "x", frag_random({4, 6}, rng2));
        out.push_back(make_fragment("softmax", 1e-6, h2, [h2, x2, loss_of](Tape<double>& t) {
            return loss_of(softmax(t.param(*x2), -1));
        }));
    }

    auto graft_fragment = [&](const char* name, GraftMode mode) {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(113);
        GraftConfig gc;
        gc.mode = mode;
        gc.n_tokens = mode == GraftMode::TransposePatch ? 9 : 5;
        gc.embed_dim = 4;
        gc.in_channels = 6;
        gc.in_h = 3;
        gc.in_w = 3;
        h->graft = std::make_unique<Graft<double>>(gc);
        h->graft->init(rng);
        h->graft->collect("graft", h->params);
        auto* x = hold_input(h->params, h->inputs, "x1", frag_random({2, 6, 3, 3}, rng));
        return make_fragment(name, 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->graft->forward(t, t.param(*x)));
        });
    };
    out.push_back(graft_fragment("graft-eq1", GraftMode::TransposePatch));
    out.push_back(graft_fragment("graft-eq2", GraftMode::Pattern));
    out.push_back(graft_fragment("graft-eq3", GraftMode::FlexiblePatch));

    auto block_fragment = [&](const char* name, BlockSpec::Kind kind) {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(115);
        h->block = std::make_unique<ResidualBlock<double>>(kind, 6, 4,
                                                           kind == BlockSpec::Kind::Bottle ? 16 : 6,
                                                           2, NormKind::Batch);
        h->block->init(rng);
        h->block->collect("block", h->params);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({2, 6, 7, 7}, rng));
        return make_fragment(name, 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            return loss_of(h->block->forward(t, t.param(*x), true));
        });
    };
    out.push_back(block_fragment("bottle-block", BlockSpec::Kind::Bottle));
    out.push_back(block_fragment("basic-block", BlockSpec::Kind::Basic));

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(117);
        h->enc1 = std::make_unique<EncoderBlock<double>>(8, 2, 2, 0.0);
        h->enc2 = std::make_unique<EncoderBlock<double>>(8, 2, 2, 0.0);
        h->enc1->init(rng);
        h->enc2->init(rng);
        h->enc1->collect("block0", h->params);
        h->enc2->collect("block1", h->params);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({2, 4, 8}, rng));
        out.push_back(make_fragment("encoder-block2", 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            Rng fwd(0);
            return loss_of(h->enc2->forward(t, h->enc1->forward(t, t.param(*x), true, fwd), true, fwd));
        }));
    }

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(119);
        auto* x = hold_input(h->params, h->inputs, "x", frag_random({3, 5, 4}, rng));
        out.push_back(make_fragment("drop-path", 1e-6, h, [h, x, loss_of](Tape<double>& t) {
            Rng mask_rng(7);  // identical per-sample mask on every evaluation
            return loss_of(drop_path(t.param(*x), 0.5, true, mask_rng));
        }));
    }

    {
        auto h = std::make_shared<FragmentHolder>();
        Rng rng(121);
        auto* x = hold_input(h->params, h->inputs, "logits", frag_random({4, 6}, rng));
        Tensor<double> labels(Shape{4, 6});
        for (i64 n = 0; n < 4; ++n) labels[n * 6 + (n % 6)] = 1.0;
        h->labels = labels;
        out.push_back(make_fragment("smoothed-ce", 1e-6, h, [h, x](Tape<double>& t) {
            return smoothed_cross_entropy(t, t.param(*x), h->labels, 0.1);
        }));
    }

    {
        // Full tiny model end-to-end: group norm (well-conditioned at batch 2),
        // no stochastic depth, label-smoothed CE loss.
        auto h = std::make_shared<FragmentHolder>();
        ModelConfig cfg = preset("tiny");
        cfg.tokenizer_norm = NormKind::Group;
        cfg.drop_path = 0.0;
        h->model = assemble_model<double>(cfg, 10, 2024);
        h->params = h->model->named_parameters();
        Rng rng(123);
        auto* x = hold_input(h->params, h->inputs, "x",
                             frag_random({2, 3, 64, 64}, rng, 0.5));
        Tensor<double> labels(Shape{2, 10});
        labels[0 * 10 + 3] = 1.0;
        labels[1 * 10 + 7] = 1.0;
        h->labels = labels;
        out.push_back(make_fragment("tiny-model", 1e-5, h, [h, x](Tape<double>& t) {
            Rng fwd(0);
            Var<double> logits = h->model->forward(t, t.param(*x), true, fwd);
            return smoothed_cross_entropy(t, logits, h->labels, 0.1);
        }));
    }

    return out;
}

inline std::vector<std::string> gradcheck_fragment_names() {
    std::vector<std::string> names;
    for (const auto& f : gradcheck_fragments()) names.push_back(f.name);
    return names;
}

inline GradCheckReport run_gradcheck_fragment(const std::string& name, i64 max_coords = 512,
                                              double eps = 1e-5) {
    for (auto& f : gradcheck_fragments()) {
        if (f.name == name) return f.run(max_coords, eps);
    }
    std::string known;
    for (const auto& n : gradcheck_fragment_names()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown gradcheck fragment '" + name + "' (known: " + known + ")");
}

}  // namespace pfm
