#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "pfm/checkpoint.hpp"
#include "pfm/data.hpp"
#include "pfm/model.hpp"

namespace pfm {

/// Raised when a step or epoch must be abandoned (non-finite grads/loss).
struct TrainAbortError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// config & schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
    double base_lr = 2e-4;  // CIFAR default; 1e-4 for the large-scale recipe
    i64 batch_size = 1024;  // logical batch = micro-batch * accum_steps
    i64 accum_steps = 8;
    i64 epochs = 800;
    double warmup_epochs = 5;
    double weight_decay = 0.3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double layer_decay = 0.65;
    double label_smoothing = 0.1;
    double mixup_alpha = 0.8;    // <= 0 disables
    double cutmix_alpha = 1.0;   // <= 0 disables
    double mix_switch_prob = 0.5;
    bool rand_augment = true;
    double ra_prob = 0.5;
    int ra_magnitude = 9;
    std::uint64_t seed = 0;
    bool save_checkpoints = true;

    /// Linear scaling rule: lr = base_lr * batch / 256.
    double effective_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
};

/// Linear warmup 0 -> effective lr over the warmup steps, then a half cosine
/// down to exactly 0 at the final step. Continuous at the junction.
struct LrSchedule {
    double peak = 0;
    i64 warmup_steps = 0;
    i64 total_steps = 0;

    double lr_at(i64 step) const {
        if (step < 0 || step > total_steps) {
            throw std::invalid_argument("schedule step outside the training horizon");
        }
        if (warmup_steps > 0 && step <= warmup_steps) {
            return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
        }
        const double t = static_cast<double>(step - warmup_steps) /
                         static_cast<double>(total_steps - warmup_steps);
        return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * t));
    }
};

inline LrSchedule make_schedule(const TrainConfig& cfg, i64 steps_per_epoch) {
    LrSchedule s;
    s.peak = cfg.effective_lr();
    s.warmup_steps = static_cast<i64>(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
    s.total_steps = cfg.epochs * steps_per_epoch;
    if (s.total_steps <= s.warmup_steps) s.warmup_steps = std::max<i64>(0, s.total_steps - 1);
    return s;
}

// ---------------------------------------------------------------------------
// layer-wise lr decay
// ---------------------------------------------------------------------------

/// multiplier = decay^(n_groups - 1 - group); the last (head) group gets 1.
inline double layer_decay_multiplier(int group, int n_groups, double decay) {
    return std::pow(decay, static_cast<double>(n_groups - 1 - group));
}

struct LayerDecayEntry {
    std::string path;
    int group = 0;
    double mult = 1.0;
};

struct LayerDecayMap {
    static constexpr int kGroups = 6;
    std::vector<LayerDecayEntry> entries;

    double multiplier_for(const std::string& path) const {
        for (const auto& e : entries) {
            if (e.path == path) return e.mult;
        }
        throw std::invalid_argument("no layer-decay entry for '" + path + "'");
    }
};

/// Six depth groups: stem+stage1 | stage2 | stage3 | stage4 |
/// graft+pos+first half of the encoder | second half + final norm + head.
template <typename T>
LayerDecayMap build_layer_decay_map(Patternformer<T>& model, double decay) {
    const int depth = static_cast<int>(model.blocks.size());
    const int first_half = (depth + 1) / 2;
    auto group_of = [&](const std::string& path) -> int {
        auto starts = [&path](const char* p) { return path.rfind(p, 0) == 0; };
        if (starts("tokenizer.stem") || starts("tokenizer.stage1")) return 0;
        if (starts("tokenizer.stage2")) return 1;
        if (starts("tokenizer.stage3")) return 2;
        if (starts("tokenizer.stage4")) return 3;
        if (starts("graft") || starts("pos_embed")) return 4;
        if (starts("encoder.block")) {
            const int b = std::stoi(path.substr(std::string("encoder.block").size()));
            return b < first_half ? 4 : 5;
        }
        return 5;  // final norm, head
    };
    LayerDecayMap map;
    for (auto& [path, p] : model.named_parameters()) {
        LayerDecayEntry e;
        e.path = path;
        e.group = group_of(path);
        e.mult = layer_decay_multiplier(e.group, LayerDecayMap::kGroups, decay);
        map.entries.push_back(std::move(e));
    }
    return map;
}

/// Norm affine parameters and positional embeddings are excluded from decay.
inline bool weight_decay_eligible(const std::string& path) {
    if (path == "pos_embed") return false;
    auto ends_with = [&path](const char* s) {
        const std::size_t n = std::string(s).size();
        return path.size() >= n && path.compare(path.size() - n, n, s) == 0;
    };
    return !(ends_with(".gamma") || ends_with(".beta"));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

template <typename T>
struct OptimEntry {
    std::string path;
    Parameter<T>* param = nullptr;
    double lr_mult = 1.0;
    bool decay = true;
};

template <typename T>
class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    explicit AdamW(const TrainConfig& cfg)
        : AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay) {}

    i64 step_count() const { return t_; }

    /// One update over all entries. The decay is applied multiplicatively
    /// before the Adam direction; a non-finite gradient aborts the whole step
    /// before any parameter is touched.
    void step(std::vector<OptimEntry<T>>& entries, double lr) {
        for (auto& e : entries) {
            e.param->ensure_grad();
            const T* g = e.param->grad.data();
            for (i64 i = 0; i < e.param->grad.size(); ++i) {
                if (!std::isfinite(static_cast<double>(g[i]))) {
                    throw TrainAbortError("non-finite gradient in '" + e.path + "' at element " +
                                          std::to_string(i) + "; step aborted");
                }
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& e : entries) {
            State& st = state_for(e.param);
            const double step_lr = lr * e.lr_mult;
            T* p = e.param->value.data();
            const T* g = e.param->grad.data();
            T* m = st.m.data();
            T* v = st.v.data();
            const double decay_factor = e.decay ? 1.0 - step_lr * wd_ : 1.0;
            for (i64 i = 0; i < e.param->value.size(); ++i) {
                p[i] = static_cast<T>(p[i] * decay_factor);
                const double gi = g[i];
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                p[i] = static_cast<T>(p[i] - step_lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    struct State {
        Tensor<T> m, v;
    };

    State& state_for(Parameter<T>* p) {
        auto it = states_.find(p);
        if (it == states_.end()) {
            State st;
            st.m = Tensor<T>(p->value.shape());
            st.v = Tensor<T>(p->value.shape());
            it = states_.emplace(p, std::move(st)).first;
        }
        return it->second;
    }

    double beta1_, beta2_, eps_, wd_;
    i64 t_ = 0;
    std::map<Parameter<T>*, State> states_;
};

// ---------------------------------------------------------------------------
// batch mixing (mixup / cutmix)
// ---------------------------------------------------------------------------

struct MixedBatch {
    Tensor<float> images;
    Tensor<float> soft_labels;  // (N, classes), rows sum to 1
    std::string kind = "none";
    double lambda = 1.0;
};

inline Tensor<float> one_hot(const std::vector<int>& labels, int classes) {
    Tensor<float> out(Shape{static_cast<i64>(labels.size()), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) {
            throw std::invalid_argument("label out of range");
        }
        out[static_cast<i64>(i) * classes + labels[i]] = 1.0f;
    }
    return out;
}

/// x <- lambda*x + (1-lambda)*x[perm]
inline void apply_mixup(Tensor<float>& images, const std::vector<i64>& perm, double lambda) {
    const i64 N = images.dim(0);
    const i64 inner = images.size() / N;
    Tensor<float> orig = images;
    for (i64 n = 0; n < N; ++n) {
        const float* a = orig.data() + n * inner;
        const float* b = orig.data() + perm[n] * inner;
        float* o = images.data() + n * inner;
        for (i64 i = 0; i < inner; ++i) {
            o[i] = static_cast<float>(lambda * a[i] + (1.0 - lambda) * b[i]);
        }
    }
}

struct CutBox {
    i64 y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    i64 area() const { return (y1 - y0) * (x1 - x0); }
};

inline CutBox sample_cut_box(i64 h, i64 w, double lambda0, Rng& rng) {
    const double ratio = std::sqrt(std::max(0.0, 1.0 - lambda0));
    const i64 bh = static_cast<i64>(std::round(ratio * static_cast<double>(h)));
    const i64 bw = static_cast<i64>(std::round(ratio * static_cast<double>(w)));
    const i64 cy = rng.uniform_int(h);
    const i64 cx = rng.uniform_int(w);
    CutBox box;
    box.y0 = std::clamp<i64>(cy - bh / 2, 0, h);
    box.y1 = std::clamp<i64>(cy + (bh + 1) / 2, 0, h);
    box.x0 = std::clamp<i64>(cx - bw / 2, 0, w);
    box.x1 = std::clamp<i64>(cx + (bw + 1) / 2, 0, w);
    return box;
}

/// lambda adjusted to the clipped box: 1 - box_area / image_area.
inline double cutmix_lambda(const CutBox& box, i64 h, i64 w) {
    return 1.0 - static_cast<double>(box.area()) / static_cast<double>(h * w);
}

/// Pastes the box region from x[perm] into x.
inline void apply_cutmix(Tensor<float>& images, const std::vector<i64>& perm, const CutBox& box) {
    const i64 N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor<float> orig = images;
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            for (i64 y = box.y0; y < box.y1; ++y) {
                float* dst = images.data() + ((n * C + c) * H + y) * W;
                const float* src = orig.data() + ((perm[n] * C + c) * H + y) * W;
                for (i64 x = box.x0; x < box.x1; ++x) dst[x] = src[x];
            }
        }
    }
}

inline void mix_labels(Tensor<float>& soft, const std::vector<i64>& perm, double lambda) {
    const i64 N = soft.dim(0), K = soft.dim(1);
    Tensor<float> orig = soft;
    for (i64 n = 0; n < N; ++n) {
        for (i64 k = 0; k < K; ++k) {
            soft[n * K + k] = static_cast<float>(lambda * orig[n * K + k] +
                                                 (1.0 - lambda) * orig[perm[n] * K + k]);
        }
    }
}

/// One of mixup/cutmix per batch (switch_prob picks which), never both.
inline MixedBatch mix_batch(Tensor<float> images, const std::vector<int>& labels, int classes,
                            Rng& rng, double mixup_alpha, double cutmix_alpha,
                            double switch_prob = 0.5) {
    const i64 N = images.dim(0);
    MixedBatch out;
    out.soft_labels = one_hot(labels, classes);
    const bool can_mixup = mixup_alpha > 0.0;
    const bool can_cutmix = cutmix_alpha > 0.0;
    if (N < 2 || (!can_mixup && !can_cutmix)) {
        out.images = std::move(images);
        return out;
    }
    bool use_cutmix = can_cutmix && (!can_mixup || rng.uniform() < switch_prob);
    std::vector<i64> perm(static_cast<std::size_t>(N));
    for (i64 i = 0; i < N; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    if (use_cutmix) {
        const double lambda0 = rng.beta(cutmix_alpha, cutmix_alpha);
        const CutBox box = sample_cut_box(images.dim(2), images.dim(3), lambda0, rng);
        const double lambda = cutmix_lambda(box, images.dim(2), images.dim(3));
        apply_cutmix(images, perm, box);
        mix_labels(out.soft_labels, perm, lambda);
        out.kind = "cutmix";
        out.lambda = lambda;
    } else {
        const double lambda = rng.beta(mixup_alpha, mixup_alpha);
        apply_mixup(images, perm, lambda);
        mix_labels(out.soft_labels, perm, lambda);
        out.kind = "mixup";
        out.lambda = lambda;
    }
    out.images = std::move(images);
    return out;
}

// ---------------------------------------------------------------------------
// label-smoothed cross entropy
// ---------------------------------------------------------------------------

/// loss = -sum q~ . log_softmax(logits) averaged over the batch,
/// q~ = (1-eps) q + eps/K applied to the (possibly mixed) soft labels.
template <typename T>
Var<T> smoothed_cross_entropy(Tape<T>& tape, Var<T> logits, const Tensor<T>& soft_labels,
                              double eps) {
    if (logits.shape() != soft_labels.shape()) {
        throw std::invalid_argument("logits/labels shape mismatch");
    }
    const i64 K = soft_labels.shape().back();
    Tensor<T> smoothed = soft_labels;
    for (i64 i = 0; i < smoothed.size(); ++i) {
        smoothed[i] = static_cast<T>((1.0 - eps) * smoothed[i] + eps / static_cast<double>(K));
    }
    Var<T> q = tape.constant(std::move(smoothed));
    Var<T> ls = log_softmax(logits, -1);
    return neg(mean_axes(sum_axes(mul(q, ls), {1}, false), {0}, false));
}

inline double accuracy(const Tensor<float>& logits, const Tensor<float>& soft_labels) {
    const i64 N = logits.dim(0), K = logits.dim(1);
    i64 hits = 0;
    for (i64 n = 0; n < N; ++n) {
        i64 al = 0, at = 0;
        for (i64 k = 1; k < K; ++k) {
            if (logits[n * K + k] > logits[n * K + al]) al = k;
            if (soft_labels[n * K + k] > soft_labels[n * K + at]) at = k;
        }
        hits += al == at;
    }
    return static_cast<double>(hits) / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
    i64 epoch = 0;
    std::string split;
    double loss = 0;
    double acc = 0;
    double lr = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    std::string metrics_csv;
    bool aborted = false;
    std::string abort_reason;
    i64 best_epoch = -1;
    double best_eval_acc = -1.0;
};

namespace detail {

inline std::string metrics_header() { return "epoch,split,loss,acc,lr\n"; }

inline std::string metrics_line(const EpochMetrics& m) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.8f,%.6f,%.10g\n", static_cast<long long>(m.epoch),
                  m.split.c_str(), m.loss, m.acc, m.lr);
    return buf;
}

/// Gathers, augments, resizes and normalizes one micro-batch.
inline void assemble_micro_batch(const Dataset& data, const std::vector<i64>& order, i64 begin,
                                 i64 count, i64 resolution, bool augment,
                                 const TrainConfig& cfg, Rng& rng, Tensor<float>& images,
                                 std::vector<int>& labels) {
    const i64 src_res = data.resolution();
    images = Tensor<float>(Shape{count, 3, resolution, resolution});
    labels.assign(static_cast<std::size_t>(count), 0);
    for (i64 i = 0; i < count; ++i) {
        const i64 idx = order[begin + i];
        Tensor<float> img(Shape{3, src_res, src_res});
        std::copy_n(data.images.data() + idx * 3 * src_res * src_res, 3 * src_res * src_res,
                    img.data());
        if (augment && cfg.rand_augment) {
            AugmentConfig ac;
            ac.prob = cfg.ra_prob;
            ac.magnitude = cfg.ra_magnitude;
            rand_augment(img, ac, rng);
        }
        if (src_res != resolution) img = resize_bilinear(img, resolution, resolution);
        normalize_inplace(img);
        std::copy_n(img.data(), img.size(), images.data() + i * 3 * resolution * resolution);
        labels[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(idx)];
    }
}

}  // namespace detail

/// Evaluation pass over a dataset (no augmentation, eval mode).
template <typename T>
EpochMetrics evaluate(Patternformer<T>& model, const Dataset& data, const TrainConfig& cfg,
                      i64 micro_batch) {
    EpochMetrics m;
    m.split = "eval";
    Rng rng(0);
    double loss_sum = 0;
    double acc_sum = 0;
    i64 seen = 0;
    std::vector<i64> order(static_cast<std::size_t>(data.size()));
    for (i64 i = 0; i < data.size(); ++i) order[i] = i;
    for (i64 begin = 0; begin < data.size(); begin += micro_batch) {
        const i64 count = std::min<i64>(micro_batch, data.size() - begin);
        Tensor<float> images;
        std::vector<int> labels;
        detail::assemble_micro_batch(data, order, begin, count, model.config.resolution,
                                     /*augment=*/false, cfg, rng, images, labels);
        Tensor<float> soft = one_hot(labels, model.num_classes);
        Tape<T> tape;
        Rng fwd_rng(0);
        Var<T> logits = model.forward(tape, tape.input(images.template cast<T>()), false, fwd_rng);
        Var<T> loss = smoothed_cross_entropy(tape, logits, soft.template cast<T>(),
                                             cfg.label_smoothing);
        loss_sum += loss.value()[0] * static_cast<double>(count);
        acc_sum += accuracy(logits.value().template cast<float>(), soft) *
                   static_cast<double>(count);
        seen += count;
    }
    m.loss = loss_sum / static_cast<double>(seen);
    m.acc = acc_sum / static_cast<double>(seen);
    return m;
}

/// Desk-scale training loop: gradient accumulation over accum_steps
/// micro-batches per optimizer step, cosine schedule with warmup, layer-wise
/// lr decay, optional mixup/cutmix and the reduced augmentation pool.
/// Checkpoints (when out_dir is set): last.ckpt each epoch, best.ckpt on the
/// best eval accuracy. A non-finite loss or gradient aborts, retaining the
/// last written checkpoints.
template <typename T>
TrainResult train(Patternformer<T>& model, const Dataset& train_data, const Dataset* eval_data,
                  const TrainConfig& cfg, const std::string& out_dir = "") {
    if (train_data.size() == 0) throw std::invalid_argument("empty training dataset");
    if (cfg.batch_size <= 0 || cfg.accum_steps <= 0 || cfg.batch_size % cfg.accum_steps != 0) {
        throw std::invalid_argument("batch size must be a positive multiple of accum steps");
    }
    const i64 micro = cfg.batch_size / cfg.accum_steps;
    const i64 steps_per_epoch = train_data.size() / cfg.batch_size;
    if (steps_per_epoch == 0) {
        throw std::invalid_argument("dataset smaller than one logical batch");
    }
    LrSchedule sched = make_schedule(cfg, steps_per_epoch);
    LayerDecayMap decay_map = build_layer_decay_map(model, cfg.layer_decay);
    AdamW<T> opt(cfg);

    std::vector<OptimEntry<T>> entries;
    {
        auto named = model.named_parameters();
        for (std::size_t i = 0; i < named.size(); ++i) {
            OptimEntry<T> e;
            e.path = named[i].first;
            e.param = named[i].second;
            e.lr_mult = decay_map.entries[i].mult;
            e.decay = weight_decay_eligible(e.path);
            entries.push_back(std::move(e));
        }
    }

    TrainResult result;
    result.metrics_csv = detail::metrics_header();
    Rng rng(cfg.seed);
    std::vector<i64> order(static_cast<std::size_t>(train_data.size()));
    for (i64 i = 0; i < train_data.size(); ++i) order[i] = i;

    const bool mixing = cfg.mixup_alpha > 0.0 || cfg.cutmix_alpha > 0.0;
    i64 global_step = 0;
    auto save = [&](const std::string& name) {
        if (out_dir.empty() || !cfg.save_checkpoints) return;
        save_checkpoint(out_dir + "/" + name, checkpoint_from_model(model, model.num_classes));
    };

    for (i64 epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0, acc_sum = 0;
        i64 seen = 0;
        double lr = 0;
        for (i64 step = 0; step < steps_per_epoch; ++step) {
            model.zero_grad();
            for (i64 k = 0; k < cfg.accum_steps; ++k) {
                Tensor<float> images;
                std::vector<int> labels;
                detail::assemble_micro_batch(train_data, order, step * cfg.batch_size + k * micro,
                                             micro, model.config.resolution, /*augment=*/true,
                                             cfg, rng, images, labels);
                MixedBatch mb;
                if (mixing) {
                    mb = mix_batch(std::move(images), labels, model.num_classes, rng,
                                   cfg.mixup_alpha, cfg.cutmix_alpha, cfg.mix_switch_prob);
                } else {
                    mb.images = std::move(images);
                    mb.soft_labels = one_hot(labels, model.num_classes);
                }
                Tape<T> tape;
                Var<T> logits =
                    model.forward(tape, tape.input(mb.images.template cast<T>()), true, rng);
                Var<T> loss = smoothed_cross_entropy(tape, logits, mb.soft_labels.template cast<T>(),
                                                     cfg.label_smoothing);
                const double lv = loss.value()[0];
                if (!std::isfinite(lv)) {
                    result.aborted = true;
                    result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
                    result.metrics_csv += "# aborted: " + result.abort_reason + "\n";
                    return result;
                }
                tape.backward(loss);
                loss_sum += lv * static_cast<double>(micro);
                acc_sum += accuracy(logits.value().template cast<float>(), mb.soft_labels) *
                           static_cast<double>(micro);
                seen += micro;
            }
            // grads were summed over accum_steps micro-batches of mean losses
            if (cfg.accum_steps > 1) {
                const T inv = static_cast<T>(1.0 / static_cast<double>(cfg.accum_steps));
                for (auto& e : entries) {
                    if (!e.param->has_grad()) continue;
                    T* g = e.param->grad.data();
                    for (i64 i = 0; i < e.param->grad.size(); ++i) g[i] *= inv;
                }
            }
            ++global_step;
            lr = sched.lr_at(global_step);
            try {
                opt.step(entries, lr);
            } catch (const TrainAbortError& e) {
                result.aborted = true;
                result.abort_reason = e.what();
                result.metrics_csv += "# aborted: " + result.abort_reason + "\n";
                return result;
            }
        }
        EpochMetrics tm;
        tm.epoch = epoch;
        tm.split = "train";
        tm.loss = loss_sum / static_cast<double>(seen);
        tm.acc = acc_sum / static_cast<double>(seen);
        tm.lr = lr;
        result.history.push_back(tm);
        result.metrics_csv += detail::metrics_line(tm);
        if (eval_data != nullptr) {
            EpochMetrics em = evaluate(model, *eval_data, cfg, micro);
            em.epoch = epoch;
            em.lr = lr;
            result.history.push_back(em);
            result.metrics_csv += detail::metrics_line(em);
            if (em.acc > result.best_eval_acc) {
                result.best_eval_acc = em.acc;
                result.best_epoch = epoch;
                save("best.ckpt");
            }
        }
        save("last.ckpt");
    }
    return result;
}

}  // namespace pfm
