#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pfm/ops.hpp"
#include "pfm/rng.hpp"
#include "pfm/tape.hpp"

namespace pfm {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Parameter<T>*>>;

template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, Tensor<T>*>>;

// ---------------------------------------------------------------------------
// weight init
// ---------------------------------------------------------------------------

template <typename T>
void init_kaiming_normal_fan_out(Tensor<T>& w, i64 fan_out, Rng& rng) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_out));
    for (i64 i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.normal() * sigma);
}

template <typename T>
void init_trunc_normal(Tensor<T>& w, double sigma, Rng& rng) {
    for (i64 i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.trunc_normal(sigma));
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    i64 in_ch = 0, out_ch = 0, kernel = 1, stride = 1, pad = 0;
    bool has_bias = false;
    Parameter<T> weight;  // (out, in, k, k)
    Parameter<T> bias;    // (out), when has_bias

    Conv2d() = default;
    Conv2d(i64 in, i64 out, i64 k, i64 s, i64 p, bool b)
        : in_ch(in), out_ch(out), kernel(k), stride(s), pad(p), has_bias(b),
          weight(Shape{out, in, k, k}) {
        if (has_bias) bias = Parameter<T>(Shape{out});
    }

    void init(Rng& rng) {
        init_kaiming_normal_fan_out(weight.value, out_ch * kernel * kernel, rng);
        if (has_bias) bias.value.fill(T(0));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        std::optional<Var<T>> b;
        if (has_bias) b = tape.param(bias);
        return conv2d(x, tape.param(weight), b, stride, pad);
    }

    std::pair<i64, i64> out_hw(i64 h, i64 w) const {
        return {(h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1};
    }

    i64 param_count() const { return weight.value.size() + (has_bias ? bias.value.size() : 0); }

    /// MACs for one sample; bias adds are not counted.
    i64 macs(i64 h, i64 w) const {
        auto [ho, wo] = out_hw(h, w);
        return out_ch * in_ch * kernel * kernel * ho * wo;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".weight", &weight);
        if (has_bias) out.emplace_back(prefix + ".bias", &bias);
    }
};

// ---------------------------------------------------------------------------
// Linear (applies to the last axis; leading axes pass through)
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    i64 in_dim = 0, out_dim = 0;
    Parameter<T> weight;  // (out, in)
    Parameter<T> bias;    // (out)

    Linear() = default;
    Linear(i64 in, i64 out) : in_dim(in), out_dim(out), weight(Shape{out, in}), bias(Shape{out}) {}

    void init(Rng& rng, double sigma = 0.02) {
        init_trunc_normal(weight.value, sigma, rng);
        bias.value.fill(T(0));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        Shape s = x.shape();  // copy: recording ops below may relocate node storage
        if (s.empty() || s.back() != in_dim) {
            throw std::invalid_argument("linear layer expects last axis " + std::to_string(in_dim) +
                                        ", got input " + shape_str(s));
        }
        const i64 rows = x.value().size() / in_dim;
        Var<T> flat = reshape(x, {rows, in_dim});
        Var<T> y = matmul(flat, tape.param(weight), false, true);
        y = add(y, tape.param(bias));
        s.back() = out_dim;
        return reshape(y, s);
    }

    i64 param_count() const { return weight.value.size() + bias.value.size(); }
    i64 macs(i64 positions) const { return in_dim * out_dim * positions; }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".weight", &weight);
        out.emplace_back(prefix + ".bias", &bias);
    }
};

// ---------------------------------------------------------------------------
// Normalization: batch-norm / group-norm / layer-norm
// ---------------------------------------------------------------------------

enum class NormKind { Batch, Group, Layer };

inline const char* norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::Batch: return "batch";
        case NormKind::Group: return "group";
        case NormKind::Layer: return "layer";
    }
    return "?";
}

template <typename T>
struct Norm {
    NormKind kind = NormKind::Batch;
    i64 features = 0;
    int max_groups = 32;
    double eps = 1e-5;
    double momentum = 0.1;
    Parameter<T> gamma, beta;
    Tensor<T> running_mean, running_var;  // batch-norm only, not learnable

    Norm() = default;
    Norm(NormKind k, i64 f) : kind(k), features(f), gamma(Shape{f}), beta(Shape{f}) {
        gamma.value.fill(T(1));
        if (k == NormKind::Batch) {
            running_mean = Tensor<T>(Shape{f});
            running_var = Tensor<T>::full({f}, T(1));
        }
    }

    /// Largest divisor of the channel count that is <= max_groups.
    i64 group_count() const {
        i64 g = std::min<i64>(max_groups, features);
        while (features % g != 0) --g;
        return g;
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        switch (kind) {
            case NormKind::Layer: return forward_layer(tape, x);
            case NormKind::Group: return forward_group(tape, x);
            case NormKind::Batch: return forward_batch(tape, x, training);
        }
        throw std::logic_error("unknown norm kind");
    }

    i64 param_count() const { return gamma.value.size() + beta.value.size(); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".gamma", &gamma);
        out.emplace_back(prefix + ".beta", &beta);
    }

    void collect_buffers(const std::string& prefix, NamedBuffers<T>& out) {
        if (kind == NormKind::Batch) {
            out.emplace_back(prefix + ".running_mean", &running_mean);
            out.emplace_back(prefix + ".running_var", &running_var);
        }
    }

private:
    Var<T> affine_channelwise(Tape<T>& tape, Var<T> xhat, int spatial_rank) {
        Shape cs{features};
        for (int i = 0; i < spatial_rank; ++i) cs.push_back(1);
        Var<T> g = reshape(tape.param(gamma), cs);
        Var<T> b = reshape(tape.param(beta), cs);
        return add(mul(xhat, g), b);
    }

    Var<T> forward_layer(Tape<T>& tape, Var<T> x) {
        if (x.shape().empty() || x.shape().back() != features) {
            throw std::invalid_argument("layer norm expects last axis " + std::to_string(features) +
                                        ", got " + shape_str(x.shape()));
        }
        Var<T> mu = mean_axes(x, {-1}, true);
        Var<T> centered = sub(x, mu);
        Var<T> var = mean_axes(mul(centered, centered), {-1}, true);
        Var<T> xhat = div(centered, sqrt(add_scalar(var, eps)));
        return add(mul(xhat, tape.param(gamma)), tape.param(beta));
    }

    Var<T> forward_group(Tape<T>& tape, Var<T> x) {
        if (x.value().rank() != 4 || x.shape()[1] != features) {
            throw std::invalid_argument("group norm expects (N,C,H,W) with C = " +
                                        std::to_string(features));
        }
        const i64 N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
        const i64 G = group_count();
        Var<T> grouped = reshape(x, {N, G, (C / G) * H * W});
        Var<T> mu = mean_axes(grouped, {2}, true);
        Var<T> centered = sub(grouped, mu);
        Var<T> var = mean_axes(mul(centered, centered), {2}, true);
        Var<T> xhat = div(centered, sqrt(add_scalar(var, eps)));
        return affine_channelwise(tape, reshape(xhat, {N, C, H, W}), 2);
    }

    Var<T> forward_batch(Tape<T>& tape, Var<T> x, bool training) {
        if (x.value().rank() != 4 || x.shape()[1] != features) {
            throw std::invalid_argument("batch norm expects (N,C,H,W) with C = " +
                                        std::to_string(features));
        }
        if (training) {
            const i64 n_per_ch = x.shape()[0] * x.shape()[2] * x.shape()[3];
            Var<T> mu = mean_axes(x, {0, 2, 3}, true);  // (1,C,1,1)
            Var<T> centered = sub(x, mu);
            Var<T> var = mean_axes(mul(centered, centered), {0, 2, 3}, true);
            update_running(mu.value(), var.value(), n_per_ch);
            Var<T> xhat = div(centered, sqrt(add_scalar(var, eps)));
            return affine_channelwise(tape, xhat, 2);
        }
        Var<T> rm = tape.constant(reshape_running(running_mean));
        Var<T> rv = tape.constant(reshape_running(running_var));
        Var<T> xhat = div(sub(x, rm), sqrt(add_scalar(rv, eps)));
        return affine_channelwise(tape, xhat, 2);
    }

    Tensor<T> reshape_running(const Tensor<T>& t) const {
        return Tensor<T>(Shape{features, 1, 1}, t.vec());
    }

    void update_running(const Tensor<T>& mu, const Tensor<T>& var, i64 n) {
        // Unbiased variance for the running estimate, biased for normalization.
        const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        for (i64 c = 0; c < features; ++c) {
            running_mean[c] =
                static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu[c]);
            running_var[c] =
                static_cast<T>((1.0 - momentum) * running_var[c] + momentum * var[c] * unbias);
        }
    }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

template <typename T>
struct MultiheadSelfAttention {
    i64 dim = 0, heads = 1;
    Linear<T> qkv;   // D -> 3D, with bias
    Linear<T> proj;  // D -> D, with bias

    MultiheadSelfAttention() = default;
    MultiheadSelfAttention(i64 d, i64 h) : dim(d), heads(h), qkv(d, 3 * d), proj(d, d) {
        if (h <= 0 || d % h != 0) {
            throw std::invalid_argument("embedding dim " + std::to_string(d) +
                                        " is not divisible by head count " + std::to_string(h));
        }
    }

    void init(Rng& rng) {
        qkv.init(rng);
        proj.init(rng);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        const Shape s = x.shape();
        if (s.size() != 3 || s[2] != dim) {
            throw std::invalid_argument("attention expects (N,T,D) with D = " + std::to_string(dim));
        }
        const i64 N = s[0], Tk = s[1];
        const i64 hd = dim / heads;
        Var<T> qkv_out = qkv.forward(tape, x);                       // (N,T,3D)
        Var<T> split = reshape(qkv_out, {N, Tk, 3, heads, hd});
        split = permute(split, {2, 0, 3, 1, 4});                     // (3,N,h,T,hd)
        auto head_view = [&](i64 which) {
            return reshape(slice(split, 0, which, 1), {N * heads, Tk, hd});
        };
        Var<T> q = head_view(0);
        Var<T> k = head_view(1);
        Var<T> v = head_view(2);
        Var<T> scores = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(hd)));
        Var<T> attn = softmax(scores, -1);                           // (N*h,T,T)
        Var<T> ctx = matmul(attn, v);                                // (N*h,T,hd)
        ctx = reshape(ctx, {N, heads, Tk, hd});
        ctx = permute(ctx, {0, 2, 1, 3});
        ctx = reshape(ctx, {N, Tk, dim});
        return proj.forward(tape, ctx);
    }

    /// Attention weights for inspection, (N*heads, T, T).
    Tensor<T> attention_weights(const Tensor<T>& x) {
        Tape<T> tape;
        Var<T> vx = tape.input(x, false);
        const i64 N = x.dim(0), Tk = x.dim(1);
        const i64 hd = dim / heads;
        Var<T> qkv_out = qkv.forward(tape, vx);
        Var<T> split = permute(reshape(qkv_out, {N, Tk, 3, heads, hd}), {2, 0, 3, 1, 4});
        Var<T> q = reshape(slice(split, 0, 0, 1), {N * heads, Tk, hd});
        Var<T> k = reshape(slice(split, 0, 1, 1), {N * heads, Tk, hd});
        Var<T> scores = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(hd)));
        return softmax(scores, -1).value();
    }

    i64 param_count() const { return qkv.param_count() + proj.param_count(); }

    /// qkv/out projections plus the two T^2 D attention matmuls.
    i64 macs(i64 tokens) const {
        return qkv.macs(tokens) + proj.macs(tokens) + 2 * tokens * tokens * dim;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        qkv.collect(prefix + ".qkv", out);
        proj.collect(prefix + ".proj", out);
    }
};

}  // namespace pfm
