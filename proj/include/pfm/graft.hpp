#pragma once

#include <string>

#include "pfm/nn.hpp"

namespace pfm {

/// The three image-to-sequence conversions between the tokenizer and the
/// transformer:
///   TransposePatch:  x2 = Transpose(Flatten(Conv(x1)))          spatial tokens
///   Pattern:         x2 = Linear(Flatten(Conv(x1)))             channel tokens
///   FlexiblePatch:   x2 = Transpose(Linear(Flatten(Conv(x1))))  remapped spatial tokens
enum class GraftMode { TransposePatch, Pattern, FlexiblePatch };

inline const char* graft_mode_name(GraftMode m) {
    switch (m) {
        case GraftMode::TransposePatch: return "transpose-patch";
        case GraftMode::Pattern: return "pattern";
        case GraftMode::FlexiblePatch: return "flexible-patch";
    }
    return "?";
}

struct GraftConfig {
    GraftMode mode = GraftMode::Pattern;
    i64 n_tokens = 0;   // sequence length T
    i64 embed_dim = 0;  // C2
    i64 in_channels = 0;  // C1
    i64 in_h = 0, in_w = 0;  // (H', W')
};

inline void validate_graft_config(const GraftConfig& c) {
    if (c.n_tokens <= 0 || c.embed_dim <= 0 || c.in_channels <= 0 || c.in_h <= 0 || c.in_w <= 0) {
        throw std::invalid_argument("graft config has non-positive dimensions");
    }
    if (c.mode == GraftMode::TransposePatch && c.n_tokens != c.in_h * c.in_w) {
        throw std::invalid_argument(
            "transpose-patch grafting requires n_tokens == H'*W' (" +
            std::to_string(c.in_h * c.in_w) + "), got " + std::to_string(c.n_tokens));
    }
}

/// The grafting layer. The conv is 1x1 with bias; the extra linear layer of
/// the pattern/flexible modes maps the flattened H'*W' spatial axis and is
/// therefore bound to the build resolution.
template <typename T>
struct Graft {
    GraftConfig config;
    Conv2d<T> conv;
    Linear<T> linear;  // unused in TransposePatch mode
    bool has_linear = false;

    Graft() = default;

    explicit Graft(const GraftConfig& c) : config(c) {
        validate_graft_config(c);
        const i64 hw = c.in_h * c.in_w;
        switch (c.mode) {
            case GraftMode::TransposePatch:
                conv = Conv2d<T>(c.in_channels, c.embed_dim, 1, 1, 0, true);
                break;
            case GraftMode::Pattern:
                conv = Conv2d<T>(c.in_channels, c.n_tokens, 1, 1, 0, true);
                linear = Linear<T>(hw, c.embed_dim);
                has_linear = true;
                break;
            case GraftMode::FlexiblePatch:
                conv = Conv2d<T>(c.in_channels, c.embed_dim, 1, 1, 0, true);
                linear = Linear<T>(hw, c.n_tokens);
                has_linear = true;
                break;
        }
    }

    void init(Rng& rng) {
        init_trunc_normal(conv.weight.value, 0.02, rng);
        conv.bias.value.fill(T(0));
        if (has_linear) linear.init(rng);
    }

    /// x1 (N, C1, H', W') -> token sequence (N, T, C2).
    Var<T> forward(Tape<T>& tape, Var<T> x1) {
        const Shape s = x1.shape();
        if (s.size() != 4 || s[1] != config.in_channels) {
            throw std::invalid_argument("graft expects (N," + std::to_string(config.in_channels) +
                                        ",H',W'), got " + shape_str(s));
        }
        if (s[2] != config.in_h || s[3] != config.in_w) {
            throw std::invalid_argument(
                "graft linear weight is bound to a " + std::to_string(config.in_h) + "x" +
                std::to_string(config.in_w) + " activation map; got " + std::to_string(s[2]) +
                "x" + std::to_string(s[3]) + " (rebuild the graft for this resolution)");
        }
        const i64 N = s[0];
        const i64 hw = config.in_h * config.in_w;
        Var<T> c = conv.forward(tape, x1);
        switch (config.mode) {
            case GraftMode::TransposePatch: {
                Var<T> flat = reshape(c, {N, config.embed_dim, hw});
                return permute(flat, {0, 2, 1});  // (N, H'W', C2)
            }
            case GraftMode::Pattern: {
                Var<T> flat = reshape(c, {N, config.n_tokens, hw});
                return linear.forward(tape, flat);  // (N, T, C2)
            }
            case GraftMode::FlexiblePatch: {
                Var<T> flat = reshape(c, {N, config.embed_dim, hw});
                Var<T> mapped = linear.forward(tape, flat);  // (N, C2, T)
                return permute(mapped, {0, 2, 1});           // (N, T, C2)
            }
        }
        throw std::logic_error("unknown graft mode");
    }

    i64 param_count() const { return conv.param_count() + (has_linear ? linear.param_count() : 0); }

    i64 macs() const {
        const i64 hw = config.in_h * config.in_w;
        i64 total = conv.macs(config.in_h, config.in_w);
        if (has_linear) {
            // one linear application per conv output channel
            total += linear.macs(conv.out_ch);
        }
        (void)hw;
        return total;
    }

    void collect(const std::string& p, NamedParams<T>& out) {
        conv.collect(p + ".conv", out);
        if (has_linear) linear.collect(p + ".linear", out);
    }
};

}  // namespace pfm
