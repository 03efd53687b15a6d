#pragma once

#include <array>
#include <string>
#include <vector>

#include "pfm/nn.hpp"

namespace pfm {

struct BlockSpec {
    enum class Kind { Basic, Bottle };
    Kind kind = Kind::Bottle;
    int width = 64;  // stage-1 base width; stages use [w, 2w, 4w, 8w]

    int expansion() const { return kind == Kind::Bottle ? 4 : 1; }
};

inline const char* block_kind_name(BlockSpec::Kind k) {
    return k == BlockSpec::Kind::Basic ? "basic" : "bottle";
}

struct StagePlan {
    std::array<int, 4> counts{3, 4, 6, 3};
};

inline void validate_block_spec(const BlockSpec& spec) {
    static constexpr int kAllowedWidths[] = {8, 16, 32, 64, 96};
    bool ok = false;
    for (int w : kAllowedWidths) ok = ok || spec.width == w;
    if (!ok) {
        throw std::invalid_argument("tokenizer width " + std::to_string(spec.width) +
                                    " not in {8,16,32,64,96}");
    }
    if (spec.kind == BlockSpec::Kind::Basic && spec.width != 64) {
        throw std::invalid_argument("basic blocks use a fixed width of 64, got " +
                                    std::to_string(spec.width));
    }
}

/// Basic: 3x3 -> 3x3. Bottle: 1x1 reduce -> 3x3 (strided) -> 1x1 expand x4.
/// A 1x1 projection shortcut is added when the shape changes.
template <typename T>
struct ResidualBlock {
    bool bottle = true;
    i64 stride = 1;
    Conv2d<T> conv1, conv2, conv3;
    Norm<T> norm1, norm2, norm3;
    bool has_down = false;
    Conv2d<T> down_conv;
    Norm<T> down_norm;

    ResidualBlock() = default;

    ResidualBlock(BlockSpec::Kind kind, i64 in_ch, i64 width, i64 out_ch, i64 s, NormKind nk)
        : bottle(kind == BlockSpec::Kind::Bottle), stride(s) {
        if (bottle) {
            conv1 = Conv2d<T>(in_ch, width, 1, 1, 0, false);
            norm1 = Norm<T>(nk, width);
            conv2 = Conv2d<T>(width, width, 3, s, 1, false);
            norm2 = Norm<T>(nk, width);
            conv3 = Conv2d<T>(width, out_ch, 1, 1, 0, false);
            norm3 = Norm<T>(nk, out_ch);
        } else {
            conv1 = Conv2d<T>(in_ch, width, 3, s, 1, false);
            norm1 = Norm<T>(nk, width);
            conv2 = Conv2d<T>(width, out_ch, 3, 1, 1, false);
            norm2 = Norm<T>(nk, out_ch);
        }
        if (s != 1 || in_ch != out_ch) {
            has_down = true;
            down_conv = Conv2d<T>(in_ch, out_ch, 1, s, 0, false);
            down_norm = Norm<T>(nk, out_ch);
        }
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        if (x.shape()[1] != conv1.in_ch) {
            throw std::invalid_argument("block channel mismatch: got " +
                                        std::to_string(x.shape()[1]) + ", expected " +
                                        std::to_string(conv1.in_ch));
        }
        Var<T> shortcut = x;
        if (has_down) {
            shortcut = down_norm.forward(tape, down_conv.forward(tape, x), training);
        }
        Var<T> h = relu(norm1.forward(tape, conv1.forward(tape, x), training));
        if (bottle) {
            h = relu(norm2.forward(tape, conv2.forward(tape, h), training));
            h = norm3.forward(tape, conv3.forward(tape, h), training);
        } else {
            h = norm2.forward(tape, conv2.forward(tape, h), training);
        }
        return relu(add(h, shortcut));
    }

    void init(Rng& rng) {
        conv1.init(rng);
        conv2.init(rng);
        if (bottle) conv3.init(rng);
        if (has_down) down_conv.init(rng);
    }

    void collect(const std::string& p, NamedParams<T>& out) {
        conv1.collect(p + ".conv1", out);
        norm1.collect(p + ".norm1", out);
        conv2.collect(p + ".conv2", out);
        norm2.collect(p + ".norm2", out);
        if (bottle) {
            conv3.collect(p + ".conv3", out);
            norm3.collect(p + ".norm3", out);
        }
        if (has_down) {
            down_conv.collect(p + ".down.conv", out);
            down_norm.collect(p + ".down.norm", out);
        }
    }

    void collect_buffers(const std::string& p, NamedBuffers<T>& out) {
        norm1.collect_buffers(p + ".norm1", out);
        norm2.collect_buffers(p + ".norm2", out);
        if (bottle) norm3.collect_buffers(p + ".norm3", out);
        if (has_down) down_norm.collect_buffers(p + ".down.norm", out);
    }

    i64 param_count() const {
        i64 n = conv1.param_count() + norm1.param_count() + conv2.param_count() +
                norm2.param_count();
        if (bottle) n += conv3.param_count() + norm3.param_count();
        if (has_down) n += down_conv.param_count() + down_norm.param_count();
        return n;
    }

    i64 macs(i64& h, i64& w) const {
        i64 total = 0;
        i64 h2 = h, w2 = w;
        total += conv1.macs(h, w);
        if (bottle) {
            auto [hh, ww] = conv2.out_hw(h, w);
            total += conv2.macs(h, w);
            h2 = hh;
            w2 = ww;
            total += conv3.macs(h2, w2);
        } else {
            auto [hh, ww] = conv1.out_hw(h, w);
            h2 = hh;
            w2 = ww;
            total += conv2.macs(h2, w2);
        }
        if (has_down) total += down_conv.macs(h, w);
        h = h2;
        w = w2;
        return total;
    }
};

/// The heavy tokenizer: a full ResNet trunk mapping (N,3,H,W) to the
/// activation map (N, C1, H/32, W/32) whose channels are candidate patterns.
template <typename T>
struct Tokenizer {
    struct Stage {
        bool projection_only = false;
        Conv2d<T> proj_conv;
        Norm<T> proj_norm;
        std::vector<ResidualBlock<T>> blocks;
    };

    BlockSpec spec;
    StagePlan plan;
    NormKind norm_kind = NormKind::Batch;
    Conv2d<T> stem_conv;
    Norm<T> stem_norm;
    std::array<Stage, 4> stages;
    i64 out_channels = 0;  // C1 = 8 * width * expansion

    Tokenizer() = default;

    Tokenizer(BlockSpec s, StagePlan p, NormKind nk) : spec(s), plan(p), norm_kind(nk) {
        validate_block_spec(spec);
        for (int c : plan.counts) {
            if (c < 0) throw std::invalid_argument("stage counts must be non-negative");
        }
        const i64 w = spec.width;
        const i64 e = spec.expansion();
        stem_conv = Conv2d<T>(3, w, 7, 2, 3, false);
        stem_norm = Norm<T>(nk, w);
        i64 in_ch = w;
        for (int si = 0; si < 4; ++si) {
            const i64 width = w << si;
            const i64 out_ch = width * e;
            const i64 stage_stride = si == 0 ? 1 : 2;
            Stage& st = stages[si];
            if (plan.counts[si] == 0) {
                // Keep the stride-2 channel projection so downstream shapes
                // are unchanged when a stage is emptied.
                st.projection_only = true;
                st.proj_conv = Conv2d<T>(in_ch, out_ch, 1, stage_stride, 0, false);
                st.proj_norm = Norm<T>(nk, out_ch);
            } else {
                for (int b = 0; b < plan.counts[si]; ++b) {
                    const i64 bin = b == 0 ? in_ch : out_ch;
                    const i64 bs = b == 0 ? stage_stride : 1;
                    st.blocks.emplace_back(spec.kind, bin, width, out_ch, bs, nk);
                }
            }
            in_ch = out_ch;
        }
        out_channels = in_ch;
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training) {
        const Shape s = x.shape();
        if (s.size() != 4 || s[1] != 3) {
            throw std::invalid_argument("tokenizer expects (N,3,H,W), got " + shape_str(s));
        }
        if (s[2] % 32 != 0 || s[3] % 32 != 0) {
            throw std::invalid_argument("tokenizer input " + std::to_string(s[2]) + "x" +
                                        std::to_string(s[3]) +
                                        " is not divisible by the 32x downsampling factor");
        }
        Var<T> h = relu(stem_norm.forward(tape, stem_conv.forward(tape, x), training));
        h = maxpool2d(h, 3, 2, 1);
        for (auto& st : stages) {
            if (st.projection_only) {
                h = st.proj_norm.forward(tape, st.proj_conv.forward(tape, h), training);
            } else {
                for (auto& blk : st.blocks) h = blk.forward(tape, h, training);
            }
        }
        return h;
    }

    void init(Rng& rng) {
        stem_conv.init(rng);
        for (auto& st : stages) {
            if (st.projection_only) {
                st.proj_conv.init(rng);
            } else {
                for (auto& blk : st.blocks) blk.init(rng);
            }
        }
    }

    void collect(const std::string& p, NamedParams<T>& out) {
        stem_conv.collect(p + ".stem.conv", out);
        stem_norm.collect(p + ".stem.norm", out);
        for (int si = 0; si < 4; ++si) {
            const std::string sp = p + ".stage" + std::to_string(si + 1);
            Stage& st = stages[si];
            if (st.projection_only) {
                st.proj_conv.collect(sp + ".proj.conv", out);
                st.proj_norm.collect(sp + ".proj.norm", out);
            } else {
                for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                    st.blocks[b].collect(sp + ".block" + std::to_string(b), out);
                }
            }
        }
    }

    void collect_buffers(const std::string& p, NamedBuffers<T>& out) {
        stem_norm.collect_buffers(p + ".stem.norm", out);
        for (int si = 0; si < 4; ++si) {
            const std::string sp = p + ".stage" + std::to_string(si + 1);
            Stage& st = stages[si];
            if (st.projection_only) {
                st.proj_norm.collect_buffers(sp + ".proj.norm", out);
            } else {
                for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                    st.blocks[b].collect_buffers(sp + ".block" + std::to_string(b), out);
                }
            }
        }
    }

    /// MACs for one sample at the given input resolution; also reports the
    /// per-stage split through `per_stage` when non-null.
    i64 macs(i64 resolution, std::array<i64, 5>* per_stage = nullptr) const {
        i64 h = resolution, w = resolution;
        i64 total = stem_conv.macs(h, w);
        auto [h1, w1] = stem_conv.out_hw(h, w);
        h = (h1 + 2 * 1 - 3) / 2 + 1;  // 3x3 stride-2 pad-1 max pool
        w = (w1 + 2 * 1 - 3) / 2 + 1;
        if (per_stage) (*per_stage)[0] = total;
        for (int si = 0; si < 4; ++si) {
            i64 stage_total = 0;
            const Stage& st = stages[si];
            if (st.projection_only) {
                stage_total += st.proj_conv.macs(h, w);
                auto [h2, w2] = st.proj_conv.out_hw(h, w);
                h = h2;
                w = w2;
            } else {
                for (const auto& blk : st.blocks) stage_total += blk.macs(h, w);
            }
            if (per_stage) (*per_stage)[si + 1] = stage_total;
            total += stage_total;
        }
        return total;
    }
};

template <typename T>
Tokenizer<T> build_tokenizer(BlockSpec spec, StagePlan plan, NormKind nk = NormKind::Batch) {
    return Tokenizer<T>(spec, plan, nk);
}

}  // namespace pfm
