#pragma once

#include <memory>
#include <string>
#include <vector>

#include "pfm/config.hpp"
#include "pfm/graft.hpp"
#include "pfm/resnet.hpp"

namespace pfm {

/// Pre-norm transformer block:
///   x <- x + drop_path(MSA(LN(x)));  x <- x + drop_path(MLP(LN(x)))
template <typename T>
struct EncoderBlock {
    Norm<T> norm1, norm2;
    MultiheadSelfAttention<T> attn;
    Linear<T> fc1, fc2;
    double drop_prob = 0.0;

    EncoderBlock() = default;
    EncoderBlock(i64 dim, i64 heads, i64 mlp_ratio, double dp)
        : norm1(NormKind::Layer, dim),
          norm2(NormKind::Layer, dim),
          attn(dim, heads),
          fc1(dim, dim * mlp_ratio),
          fc2(dim * mlp_ratio, dim),
          drop_prob(dp) {}

    void init(Rng& rng) {
        attn.init(rng);
        fc1.init(rng);
        fc2.init(rng);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, bool training, Rng& rng) {
        Var<T> h = attn.forward(tape, norm1.forward(tape, x, training));
        x = add(x, drop_path(h, drop_prob, training, rng));
        Var<T> m = fc2.forward(tape, gelu(fc1.forward(tape, norm2.forward(tape, x, training))));
        return add(x, drop_path(m, drop_prob, training, rng));
    }

    i64 param_count() const {
        return norm1.param_count() + norm2.param_count() + attn.param_count() +
               fc1.param_count() + fc2.param_count();
    }

    i64 macs(i64 tokens) const { return attn.macs(tokens) + fc1.macs(tokens) + fc2.macs(tokens); }

    void collect(const std::string& p, NamedParams<T>& out) {
        norm1.collect(p + ".norm1", out);
        attn.collect(p + ".attn", out);
        norm2.collect(p + ".norm2", out);
        fc1.collect(p + ".mlp.fc1", out);
        fc2.collect(p + ".mlp.fc2", out);
    }
};

/// Tokenizer -> graft -> (+positional embedding) -> encoder -> final LN
/// -> mean over tokens -> linear classifier. No class token.
template <typename T>
struct Patternformer {
    ModelConfig config;
    int num_classes = 0;

    Tokenizer<T> tokenizer;
    Graft<T> graft;
    bool use_pos_embed = true;
    Parameter<T> pos_embed;  // (T, D)
    std::vector<EncoderBlock<T>> blocks;
    Norm<T> final_norm;
    Linear<T> head;

    /// Logits for a batch of images (N,3,H,W).
    Var<T> forward(Tape<T>& tape, Var<T> x, bool training, Rng& rng) {
        Var<T> x1 = tokenizer.forward(tape, x, training);
        Var<T> tokens = graft.forward(tape, x1);
        if (use_pos_embed) tokens = add(tokens, tape.param(pos_embed));
        for (auto& blk : blocks) tokens = blk.forward(tape, tokens, training, rng);
        tokens = final_norm.forward(tape, tokens, training);
        Var<T> pooled = mean_axes(tokens, {1}, false);  // (N, D)
        return head.forward(tape, pooled);
    }

    /// Eval-mode forward without gradient bookkeeping.
    Tensor<T> predict(const Tensor<T>& images) {
        Tape<T> tape;
        Rng rng(0);  // unused in eval mode
        return forward(tape, tape.input(images), false, rng).value();
    }

    NamedParams<T> named_parameters() {
        NamedParams<T> out;
        tokenizer.collect("tokenizer", out);
        graft.collect("graft", out);
        if (use_pos_embed) out.emplace_back("pos_embed", &pos_embed);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            blocks[b].collect("encoder.block" + std::to_string(b), out);
        }
        final_norm.collect("norm", out);
        head.collect("head", out);
        return out;
    }

    NamedBuffers<T> named_buffers() {
        NamedBuffers<T> out;
        tokenizer.collect_buffers("tokenizer", out);
        return out;
    }

    i64 param_count() {
        i64 n = 0;
        for (auto& [path, p] : named_parameters()) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [path, p] : named_parameters()) p->zero_grad();
    }
};

/// Builds and initializes a model. Rejections name the violated invariant.
/// init=false skips random weight generation (used by the cost audit).
template <typename T>
std::unique_ptr<Patternformer<T>> assemble_model(const ModelConfig& cfg, int num_classes,
                                                 std::uint64_t seed, bool init = true) {
    if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
    if (cfg.resolution % 32 != 0) {
        throw std::invalid_argument("resolution " + std::to_string(cfg.resolution) +
                                    " violates: resolution divisible by 32");
    }
    if (cfg.heads <= 0 || cfg.embed % cfg.heads != 0) {
        throw std::invalid_argument("config violates: embed dim divisible by heads (" +
                                    std::to_string(cfg.embed) + " vs " +
                                    std::to_string(cfg.heads) + ")");
    }
    if (cfg.mlp_ratio < 1 || cfg.mlp_ratio > 4) {
        throw std::invalid_argument("config violates: mlp ratio in {1,2,3,4}");
    }
    if (cfg.depth <= 0 || cfg.tokens <= 0 || cfg.embed <= 0) {
        throw std::invalid_argument("config violates: positive depth/tokens/embed");
    }
    validate_block_spec(BlockSpec{cfg.block, cfg.width});
    const i64 hp = cfg.resolution / 32;
    if (cfg.graft == GraftMode::TransposePatch && cfg.tokens != hp * hp) {
        throw std::invalid_argument(
            "config violates: transpose-patch token count must equal H'*W' = " +
            std::to_string(hp * hp) + ", got " + std::to_string(cfg.tokens));
    }
    if (cfg.drop_path < 0.0 || cfg.drop_path >= 1.0) {
        throw std::invalid_argument("config violates: drop path in [0,1)");
    }

    auto model = std::make_unique<Patternformer<T>>();
    model->config = cfg;
    model->num_classes = num_classes;
    model->tokenizer = Tokenizer<T>(BlockSpec{cfg.block, cfg.width}, StagePlan{cfg.stages},
                                    cfg.tokenizer_norm);
    GraftConfig gc;
    gc.mode = cfg.graft;
    gc.n_tokens = cfg.tokens;
    gc.embed_dim = cfg.embed;
    gc.in_channels = model->tokenizer.out_channels;
    gc.in_h = hp;
    gc.in_w = hp;
    model->graft = Graft<T>(gc);
    model->use_pos_embed = cfg.pos_embed;
    if (cfg.pos_embed) model->pos_embed = Parameter<T>(Shape{cfg.tokens, cfg.embed});
    for (int b = 0; b < cfg.depth; ++b) {
        model->blocks.emplace_back(cfg.embed, cfg.heads, cfg.mlp_ratio, cfg.drop_path);
    }
    model->final_norm = Norm<T>(NormKind::Layer, cfg.embed);
    model->head = Linear<T>(cfg.embed, num_classes);

    if (init) {
        Rng rng(seed);
        model->tokenizer.init(rng);
        model->graft.init(rng);
        if (cfg.pos_embed) init_trunc_normal(model->pos_embed.value, 0.02, rng);
        for (auto& blk : model->blocks) blk.init(rng);
        model->head.init(rng);
    }
    return model;
}

}  // namespace pfm
