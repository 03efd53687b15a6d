#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include "pfm/graft.hpp"
#include "pfm/resnet.hpp"

namespace pfm {

/// One row of the model family table plus the desk-scale knobs.
struct ModelConfig {
    std::string name;
    BlockSpec::Kind block = BlockSpec::Kind::Bottle;
    int width = 64;
    std::array<int, 4> stages{3, 4, 6, 3};
    int tokens = 128;
    int embed = 768;
    int depth = 12;
    int heads = 12;
    int mlp_ratio = 4;
    GraftMode graft = GraftMode::Pattern;
    int resolution = 224;
    NormKind tokenizer_norm = NormKind::Batch;
    double drop_path = 0.1;
    bool pos_embed = true;

    i64 tokenizer_channels() const {
        return 8LL * width * (block == BlockSpec::Kind::Bottle ? 4 : 1);
    }
};

inline const std::vector<ModelConfig>& model_registry() {
    static const std::vector<ModelConfig> kRegistry = [] {
        std::vector<ModelConfig> v;
        auto push = [&v](const char* name, BlockSpec::Kind k, int w, std::array<int, 4> st,
                         int tok, int emb, int dep, int hd, int mlp) {
            ModelConfig c;
            c.name = name;
            c.block = k;
            c.width = w;
            c.stages = st;
            c.tokens = tok;
            c.embed = emb;
            c.depth = dep;
            c.heads = hd;
            c.mlp_ratio = mlp;
            v.push_back(c);
        };
        using K = BlockSpec::Kind;
        push("Res34-ViT_S", K::Basic, 64, {3, 4, 6, 3}, 128, 384, 12, 6, 4);
        push("Res34-ViT_B", K::Basic, 64, {3, 4, 6, 3}, 128, 768, 12, 12, 4);
        push("Res50-ViT_S", K::Bottle, 64, {3, 4, 6, 3}, 128, 384, 12, 6, 4);
        push("Res50-ViT_B", K::Bottle, 64, {3, 4, 6, 3}, 128, 768, 12, 12, 4);
        push("Efficient-T", K::Bottle, 32, {1, 1, 6, 3}, 64, 192, 6, 6, 2);
        push("Efficient-S", K::Bottle, 64, {1, 1, 6, 3}, 64, 384, 6, 6, 2);
        push("Efficient-B", K::Bottle, 96, {1, 1, 6, 3}, 64, 576, 6, 6, 2);

        // Desk-scale preset for overfit/smoke runs.
        ModelConfig tiny;
        tiny.name = "tiny";
        tiny.block = K::Bottle;
        tiny.width = 8;
        tiny.stages = {1, 1, 1, 1};
        tiny.tokens = 8;
        tiny.embed = 32;
        tiny.depth = 2;
        tiny.heads = 2;
        tiny.mlp_ratio = 2;
        tiny.resolution = 64;
        v.push_back(tiny);
        return v;
    }();
    return kRegistry;
}

inline ModelConfig preset(const std::string& name) {
    for (const auto& c : model_registry()) {
        if (c.name == name) return c;
    }
    std::string known;
    for (const auto& c : model_registry()) known += (known.empty() ? "" : ", ") + c.name;
    throw std::invalid_argument("unknown preset '" + name + "' (known: " + known + ")");
}

/// Canonical one-line description; hashed into the checkpoint digest.
inline std::string canonical_config_string(const ModelConfig& c, int num_classes) {
    std::ostringstream os;
    os << c.name << "|" << block_kind_name(c.block) << "|" << c.width << "|[";
    for (int i = 0; i < 4; ++i) os << (i ? "," : "") << c.stages[i];
    os << "]|" << c.tokens << "|" << c.embed << "|" << c.depth << "|" << c.heads << "|"
       << c.mlp_ratio << "|" << graft_mode_name(c.graft) << "|" << c.resolution << "|"
       << norm_kind_name(c.tokenizer_norm) << "|pos=" << (c.pos_embed ? 1 : 0)
       << "|classes=" << num_classes;
    return os.str();
}

}  // namespace pfm
