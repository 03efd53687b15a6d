#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "pfm/model.hpp"

namespace pfm {

/// Serialized buffer: stable path, shape, raw little-endian 32-bit floats.
struct CheckpointEntry {
    std::string path;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::uint64_t digest = 0;  // hash of the canonical config string
    std::vector<CheckpointEntry> entries;
};

std::uint64_t fnv1a64(std::string_view s);

/// Atomic write (temp file + rename). Format: "PFMT1" magic, u64 digest,
/// u32 entry count, then per entry: u32 path length, path bytes, u32 rank,
/// i64 dims, f32 data. All integers little-endian.
void save_checkpoint(const std::string& file, const Checkpoint& ckpt);

Checkpoint load_checkpoint(const std::string& file);

/// Parameters first, then norm running-stat buffers, in model order.
/// Values are stored as 32-bit floats regardless of the compute type.
template <typename T>
Checkpoint checkpoint_from_model(Patternformer<T>& model, int num_classes) {
    Checkpoint ckpt;
    ckpt.digest = fnv1a64(canonical_config_string(model.config, num_classes));
    for (auto& [path, p] : model.named_parameters()) {
        CheckpointEntry e;
        e.path = path;
        e.shape = p->value.shape();
        e.data.resize(static_cast<std::size_t>(p->value.size()));
        for (i64 i = 0; i < p->value.size(); ++i) e.data[i] = static_cast<float>(p->value[i]);
        ckpt.entries.push_back(std::move(e));
    }
    for (auto& [path, b] : model.named_buffers()) {
        CheckpointEntry e;
        e.path = path;
        e.shape = b->shape();
        e.data.resize(static_cast<std::size_t>(b->size()));
        for (i64 i = 0; i < b->size(); ++i) e.data[i] = static_cast<float>((*b)[i]);
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

/// Fails fast on a digest mismatch or any path/shape disagreement.
template <typename T>
void load_into_model(const Checkpoint& ckpt, Patternformer<T>& model, int num_classes) {
    const std::uint64_t expect = fnv1a64(canonical_config_string(model.config, num_classes));
    if (ckpt.digest != expect) {
        throw std::runtime_error("checkpoint config digest mismatch: file " +
                                 std::to_string(ckpt.digest) + " vs model " +
                                 std::to_string(expect));
    }
    std::vector<std::pair<std::string, Tensor<T>*>> targets;
    for (auto& [path, p] : model.named_parameters()) targets.emplace_back(path, &p->value);
    for (auto& [path, b] : model.named_buffers()) targets.emplace_back(path, b);
    if (targets.size() != ckpt.entries.size()) {
        throw std::runtime_error("checkpoint entry count mismatch");
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const CheckpointEntry& e = ckpt.entries[i];
        if (e.path != targets[i].first) {
            throw std::runtime_error("checkpoint path mismatch: '" + e.path + "' vs '" +
                                     targets[i].first + "'");
        }
        Tensor<T>* dst = targets[i].second;
        if (e.shape != dst->shape()) {
            throw std::runtime_error("checkpoint shape mismatch for '" + e.path + "'");
        }
        for (i64 j = 0; j < dst->size(); ++j) (*dst)[j] = static_cast<T>(e.data[j]);
    }
}

}  // namespace pfm
