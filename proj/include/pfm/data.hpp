#pragma once

#include <string>
#include <vector>

#include "pfm/rng.hpp"
#include "pfm/tensor.hpp"

namespace pfm {

/// In-memory image classification dataset; pixels raw in [0,1].
struct Dataset {
    Tensor<float> images;  // (N, 3, res, res)
    std::vector<int> labels;
    int classes = 0;

    i64 size() const { return static_cast<i64>(labels.size()); }
    i64 resolution() const { return images.rank() == 4 ? images.dim(2) : 0; }
};

enum class CifarVariant { C10, C100 };

/// Loads the binary distribution of CIFAR-10/100. split is "train" or "test".
/// File sizes are validated exactly; CIFAR-100 uses the fine label byte.
Dataset load_cifar(const std::string& dir, const std::string& split, CifarVariant variant);

/// Class-conditional Gaussian blobs plus per-class frequency gratings with
/// mild noise. Deterministic in the seed; class counts balanced within +-1.
Dataset synthetic_dataset(i64 n, int classes, i64 resolution, std::uint64_t seed);

// Per-channel normalization constants, applied by the training pipeline
// rather than the loader.
extern const float kNormMean[3];
extern const float kNormStd[3];

void normalize_inplace(Tensor<float>& img);

Tensor<float> resize_bilinear(const Tensor<float>& img, i64 out_h, i64 out_w);

/// Reduced augmentation pool: identity, horizontal flip, translate-x/y,
/// rotate, brightness, contrast, cutout. Magnitude scales as m/31.
struct AugmentConfig {
    double prob = 0.5;
    int magnitude = 9;
    int num_ops = 2;
};

void rand_augment(Tensor<float>& img, const AugmentConfig& cfg, Rng& rng);

// Individual transforms, exposed for tests.
void flip_horizontal(Tensor<float>& img);
void translate_image(Tensor<float>& img, double dx, double dy);
void rotate_image(Tensor<float>& img, double radians);
void adjust_brightness(Tensor<float>& img, double factor);
void adjust_contrast(Tensor<float>& img, double factor);
void cutout(Tensor<float>& img, i64 cy, i64 cx, i64 half);

}  // namespace pfm
