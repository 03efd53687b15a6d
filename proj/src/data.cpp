#include "pfm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace pfm {

const float kNormMean[3] = {0.4914f, 0.4822f, 0.4465f};
const float kNormStd[3] = {0.2470f, 0.2435f, 0.2616f};

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

namespace {

struct CifarFile {
    std::string name;
    i64 records;
};

std::vector<CifarFile> cifar_files(const std::string& split, CifarVariant v) {
    if (split != "train" && split != "test") {
        throw std::invalid_argument("cifar split must be 'train' or 'test', got '" + split + "'");
    }
    if (v == CifarVariant::C10) {
        if (split == "train") {
            std::vector<CifarFile> files;
            for (int i = 1; i <= 5; ++i) {
                files.push_back({"data_batch_" + std::to_string(i) + ".bin", 10000});
            }
            return files;
        }
        return {{"test_batch.bin", 10000}};
    }
    if (split == "train") return {{"train.bin", 50000}};
    return {{"test.bin", 10000}};
}

}  // namespace

Dataset load_cifar(const std::string& dir, const std::string& split, CifarVariant variant) {
    const i64 label_bytes = variant == CifarVariant::C10 ? 1 : 2;  // C100: coarse + fine
    const i64 stride = label_bytes + 3072;
    const auto files = cifar_files(split, variant);
    i64 total = 0;
    for (const auto& f : files) total += f.records;

    Dataset ds;
    ds.classes = variant == CifarVariant::C10 ? 10 : 100;
    ds.images = Tensor<float>(Shape{total, 3, 32, 32});
    ds.labels.reserve(static_cast<std::size_t>(total));

    i64 rec_out = 0;
    std::vector<unsigned char> buf(static_cast<std::size_t>(stride));
    for (const auto& f : files) {
        const std::string path = dir + "/" + f.name;
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cifar file missing: " + path);
        in.seekg(0, std::ios::end);
        const i64 actual = static_cast<i64>(in.tellg());
        const i64 expected = f.records * stride;
        if (actual != expected) {
            throw std::runtime_error("corrupt cifar file " + path + ": expected " +
                                     std::to_string(expected) + " bytes, got " +
                                     std::to_string(actual));
        }
        in.seekg(0, std::ios::beg);
        for (i64 r = 0; r < f.records; ++r, ++rec_out) {
            in.read(reinterpret_cast<char*>(buf.data()), stride);
            // fine label is the last label byte in both variants
            const int label = buf[static_cast<std::size_t>(label_bytes - 1)];
            if (label >= ds.classes) {
                throw std::runtime_error("cifar label " + std::to_string(label) +
                                         " out of range in " + path);
            }
            ds.labels.push_back(label);
            float* img = ds.images.data() + rec_out * 3072;
            for (i64 i = 0; i < 3072; ++i) {
                img[i] = static_cast<float>(buf[static_cast<std::size_t>(label_bytes + i)]) / 255.0f;
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

Dataset synthetic_dataset(i64 n, int classes, i64 resolution, std::uint64_t seed) {
    if (classes <= 0 || n < classes) {
        throw std::invalid_argument("synthetic dataset needs n >= classes > 0");
    }
    Dataset ds;
    ds.classes = classes;
    ds.images = Tensor<float>(Shape{n, 3, resolution, resolution});
    ds.labels.resize(static_cast<std::size_t>(n));
    Rng rng(seed);
    const double res = static_cast<double>(resolution);
    for (i64 i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % classes);
        ds.labels[static_cast<std::size_t>(i)] = c;
        const double angle = 2.0 * 3.141592653589793 * c / classes;
        const double cx = res * (0.5 + 0.27 * std::cos(angle));
        const double cy = res * (0.5 + 0.27 * std::sin(angle));
        const double sigma = res / 8.0;
        const double freq = 1.0 + static_cast<double>(c % 5);
        const double theta = 3.141592653589793 * c / classes;
        const double phase = 2.0 * 3.141592653589793 * (0.37 * c - std::floor(0.37 * c));
        const double jx = rng.normal() * res * 0.01;  // small per-sample jitter
        const double jy = rng.normal() * res * 0.01;
        for (i64 ch = 0; ch < 3; ++ch) {
            const double blob_w = (ch == c % 3) ? 1.0 : 0.35;
            const double grat_w = (ch == (c + 1) % 3) ? 1.0 : 0.4;
            float* plane = ds.images.data() + (i * 3 + ch) * resolution * resolution;
            for (i64 y = 0; y < resolution; ++y) {
                for (i64 x = 0; x < resolution; ++x) {
                    const double dx = static_cast<double>(x) - (cx + jx);
                    const double dy = static_cast<double>(y) - (cy + jy);
                    const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    const double u = (x * std::cos(theta) + y * std::sin(theta)) / res;
                    const double grating =
                        0.5 + 0.5 * std::sin(2.0 * 3.141592653589793 * freq * u + phase);
                    const double noise = rng.uniform() - 0.5;
                    const double v = 0.45 * blob_w * blob + 0.42 * grat_w * grating + 0.08 * noise;
                    plane[y * resolution + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// pixel utilities
// ---------------------------------------------------------------------------

void normalize_inplace(Tensor<float>& img) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw std::invalid_argument("normalize expects (3,H,W)");
    }
    const i64 plane = img.dim(1) * img.dim(2);
    for (i64 c = 0; c < 3; ++c) {
        float* p = img.data() + c * plane;
        const float m = kNormMean[c];
        const float inv = 1.0f / kNormStd[c];
        for (i64 i = 0; i < plane; ++i) p[i] = (p[i] - m) * inv;
    }
}

Tensor<float> resize_bilinear(const Tensor<float>& img, i64 out_h, i64 out_w) {
    const i64 C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<float> out(Shape{C, out_h, out_w});
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (i64 c = 0; c < C; ++c) {
        const float* src = img.data() + c * H * W;
        float* dst = out.data() + c * out_h * out_w;
        for (i64 y = 0; y < out_h; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const i64 y0 = static_cast<i64>(std::floor(fy));
            const double wy = fy - static_cast<double>(y0);
            const i64 ya = std::clamp<i64>(y0, 0, H - 1);
            const i64 yb = std::clamp<i64>(y0 + 1, 0, H - 1);
            for (i64 x = 0; x < out_w; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                const i64 x0 = static_cast<i64>(std::floor(fx));
                const double wx = fx - static_cast<double>(x0);
                const i64 xa = std::clamp<i64>(x0, 0, W - 1);
                const i64 xb = std::clamp<i64>(x0 + 1, 0, W - 1);
                const double top = (1.0 - wx) * src[ya * W + xa] + wx * src[ya * W + xb];
                const double bot = (1.0 - wx) * src[yb * W + xa] + wx * src[yb * W + xb];
                dst[y * out_w + x] = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

void flip_horizontal(Tensor<float>& img) {
    const i64 C = img.dim(0), H = img.dim(1), W = img.dim(2);
    for (i64 c = 0; c < C; ++c) {
        for (i64 y = 0; y < H; ++y) {
            float* row = img.data() + (c * H + y) * W;
            for (i64 x = 0; x < W / 2; ++x) std::swap(row[x], row[W - 1 - x]);
        }
    }
}

namespace {

float sample_bilinear_zero(const float* plane, i64 h, i64 w, double y, double x) {
    const i64 y0 = static_cast<i64>(std::floor(y));
    const i64 x0 = static_cast<i64>(std::floor(x));
    const double wy = y - static_cast<double>(y0);
    const double wx = x - static_cast<double>(x0);
    auto at = [&](i64 yy, i64 xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return plane[yy * w + xx];
    };
    const double top = (1.0 - wx) * at(y0, x0) + wx * at(y0, x0 + 1);
    const double bot = (1.0 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1);
    return static_cast<float>((1.0 - wy) * top + wy * bot);
}

void warp_affine(Tensor<float>& img, double m00, double m01, double m10, double m11, double ty,
                 double tx) {
    // dst(y,x) samples src at m*(y,x - center) + center + t, zero fill
    const i64 C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const double cy = (static_cast<double>(H) - 1.0) / 2.0;
    const double cx = (static_cast<double>(W) - 1.0) / 2.0;
    Tensor<float> src = img;
    for (i64 c = 0; c < C; ++c) {
        const float* sp = src.data() + c * H * W;
        float* dp = img.data() + c * H * W;
        for (i64 y = 0; y < H; ++y) {
            for (i64 x = 0; x < W; ++x) {
                const double ry = static_cast<double>(y) - cy;
                const double rx = static_cast<double>(x) - cx;
                const double sy = m00 * ry + m01 * rx + cy + ty;
                const double sx = m10 * ry + m11 * rx + cx + tx;
                dp[y * W + x] = sample_bilinear_zero(sp, H, W, sy, sx);
            }
        }
    }
}

}  // namespace

void translate_image(Tensor<float>& img, double dx, double dy) {
    warp_affine(img, 1, 0, 0, 1, -dy, -dx);
}

void rotate_image(Tensor<float>& img, double radians) {
    const double c = std::cos(radians);
    const double s = std::sin(radians);
    warp_affine(img, c, -s, s, c, 0, 0);
}

void adjust_brightness(Tensor<float>& img, double factor) {
    for (i64 i = 0; i < img.size(); ++i) {
        img[i] = static_cast<float>(std::clamp(static_cast<double>(img[i]) * factor, 0.0, 1.0));
    }
}

void adjust_contrast(Tensor<float>& img, double factor) {
    double mean = 0;
    for (i64 i = 0; i < img.size(); ++i) mean += img[i];
    mean /= static_cast<double>(img.size());
    for (i64 i = 0; i < img.size(); ++i) {
        img[i] = static_cast<float>(
            std::clamp((static_cast<double>(img[i]) - mean) * factor + mean, 0.0, 1.0));
    }
}

void cutout(Tensor<float>& img, i64 cy, i64 cx, i64 half) {
    const i64 C = img.dim(0), H = img.dim(1), W = img.dim(2);
    for (i64 c = 0; c < C; ++c) {
        for (i64 y = std::max<i64>(0, cy - half); y < std::min<i64>(H, cy + half + 1); ++y) {
            for (i64 x = std::max<i64>(0, cx - half); x < std::min<i64>(W, cx + half + 1); ++x) {
                img[(c * H + y) * W + x] = 0.5f;
            }
        }
    }
}

void rand_augment(Tensor<float>& img, const AugmentConfig& cfg, Rng& rng) {
    const double m = static_cast<double>(cfg.magnitude) / 31.0;
    const i64 H = img.dim(1), W = img.dim(2);
    for (int op = 0; op < cfg.num_ops; ++op) {
        const i64 pick = rng.uniform_int(8);
        const bool apply = rng.uniform() < cfg.prob;
        // draw op randomness unconditionally so the stream stays aligned
        const double r1 = rng.uniform(-1.0, 1.0);
        const i64 ry = rng.uniform_int(H);
        const i64 rx = rng.uniform_int(W);
        if (!apply) continue;
        switch (pick) {
            case 0: break;  // identity
            case 1: flip_horizontal(img); break;
            case 2: translate_image(img, r1 * m * 0.45 * static_cast<double>(W), 0.0); break;
            case 3: translate_image(img, 0.0, r1 * m * 0.45 * static_cast<double>(H)); break;
            case 4: rotate_image(img, r1 * m * (30.0 * 3.141592653589793 / 180.0)); break;
            case 5: adjust_brightness(img, 1.0 + r1 * 0.9 * m); break;
            case 6: adjust_contrast(img, 1.0 + r1 * 0.9 * m); break;
            case 7: cutout(img, ry, rx, static_cast<i64>(m * 0.25 * static_cast<double>(W))); break;
            default: break;
        }
    }
}

}  // namespace pfm
