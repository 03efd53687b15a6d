#include "pfm/patternmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pfm/data.hpp"

namespace pfm {

void write_pgm(const std::string& file, i64 width, i64 height,
               const std::vector<unsigned char>& pixels) {
    if (static_cast<i64>(pixels.size()) != width * height) {
        throw std::invalid_argument("pgm pixel count does not match dimensions");
    }
    const std::string tmp = file + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        os << "P5\n" << width << " " << height << "\n255\n";
        os.write(reinterpret_cast<const char*>(pixels.data()),
                 static_cast<std::streamsize>(pixels.size()));
        if (!os) throw std::runtime_error("short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), file.c_str()) != 0) {
        throw std::runtime_error("cannot rename '" + tmp + "' to '" + file + "'");
    }
}

PatternMapResult export_pattern_maps(Patternformer<float>& model, const Tensor<float>& image,
                                     const std::string& out_dir, bool overlay, double blend) {
    if (model.config.graft == GraftMode::TransposePatch) {
        throw std::invalid_argument(
            "unsupported graft mode for pattern export: transpose-patch tokens are spatial "
            "positions, not channel maps");
    }
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("pattern export expects one (3,H,W) image");
    }
    const i64 H = image.dim(1), W = image.dim(2);

    Tensor<float> normed = image;
    normalize_inplace(normed);
    Tensor<float> batch(Shape{1, 3, H, W}, normed.vec());

    Tape<float> tape;
    Rng rng(0);
    Var<float> x1 = model.tokenizer.forward(tape, tape.input(batch), /*training=*/false);
    Var<float> maps = model.graft.conv.forward(tape, x1);  // (1, M, H', W')
    const i64 M = maps.shape()[1];
    const i64 mh = maps.shape()[2];
    const i64 mw = maps.shape()[3];

    PatternMapResult result;
    result.count = M;
    char line[256];
    std::snprintf(line, sizeof(line),
                  "pattern maps: count=%lld map_size=%lldx%lld overlay_blend=%.3f\n",
                  static_cast<long long>(M), static_cast<long long>(mh),
                  static_cast<long long>(mw), blend);
    result.manifest = line;

    std::vector<unsigned char> pixels(static_cast<std::size_t>(mh * mw));
    for (i64 m = 0; m < M; ++m) {
        const float* plane = maps.value().data() + m * mh * mw;
        float lo = plane[0], hi = plane[0];
        for (i64 i = 1; i < mh * mw; ++i) {
            lo = std::min(lo, plane[i]);
            hi = std::max(hi, plane[i]);
        }
        if (hi > lo) {
            const float scale = 255.0f / (hi - lo);
            for (i64 i = 0; i < mh * mw; ++i) {
                pixels[static_cast<std::size_t>(i)] =
                    static_cast<unsigned char>(std::lround((plane[i] - lo) * scale));
            }
        } else {
            std::fill(pixels.begin(), pixels.end(), static_cast<unsigned char>(128));
        }
        const std::string name = "pattern_" + std::to_string(m) + ".pgm";
        write_pgm(out_dir + "/" + name, mw, mh, pixels);
        result.files.push_back(name);
        std::snprintf(line, sizeof(line), "%lld %s min=%.6g max=%.6g\n",
                      static_cast<long long>(m), name.c_str(), static_cast<double>(lo),
                      static_cast<double>(hi));
        result.manifest += line;

        if (overlay) {
            std::vector<unsigned char> over(static_cast<std::size_t>(H * W));
            for (i64 y = 0; y < H; ++y) {
                const i64 my = std::min<i64>(y * mh / H, mh - 1);
                for (i64 x = 0; x < W; ++x) {
                    const i64 mx = std::min<i64>(x * mw / W, mw - 1);
                    const double heat = pixels[static_cast<std::size_t>(my * mw + mx)];
                    const double gray =
                        255.0 / 3.0 *
                        (image.at({0, y, x}) + image.at({1, y, x}) + image.at({2, y, x}));
                    const double v = blend * heat + (1.0 - blend) * gray;
                    over[static_cast<std::size_t>(y * W + x)] =
                        static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
                }
            }
            const std::string oname = "overlay_" + std::to_string(m) + ".pgm";
            write_pgm(out_dir + "/" + oname, W, H, over);
            result.files.push_back(oname);
        }
    }
    {
        const std::string mpath = out_dir + "/manifest.txt";
        const std::string tmp = mpath + ".tmp";
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        os << result.manifest;
        os.close();
        if (std::rename(tmp.c_str(), mpath.c_str()) != 0) {
            throw std::runtime_error("cannot rename '" + tmp + "'");
        }
    }
    return result;
}

}  // namespace pfm
