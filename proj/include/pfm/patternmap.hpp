#pragma once

#include <string>
#include <vector>

#include "pfm/model.hpp"

namespace pfm {

struct PatternMapResult {
    i64 count = 0;
    std::vector<std::string> files;
    std::string manifest;
};

/// Binary PGM (P5, maxval 255), written atomically.
void write_pgm(const std::string& file, i64 width, i64 height,
               const std::vector<unsigned char>& pixels);

/// Exports the graft conv's per-channel activation maps for one image as
/// grayscale PGMs named pattern_<idx>.pgm plus a manifest. Each map is
/// min-max normalized; an all-constant map exports mid-gray 128. When
/// overlay is set, also writes overlay_<idx>.pgm blending the nearest-
/// upsampled map with the grayscale input at the given ratio.
/// Only pattern and flexible-patch graft modes are supported.
PatternMapResult export_pattern_maps(Patternformer<float>& model, const Tensor<float>& image,
                                     const std::string& out_dir, bool overlay = false,
                                     double blend = 0.5);

}  // namespace pfm
