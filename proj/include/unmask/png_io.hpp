#pragma once

#include <string>

#include "unmask/core.hpp"

namespace unmask {

// 8-bit RGB PNG -> display-range image with values k/255.
Image read_image_png(const std::string& path);

// Display-range image -> 8-bit RGB PNG (values rounded to k/255; inputs that
// are already k/255 round trip bit-exactly).
void write_image_png(const Image& img, const std::string& path);

// Grayscale (any depth) or palette PNG -> binary mask; nonzero means masked.
Mask read_mask_png(const std::string& path);

// Binary mask -> 1-bit grayscale PNG.
void write_mask_png(const Mask& m, const std::string& path);

}  // namespace unmask
