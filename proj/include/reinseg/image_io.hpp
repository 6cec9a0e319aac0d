#pragma once

#include "reinseg/types.hpp"

#include <string>

namespace reinseg {

/// Reads an 8-bit PNG as planar RGB in [0,1]. Gray and paletted files are
/// expanded, alpha is dropped, 16-bit depth is narrowed. Throws IoError.
Image read_image_png(const std::string& path);

/// Reads a mask PNG: any pixel with a nonzero channel maps to foreground.
MaskArray read_mask_png(const std::string& path);

/// Writes an 8-bit RGB PNG; channel values are clamped to [0,1] and rounded.
/// Output bytes are deterministic for identical pixel data.
void write_image_png(const std::string& path, const Image& img);

/// Writes an 8-bit grayscale PNG with foreground = 255, background = 0.
void write_mask_png(const std::string& path, const MaskArray& mask);

}  // namespace reinseg
