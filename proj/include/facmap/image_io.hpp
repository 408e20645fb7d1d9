#pragma once

#include <filesystem>

#include "facmap/camera.hpp"

namespace facmap::io {

// 8- or 16-bit gray/RGB/RGBA PNG as a 3-channel image in [0, 1].
Image read_png_rgb(const std::filesystem::path& path);
// 16-bit single-channel PNG divided by `scale` (1000 = millimeters to meters);
// zero stays zero (invalid).
Image read_png_depth(const std::filesystem::path& path, double scale = 1000.0);

// 8-bit RGB, values clamped to [0, 1].
void write_png_rgb(const std::filesystem::path& path, const Image& rgb);
// 16-bit depth, meters times `scale`, rounded and clamped to [0, 65535].
void write_png_depth(const std::filesystem::path& path, const Image& depth, double scale = 1000.0);

}  // namespace facmap::io
