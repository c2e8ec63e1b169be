#pragma once

#include <filesystem>

#include "finecount/grid.hpp"

namespace finecount {

// PNG and baseline JPEG are supported; the format is chosen by file signature.
RgbImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

// Reads only the header. Returns {rows = height, cols = width}.
GridShape image_dimensions(const std::filesystem::path& path);

}  // namespace finecount
