#pragma once

#include <span>

#include "finecount/grid.hpp"

namespace finecount::plot {

// Minimal raster charts for reports: white background, black axes, no text.
RgbImage bar_chart(std::span<const double> values, std::size_t width = 480,
                   std::size_t height = 320);
RgbImage line_chart(std::span<const double> xs, std::span<const double> ys,
                    std::size_t width = 480, std::size_t height = 320);

}  // namespace finecount::plot
