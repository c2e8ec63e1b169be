#include "finecount/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "finecount/error.hpp"

namespace finecount::plot {
namespace {

constexpr std::size_t kMargin = 24;

struct Canvas {
  RgbImage image;

  Canvas(std::size_t w, std::size_t h) : image(h, w) {
    std::fill(image.pixels.begin(), image.pixels.end(), 255);
    for (std::size_t x = kMargin; x < w - kMargin / 2; ++x) set(x, h - kMargin, 0, 0, 0);
    for (std::size_t y = kMargin / 2; y <= h - kMargin; ++y) set(kMargin, y, 0, 0, 0);
  }

  void set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= long(image.width) || y >= long(image.height)) return;
    image.at(y, x, 0) = r;
    image.at(y, x, 1) = g;
    image.at(y, x, 2) = b;
  }

  void line(long x0, long y0, long x1, long y1) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
      for (long t = -1; t <= 1; ++t) set(x0, y0 + t, 30, 90, 200);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

void check_size(std::size_t width, std::size_t height) {
  if (width < 4 * kMargin || height < 4 * kMargin) {
    throw Error(ErrorKind::kInvalidArgument, "plot canvas too small");
  }
}

}  // namespace

RgbImage bar_chart(std::span<const double> values, std::size_t width, std::size_t height) {
  check_size(width, height);
  Canvas canvas(width, height);
  if (values.empty()) return canvas.image;
  const double top = std::max(1e-12, *std::max_element(values.begin(), values.end()));
  const double plot_w = static_cast<double>(width - 2 * kMargin);
  const double plot_h = static_cast<double>(height - 2 * kMargin);
  const double slot = plot_w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto x0 = static_cast<long>(kMargin + 1 + i * slot + slot * 0.15);
    const auto x1 = static_cast<long>(kMargin + (i + 1) * slot - slot * 0.15);
    const auto bar = static_cast<long>(std::max(0.0, values[i]) / top * plot_h);
    for (long x = x0; x <= x1; ++x) {
      for (long y = long(height - kMargin) - bar; y < long(height - kMargin); ++y) {
        canvas.set(x, y, 30, 90, 200);
      }
    }
  }
  return canvas.image;
}

RgbImage line_chart(std::span<const double> xs, std::span<const double> ys, std::size_t width,
                    std::size_t height) {
  check_size(width, height);
  if (xs.size() != ys.size()) throw Error(ErrorKind::kInvalidArgument, "xs and ys differ in length");
  Canvas canvas(width, height);
  if (xs.empty()) return canvas.image;
  const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
  const double ytop = std::max(1e-12, *std::max_element(ys.begin(), ys.end()));
  const double xr = std::max(1e-12, *xhi - *xlo);
  auto px = [&](double x) {
    return static_cast<long>(kMargin + (x - *xlo) / xr * double(width - 2 * kMargin));
  };
  auto py = [&](double y) {
    return static_cast<long>(double(height - kMargin) - std::max(0.0, y) / ytop * double(height - 2 * kMargin));
  };
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    canvas.line(px(xs[i]), py(ys[i]), px(xs[i + 1]), py(ys[i + 1]));
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (long d = -3; d <= 3; ++d) {
      for (long e = -3; e <= 3; ++e) canvas.set(px(xs[i]) + d, py(ys[i]) + e, 200, 40, 40);
    }
  }
  return canvas.image;
}

}  // namespace finecount::plot
