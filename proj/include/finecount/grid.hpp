#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "finecount/error.hpp"

namespace finecount {

struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t area() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

std::string to_string(GridShape shape);

// Dense row-major 2-D array with value semantics.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  explicit Grid(GridShape shape, T fill = T{})
      : Grid(shape.rows, shape.cols, fill) {}
  Grid(std::size_t rows, std::size_t cols, std::vector<T> values)
      : shape_{rows, cols}, data_(std::move(values)) {
    if (data_.size() != rows * cols) {
      throw Error(ErrorKind::kInvalidArgument,
                  "grid value count does not match " + std::to_string(rows) +
                      "x" + std::to_string(cols));
    }
  }

  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  GridShape shape() const { return shape_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_.cols + c];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  GridShape shape_;
  std::vector<T> data_;
};

using RealGrid = Grid<double>;
using Mask = Grid<std::uint8_t>;

// 8-bit RGB image stored height x width x 3, row-major.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w)
      : height(h), width(w), pixels(h * w * 3, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

template <typename T>
Grid<T> resize_nearest(const Grid<T>& src, GridShape target) {
  if (src.shape() == target) return src;
  if (src.empty() || target.area() == 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "cannot resize " + to_string(src.shape()) + " to " +
                    to_string(target));
  }
  Grid<T> out(target);
  for (std::size_t r = 0; r < target.rows; ++r) {
    const std::size_t sr = r * src.rows() / target.rows;
    for (std::size_t c = 0; c < target.cols; ++c) {
      out(r, c) = src(sr, c * src.cols() / target.cols);
    }
  }
  return out;
}

}  // namespace finecount
