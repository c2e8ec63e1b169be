#include <algorithm>
#include <cmath>

#include "finecount/kernels.hpp"

namespace finecount::kernels {

namespace detail {

double bce_term(double p, std::uint8_t t, double eps) {
  const double q = std::clamp(p, eps, 1.0 - eps);
  return t ? -std::log(q) : -std::log1p(-q);
}

double bce_derivative(double p, std::uint8_t t, double eps) {
  if (p < eps || p > 1.0 - eps) return 0.0;
  return t ? -1.0 / p : 1.0 / (1.0 - p);
}

void bilinear_row(std::span<const double> src, GridShape src_shape,
                  std::span<double> dst, GridShape dst_shape, std::size_t y) {
  const double sy_scale = static_cast<double>(src_shape.rows) / dst_shape.rows;
  const double sx_scale = static_cast<double>(src_shape.cols) / dst_shape.cols;
  const double max_y = static_cast<double>(src_shape.rows - 1);
  const double max_x = static_cast<double>(src_shape.cols - 1);
  const double sy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, max_y);
  const auto y0 = static_cast<std::size_t>(sy);
  const std::size_t y1 = std::min(y0 + 1, src_shape.rows - 1);
  const double wy = sy - y0;
  for (std::size_t x = 0; x < dst_shape.cols; ++x) {
    const double sx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, max_x);
    const auto x0 = static_cast<std::size_t>(sx);
    const std::size_t x1 = std::min(x0 + 1, src_shape.cols - 1);
    const double wx = sx - x0;
    const double top = src[y0 * src_shape.cols + x0] * (1 - wx) +
                       src[y0 * src_shape.cols + x1] * wx;
    const double bottom = src[y1 * src_shape.cols + x0] * (1 - wx) +
                          src[y1 * src_shape.cols + x1] * wx;
    dst[y * dst_shape.cols + x] = top * (1 - wy) + bottom * wy;
  }
}

}  // namespace detail

namespace serial {

void mean_of_slices(std::span<const float> stack,
                    std::span<const std::size_t> slices, std::size_t slice_len,
                    std::span<double> out) {
  for (std::size_t i = 0; i < slice_len; ++i) {
    double acc = 0.0;
    for (std::size_t k : slices) acc += stack[k * slice_len + i];
    out[i] = acc / static_cast<double>(slices.size());
  }
}

std::pair<double, double> min_max(std::span<const double> values) {
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {*lo, *hi};
}

void normalize_min_max(std::span<const double> in, std::span<double> out) {
  const auto [lo, hi] = min_max(in);
  const double range = hi - lo;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = range > 0.0 ? (in[i] - lo) / range : 0.0;
  }
}

double sum(std::span<const double> values) {
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc;
}

double bce_sum(std::span<const double> pred,
               std::span<const std::uint8_t> target, double eps) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    acc += detail::bce_term(pred[i], target.empty() ? 0 : target[i], eps);
  }
  return acc;
}

void bce_grad(std::span<const double> pred,
              std::span<const std::uint8_t> target, double eps, double scale,
              std::span<double> out) {
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out[i] = scale * detail::bce_derivative(
                         pred[i], target.empty() ? 0 : target[i], eps);
  }
}

double multiply_sum(std::span<const double> a, std::span<const double> b,
                    std::span<double> out) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = a[i] * b[i];
    acc += out[i];
  }
  return acc;
}

void resize_bilinear(std::span<const double> src, GridShape src_shape,
                     std::span<double> dst, GridShape dst_shape) {
  for (std::size_t y = 0; y < dst_shape.rows; ++y) {
    detail::bilinear_row(src, src_shape, dst, dst_shape, y);
  }
}

void channel_dot(std::span<const double> features, std::size_t channels,
                 std::span<const double> weights, std::span<double> out) {
  const std::size_t n = out.size();
  for (std::size_t q = 0; q < n; ++q) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) acc += features[c * n + q] * weights[c];
    out[q] = acc;
  }
}

void channel_accumulate(std::span<const double> features, std::size_t channels,
                        std::span<const double> upstream,
                        std::span<double> out) {
  const std::size_t n = upstream.size();
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t q = 0; q < n; ++q) acc += features[c * n + q] * upstream[q];
    out[c] = acc;
  }
}

}  // namespace serial
}  // namespace finecount::kernels
