#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "finecount/kernels.hpp"

namespace finecount::kernels {

namespace detail {
double bce_term(double p, std::uint8_t t, double eps);
double bce_derivative(double p, std::uint8_t t, double eps);
void bilinear_row(std::span<const double> src, GridShape src_shape,
                  std::span<double> dst, GridShape dst_shape, std::size_t y);
}  // namespace detail

namespace {

std::size_t chunk_count(std::size_t n) {
  return (n + kReduceChunk - 1) / kReduceChunk;
}

// Sums chunk_fn(begin, end) over the fixed chunk partition of [0, n) and
// folds the partials in chunk order.
template <typename ChunkFn>
double chunked_sum(std::size_t n, ChunkFn chunk_fn) {
  const std::size_t chunks = chunk_count(n);
  std::vector<double> partial(chunks, 0.0);
  const auto count = static_cast<std::ptrdiff_t>(chunks);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < count; ++k) {
    const std::size_t begin = static_cast<std::size_t>(k) * kReduceChunk;
    partial[k] = chunk_fn(begin, std::min(n, begin + kReduceChunk));
  }
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc;
}

}  // namespace

namespace parallel {

void mean_of_slices(std::span<const float> stack,
                    std::span<const std::size_t> slices, std::size_t slice_len,
                    std::span<double> out) {
  const auto count = static_cast<double>(slices.size());
  const auto n = static_cast<std::ptrdiff_t>(slice_len);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k : slices) acc += stack[k * slice_len + i];
    out[i] = acc / count;
  }
}

std::pair<double, double> min_max(std::span<const double> values) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  const auto n = static_cast<std::ptrdiff_t>(values.size());
#pragma omp parallel for schedule(static) reduction(min : lo) reduction(max : hi)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  return {lo, hi};
}

void normalize_min_max(std::span<const double> in, std::span<double> out) {
  const auto [lo, hi] = min_max(in);
  const double range = hi - lo;
  const auto n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out[i] = range > 0.0 ? (in[i] - lo) / range : 0.0;
  }
}

double sum(std::span<const double> values) {
  return chunked_sum(values.size(), [&](std::size_t b, std::size_t e) {
    double acc = 0.0;
    for (std::size_t i = b; i < e; ++i) acc += values[i];
    return acc;
  });
}

double bce_sum(std::span<const double> pred,
               std::span<const std::uint8_t> target, double eps) {
  return chunked_sum(pred.size(), [&](std::size_t b, std::size_t e) {
    double acc = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      acc += detail::bce_term(pred[i], target.empty() ? 0 : target[i], eps);
    }
    return acc;
  });
}

void bce_grad(std::span<const double> pred,
              std::span<const std::uint8_t> target, double eps, double scale,
              std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(pred.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out[i] = scale * detail::bce_derivative(
                         pred[i], target.empty() ? 0 : target[i], eps);
  }
}

double multiply_sum(std::span<const double> a, std::span<const double> b,
                    std::span<double> out) {
  return chunked_sum(a.size(), [&](std::size_t begin, std::size_t end) {
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = a[i] * b[i];
      acc += out[i];
    }
    return acc;
  });
}

void resize_bilinear(std::span<const double> src, GridShape src_shape,
                     std::span<double> dst, GridShape dst_shape) {
  const auto rows = static_cast<std::ptrdiff_t>(dst_shape.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t y = 0; y < rows; ++y) {
    detail::bilinear_row(src, src_shape, dst, dst_shape, static_cast<std::size_t>(y));
  }
}

void channel_dot(std::span<const double> features, std::size_t channels,
                 std::span<const double> weights, std::span<double> out) {
  const std::size_t n = out.size();
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t q = 0; q < count; ++q) {
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
    const auto row = features.subspan(c * n, n);
    out[c] = chunked_sum(n, [&](std::size_t b, std::size_t e) {
      double acc = 0.0;
      for (std::size_t q = b; q < e; ++q) acc += row[q] * upstream[q];
      return acc;
    });
  }
}

}  // namespace parallel

int set_max_threads(int threads) {
  const int previous = omp_get_max_threads();
  if (threads > 0) omp_set_num_threads(threads);
  return previous;
}

RealGrid resize_bilinear(const RealGrid& src, GridShape target) {
  if (src.empty() || target.area() == 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "cannot resize " + to_string(src.shape()) + " to " + to_string(target));
  }
  if (src.shape() == target) return src;
  RealGrid out(target);
  parallel::resize_bilinear(src.values(), src.shape(), out.values(), target);
  return out;
}

}  // namespace finecount::kernels
