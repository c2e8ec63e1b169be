#pragma once

// Data-parallel inner loops shared by the pipeline stages.
//
// Every kernel has a straightforward serial implementation (kept as the
// reference the tests compare against) and an OpenMP implementation used by
// the library. Reductions in the parallel versions are computed over a fixed
// chunk partition and combined in chunk order, so results do not depend on
// the thread count.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

#include "finecount/grid.hpp"

namespace finecount::kernels {

// Elements per reduction chunk in the parallel kernels.
inline constexpr std::size_t kReduceChunk = 2048;

namespace serial {

// out[i] = mean over k of stack[slices[k] * slice_len + i]
void mean_of_slices(std::span<const float> stack,
                    std::span<const std::size_t> slices, std::size_t slice_len,
                    std::span<double> out);
std::pair<double, double> min_max(std::span<const double> values);
// (x - min) / (max - min); all zeros when max == min.
void normalize_min_max(std::span<const double> in, std::span<double> out);
double sum(std::span<const double> values);
// Sum of per-element binary cross-entropy with p clamped to [eps, 1 - eps].
// An empty target means all zeros.
double bce_sum(std::span<const double> pred,
               std::span<const std::uint8_t> target, double eps);
// out[i] = scale * d bce(pred[i], target[i]) / d pred[i]; zero where clamped.
void bce_grad(std::span<const double> pred,
              std::span<const std::uint8_t> target, double eps, double scale,
              std::span<double> out);
// out = a (.) b; returns sum(out).
double multiply_sum(std::span<const double> a, std::span<const double> b,
                    std::span<double> out);
// Half-pixel-centre bilinear resampling with edge clamping.
void resize_bilinear(std::span<const double> src, GridShape src_shape,
                     std::span<double> dst, GridShape dst_shape);
// features is channels x n; out[q] = sum_c features[c * n + q] * weights[c].
void channel_dot(std::span<const double> features, std::size_t channels,
                 std::span<const double> weights, std::span<double> out);
// out[c] = sum_q features[c * n + q] * upstream[q].
void channel_accumulate(std::span<const double> features, std::size_t channels,
                        std::span<const double> upstream,
                        std::span<double> out);

}  // namespace serial

namespace parallel {

// out[i] = mean over k of stack[slices[k] * slice_len + i]
void mean_of_slices(std::span<const float> stack,
                    std::span<const std::size_t> slices, std::size_t slice_len,
                    std::span<double> out);
std::pair<double, double> min_max(std::span<const double> values);
// (x - min) / (max - min); all zeros when max == min.
void normalize_min_max(std::span<const double> in, std::span<double> out);
double sum(std::span<const double> values);
// Sum of per-element binary cross-entropy with p clamped to [eps, 1 - eps].
// An empty target means all zeros.
double bce_sum(std::span<const double> pred,
               std::span<const std::uint8_t> target, double eps);
// out[i] = scale * d bce(pred[i], target[i]) / d pred[i]; zero where clamped.
void bce_grad(std::span<const double> pred,
              std::span<const std::uint8_t> target, double eps, double scale,
              std::span<double> out);
// out = a (.) b; returns sum(out).
double multiply_sum(std::span<const double> a, std::span<const double> b,
                    std::span<double> out);
// Half-pixel-centre bilinear resampling with edge clamping.
void resize_bilinear(std::span<const double> src, GridShape src_shape,
                     std::span<double> dst, GridShape dst_shape);
// features is channels x n; out[q] = sum_c features[c * n + q] * weights[c].
void channel_dot(std::span<const double> features, std::size_t channels,
                 std::span<const double> weights, std::span<double> out);
// out[c] = sum_q features[c * n + q] * upstream[q].
void channel_accumulate(std::span<const double> features, std::size_t channels,
                        std::span<const double> upstream,
                        std::span<double> out);

}  // namespace parallel

// Sets the OpenMP thread count used by parallel kernels; 0 keeps the runtime
// default. Returns the previous setting.
int set_max_threads(int threads);

RealGrid resize_bilinear(const RealGrid& src, GridShape target);

}  // namespace finecount::kernels
