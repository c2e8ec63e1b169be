// Serial reference vs OpenMP kernels on pipeline-sized inputs.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "finecount/kernels.hpp"

namespace k = finecount::kernels;

namespace {

std::vector<double> uniform(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

std::vector<std::uint8_t> bits(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = static_cast<std::uint8_t>(rng() & 1);
  return v;
}

// Attention averaging: 16 layers x 8 heads x 77 tokens x 64x64 patches.
template <bool Parallel>
void BM_MeanOfSlices(benchmark::State& state) {
  const std::size_t slice = 77 * static_cast<std::size_t>(state.range(0));
  const std::size_t n_slices = 16 * 8;
  std::vector<float> stack(slice * n_slices);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& x : stack) x = u(rng);
  std::vector<std::size_t> idx;
  for (std::size_t s = 3 * 8; s < 6 * 8; ++s) idx.push_back(s);
  std::vector<double> out(slice);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::mean_of_slices(stack, idx, slice, out);
    } else {
      k::serial::mean_of_slices(stack, idx, slice, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetBytesProcessed(static_cast<int64_t>(state.iterations() * idx.size() * slice * sizeof(float)));
}

template <bool Parallel>
void BM_BceSum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto pred = uniform(n, 2);
  const auto target = bits(n, 3);
  for (auto _ : state) {
    double s = Parallel ? k::parallel::bce_sum(pred, target, 1e-7) : k::serial::bce_sum(pred, target, 1e-7);
    benchmark::DoNotOptimize(s);
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n));
}

template <bool Parallel>
void BM_MultiplySum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = uniform(n, 4), b = uniform(n, 5);
  std::vector<double> out(n);
  for (auto _ : state) {
    double s = Parallel ? k::parallel::multiply_sum(a, b, out) : k::serial::multiply_sum(a, b, out);
    benchmark::DoNotOptimize(s);
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n));
}

// Mask upsampling from the segmenter grid to image size.
template <bool Parallel>
void BM_ResizeBilinear(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const finecount::GridShape src{side / 8, side / 8}, dst{side, side};
  const auto in = uniform(src.area(), 6);
  std::vector<double> out(dst.area());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::resize_bilinear(in, src, out, dst);
    } else {
      k::serial::resize_bilinear(in, src, out, dst);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * dst.area()));
}

template <bool Parallel>
void BM_ChannelDot(benchmark::State& state) {
  const std::size_t channels = 13;
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto features = uniform(channels * n, 7);
  const auto weights = uniform(channels, 8);
  std::vector<double> out(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::channel_dot(features, channels, weights, out);
    } else {
      k::serial::channel_dot(features, channels, weights, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * channels * n));
}

}  // namespace

BENCHMARK(BM_MeanOfSlices<false>)->Name("mean_of_slices/serial")->Arg(1024)->Arg(4096);
BENCHMARK(BM_MeanOfSlices<true>)->Name("mean_of_slices/parallel")->Arg(1024)->Arg(4096);
BENCHMARK(BM_BceSum<false>)->Name("bce_sum/serial")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_BceSum<true>)->Name("bce_sum/parallel")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_MultiplySum<false>)->Name("multiply_sum/serial")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_MultiplySum<true>)->Name("multiply_sum/parallel")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_ResizeBilinear<false>)->Name("resize_bilinear/serial")->Arg(512)->Arg(1024);
BENCHMARK(BM_ResizeBilinear<true>)->Name("resize_bilinear/parallel")->Arg(512)->Arg(1024);
BENCHMARK(BM_ChannelDot<false>)->Name("channel_dot/serial")->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_ChannelDot<true>)->Name("channel_dot/parallel")->Arg(1 << 12)->Arg(1 << 16);

BENCHMARK_MAIN();
