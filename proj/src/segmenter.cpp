#include "finecount/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"
#include "finecount/kernels.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ToySegmenter::ToySegmenter(ToySegmenterOptions options)
    : options_(options), weights_(kChannels * kEmbeddingDim) {
  if (options_.patch == 0) throw Error(ErrorKind::kInvalidArgument, "patch size must be > 0");
  if (!(options_.hue_sigma_deg > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "hue_sigma_deg must be > 0");
  }
  std::mt19937_64 rng(mix_seed(options_.seed, "toy-segmenter-weights"));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(kEmbeddingDim)));
  for (auto& w : weights_) w = normal(rng);
}

namespace {

// Spreads a pixel's chroma over the hue bins with a circular Gaussian of
// width sigma_deg around its hue; weights sum to the chroma.
void hue_histogram(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8, double sigma_deg,
                   std::array<double, ToySegmenter::kHueBins>& bins) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double hi = std::max({r, g, b}), lo = std::min({r, g, b});
  const double chroma = hi - lo;
  if (chroma <= 0.0) return;
  double hue;  // degrees
  if (hi == r) hue = 60.0 * std::fmod((g - b) / chroma + 6.0, 6.0);
  else if (hi == g) hue = 60.0 * ((b - r) / chroma + 2.0);
  else hue = 60.0 * ((r - g) / chroma + 4.0);
  constexpr double kBinWidth = 360.0 / static_cast<double>(ToySegmenter::kHueBins);
  std::array<double, ToySegmenter::kHueBins> w{};
  double total = 0.0;
  for (std::size_t k = 0; k < ToySegmenter::kHueBins; ++k) {
    double d = std::fabs(hue - kBinWidth * static_cast<double>(k));
    d = std::min(d, 360.0 - d);
    w[k] = std::exp(-0.5 * (d / sigma_deg) * (d / sigma_deg));
    total += w[k];
  }
  for (std::size_t k = 0; k < ToySegmenter::kHueBins; ++k) bins[k] += chroma * w[k] / total;
}

}  // namespace

FeatureField ToySegmenter::encode_image(const RgbImage& image) const {
  if (image.empty()) throw Error(ErrorKind::kInvalidArgument, "cannot encode an empty image");
  const std::size_t p = options_.patch;
  const GridShape grid{(image.height + p - 1) / p, (image.width + p - 1) / p};
  FeatureField f(kChannels, grid);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      std::array<double, kHueBins> bins{};
      std::size_t n = 0;
      for (std::size_t y = r * p; y < std::min(image.height, (r + 1) * p); ++y) {
        for (std::size_t x = c * p; x < std::min(image.width, (c + 1) * p); ++x) {
          hue_histogram(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2),
                        options_.hue_sigma_deg, bins);
          ++n;
        }
      }
      for (std::size_t k = 0; k < kHueBins; ++k) f.at(k, r, c) = bins[k] / static_cast<double>(n);
      f.at(kHueBins, r, c) = 1.0;
    }
  }
  return f;
}

EmbeddingVector ToySegmenter::text_embed(std::string_view name) const {
  std::mt19937_64 rng(mix_seed(options_.seed, normalize_category_key(name)));
  std::normal_distribution<double> normal(0.0, 1.0);
  EmbeddingVector z{};
  double norm = 0.0;
  for (auto& v : z) {
    v = normal(rng);
    norm += v * v;
  }
  // Unit length, like CLIP text embeddings.
  norm = std::sqrt(norm);
  for (auto& v : z) v /= norm;
  return z;
}

std::array<double, ToySegmenter::kChannels> ToySegmenter::project(const EmbeddingVector& z) const {
  std::array<double, kChannels> u{};
  for (std::size_t c = 0; c < kChannels; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < kEmbeddingDim; ++j) acc += weights_[c * kEmbeddingDim + j] * z[j];
    u[c] = options_.logit_scale * acc;
  }
  return u;
}

RealGrid ToySegmenter::logits(const FeatureField& features, const EmbeddingVector& z) const {
  if (features.channels != kChannels) {
    throw Error(ErrorKind::kInvalidArgument, "toy segmenter expects " + std::to_string(kChannels) + " feature channels");
  }
  const auto u = project(z);
  RealGrid out(features.grid);
  kernels::parallel::channel_dot(features.values, kChannels, u, out.values());
  return out;
}

RealGrid ToySegmenter::decode(const FeatureField& features, const EmbeddingVector& z) const {
  RealGrid out = logits(features, z);
  for (double& v : out.values()) v = sigmoid(v);
  return out;
}

EmbeddingVector ToySegmenter::decode_vjp(const FeatureField& features, const EmbeddingVector& z,
                                         const RealGrid& upstream) const {
  if (upstream.shape() != features.grid) {
    throw Error(ErrorKind::kInvalidArgument, "upstream gradient shape does not match features");
  }
  RealGrid local = logits(features, z);
  for (std::size_t q = 0; q < local.size(); ++q) {
    const double s = sigmoid(local.values()[q]);
    local.values()[q] = upstream.values()[q] * s * (1.0 - s);
  }
  std::array<double, kChannels> a{};
  kernels::parallel::channel_accumulate(features.values, kChannels, local.values(), a);
  EmbeddingVector grad{};
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double ac = options_.logit_scale * a[c];
    for (std::size_t j = 0; j < kEmbeddingDim; ++j) grad[j] += weights_[c * kEmbeddingDim + j] * ac;
  }
  return grad;
}

std::uint64_t ToySegmenter::parameter_checksum() const {
  const auto* bytes = reinterpret_cast<const unsigned char*>(weights_.data());
  std::uint64_t h = fnv1a(std::span(bytes, weights_.size() * sizeof(double)));
  const double scalars[] = {options_.logit_scale, options_.hue_sigma_deg,
                            static_cast<double>(options_.patch)};
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(scalars), sizeof(scalars)), h);
}

}  // namespace finecount
