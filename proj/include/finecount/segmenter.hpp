#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "finecount/grid.hpp"

namespace finecount {

inline constexpr std::size_t kEmbeddingDim = 512;
using EmbeddingVector = std::array<double, kEmbeddingDim>;

// Encoded image features, channel-major: values[(c * rows + r) * cols + col].
struct FeatureField {
  std::size_t channels = 0;
  GridShape grid;
  std::vector<double> values;

  FeatureField() = default;
  FeatureField(std::size_t channels_, GridShape grid_)
      : channels(channels_), grid(grid_), values(channels_ * grid_.area(), 0.0) {}

  double& at(std::size_t c, std::size_t r, std::size_t col) {
    return values[(c * grid.rows + r) * grid.cols + col];
  }
  double at(std::size_t c, std::size_t r, std::size_t col) const {
    return values[(c * grid.rows + r) * grid.cols + col];
  }

  friend bool operator==(const FeatureField&, const FeatureField&) = default;
};

// Frozen conditional segmenter: image features plus a conditioning vector
// yield a relevance map in [0, 1] at the feature grid resolution. All
// methods are const and must be safe to call concurrently.
class SegmenterBackend {
 public:
  virtual ~SegmenterBackend() = default;

  virtual std::string id() const = 0;
  virtual FeatureField encode_image(const RgbImage& image) const = 0;
  virtual EmbeddingVector text_embed(std::string_view name) const = 0;
  virtual RealGrid decode(const FeatureField& features, const EmbeddingVector& z) const = 0;

  virtual bool has_gradient() const = 0;
  // Gradient with respect to z of sum(upstream (.) decode(features, z)).
  virtual EmbeddingVector decode_vjp(const FeatureField& features, const EmbeddingVector& z,
                                     const RealGrid& upstream) const = 0;

  // Hash over every model parameter; must not change during tuning.
  virtual std::uint64_t parameter_checksum() const = 0;
};

struct ToySegmenterOptions {
  std::size_t patch = 4;
  std::uint64_t seed = 7;
  double logit_scale = 16.0;
  // Hue spread of each pixel over the bins; wider makes similar hues overlap.
  double hue_sigma_deg = 20.0;
};

// Differentiable stand-in for a vision-language segmenter. Each patch is
// encoded as a soft hue histogram: every pixel spreads its chroma
// (max - min of RGB, in [0, 1]) over 12 hue bins with a Gaussian around its
// hue, the result is averaged over the patch, and a constant 1 channel is appended.
// Grey pixels contribute nothing and brightness only scales the features.
// The decoder is bilinear in the features and the conditioning vector:
//   pred(q) = sigmoid(logit_scale * f(q)^T W z)
// with a fixed random projection W (channels x 512). Text embeddings are
// unit-length random vectors seeded by the category name.
class ToySegmenter : public SegmenterBackend {
 public:
  static constexpr std::size_t kHueBins = 12;
  static constexpr std::size_t kChannels = kHueBins + 1;

  explicit ToySegmenter(ToySegmenterOptions options = {});

  std::string id() const override { return "toy"; }
  FeatureField encode_image(const RgbImage& image) const override;
  EmbeddingVector text_embed(std::string_view name) const override;
  RealGrid decode(const FeatureField& features, const EmbeddingVector& z) const override;
  bool has_gradient() const override { return true; }
  EmbeddingVector decode_vjp(const FeatureField& features, const EmbeddingVector& z,
                             const RealGrid& upstream) const override;
  std::uint64_t parameter_checksum() const override;

  const ToySegmenterOptions& options() const { return options_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  std::array<double, kChannels> project(const EmbeddingVector& z) const;
  RealGrid logits(const FeatureField& features, const EmbeddingVector& z) const;

  ToySegmenterOptions options_;
  std::vector<double> weights_;  // kChannels x kEmbeddingDim
};

}  // namespace finecount
