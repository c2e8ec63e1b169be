#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "finecount/grid.hpp"
#include "finecount/segmenter.hpp"
#include "finecount/synthesis.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

inline constexpr double kBceEpsilon = 1e-7;

enum class ConceptInit { kTextEncoder, kRandom };

std::string_view to_string(ConceptInit init);
ConceptInit concept_init_from_string(std::string_view text);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double sharpness = 0.0;
  double lr = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct ConceptEmbedding {
  std::string category;
  ConceptInit init = ConceptInit::kTextEncoder;
  EmbeddingVector z{};
  std::vector<EpochRecord> history;
  std::size_t selected_epoch = 0;
  double initial_val_loss = 0.0;
};

struct TuningConfig {
  int epochs = 50;
  double lr = 5e-3;
  double plateau_factor = 0.9;
  int plateau_patience = 10;
  double val_fraction = 0.2;
  double bin_threshold = kDefaultBinThreshold;
  int sharpness_k = 8;
  // Perturbation scale; <= 0 selects 1e-2 * ||z|| / sqrt(512).
  double sharpness_sigma = 0.0;
  // Fraction of epochs (lowest sharpness first) eligible for selection.
  double select_fraction = 0.2;
  double cutmix_prob = 0.5;
  double downscale_prob = 0.5;
  double weight_decay = 0.01;
  // 0 means one full-dataset batch per epoch.
  std::size_t batch_size = 0;
  ConceptInit init = ConceptInit::kTextEncoder;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TuningConfig& cfg);
void from_json(const nlohmann::json& j, TuningConfig& cfg);

// Mean binary cross-entropy; target is nearest-neighbour resized to pred's
// grid when the shapes differ.
double positive_loss(const RealGrid& pred, const Mask& target);
// positive_loss against an all-zero target.
double negative_loss(const RealGrid& pred);

struct LossTerm {
  const RealGrid* pred = nullptr;
  const Mask* target = nullptr;  // ignored for negatives
  Polarity polarity = Polarity::kPositive;
};

// Mean positive loss over positive terms plus mean negative loss over
// negative terms; a polarity with no terms contributes 0.
double concept_loss(std::span<const LossTerm> batch);

struct ScoredPair {
  const RealGrid* pred = nullptr;
  const PseudoPair* pair = nullptr;
};
double concept_loss(std::span<const ScoredPair> batch);

// One view fed to the decoder during tuning.
struct TrainingSample {
  FeatureField features;
  Mask target;
  Polarity polarity = Polarity::kPositive;
};

// Features are extracted once per pair, for the original image and for its
// half-scale padded copy.
struct PreparedPair {
  TrainingSample original;
  TrainingSample downscaled;
};

PreparedPair prepare_pair(const PseudoPair& pair, const SegmenterBackend& backend);

// 2x2 box-filtered half-size image in the top-left corner, zero elsewhere.
RgbImage downscale_and_pad(const RgbImage& image);
// 2x2 max-pooled half-size mask in the top-left corner, zero elsewhere.
Mask downscale_and_pad(const Mask& mask);

// Quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right; split
// at rows / 2 and cols / 2.
struct QuadrantBounds {
  std::size_t r0, r1, c0, c1;
};
QuadrantBounds quadrant_bounds(GridShape grid, int quadrant);

// Copies the quadrant of negative's features into positive and zeroes the
// positive target there.
void swap_in_quadrant(TrainingSample& positive, const TrainingSample& negative, int quadrant);

struct AugmentOptions {
  double downscale_prob = 0.5;
  double cutmix_prob = 0.5;
};

TrainingSample augment(const PreparedPair& item, std::span<const PreparedPair* const> negatives,
                       const AugmentOptions& options, std::mt19937_64& rng);

using EmbeddingLoss = std::function<double(const EmbeddingVector&)>;

// Mean over k Gaussian perturbations delta ~ N(0, sigma^2 I) of
// max(0, loss(z + delta) - loss(z)).
double sharpness(const EmbeddingVector& z, const EmbeddingLoss& loss, int k, double sigma,
                 std::mt19937_64& rng);

double default_sharpness_sigma(const EmbeddingVector& z);

// Keeps the ceil(fraction * n) epochs with the lowest sharpness (ties by
// epoch), then returns the epoch with the lowest validation loss among them
// (ties by epoch).
std::size_t select_checkpoint(std::span<const EpochRecord> history, double fraction = 0.2);

struct LossAndGradient {
  double loss = 0.0;
  EmbeddingVector gradient{};
};

// Concept loss over samples together with its gradient with respect to z.
LossAndGradient concept_loss_and_gradient(std::span<const TrainingSample> samples,
                                          const SegmenterBackend& backend,
                                          const EmbeddingVector& z);

double concept_loss_at(std::span<const TrainingSample> samples, const SegmenterBackend& backend,
                       const EmbeddingVector& z);

// (gradient, lr) -> update of z.
class Stepper {
 public:
  virtual ~Stepper() = default;
  virtual void step(EmbeddingVector& z, const EmbeddingVector& gradient, double lr) = 0;
};

class AdamW : public Stepper {
 public:
  explicit AdamW(double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  void step(EmbeddingVector& z, const EmbeddingVector& gradient, double lr) override;

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  EmbeddingVector m_{}, v_{};
  long t_ = 0;
};

EmbeddingVector initial_embedding(const CategorySpec& spec, const SegmenterBackend& backend,
                                  ConceptInit init, std::uint64_t seed);

// Tunes the conditioning embedding for spec.name on the given pairs. stepper
// defaults to AdamW(cfg.weight_decay).
ConceptEmbedding tune(const CategorySpec& spec, const std::vector<PseudoPair>& pairs,
                      const SegmenterBackend& backend, const TuningConfig& cfg,
                      Stepper* stepper = nullptr);

nlohmann::json concept_to_json(const ConceptEmbedding& embedding);
ConceptEmbedding concept_from_json(const nlohmann::json& j);

void write_training_log(const std::filesystem::path& path, const ConceptEmbedding& embedding);

}  // namespace finecount
