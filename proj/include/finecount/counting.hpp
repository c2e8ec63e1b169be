#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "finecount/grid.hpp"
#include "finecount/segmenter.hpp"
#include "finecount/specializer.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

enum class CountKind { kDensity, kPoints };

std::string_view to_string(CountKind kind);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

// Raw or specialised counter output.
struct CountField {
  CountKind kind = CountKind::kPoints;
  std::optional<RealGrid> density;
  std::vector<Point2> points;
  // Points removed by specialisation, kept for visualisation.
  std::vector<Point2> discarded;
  GridShape image;  // rows = height, cols = width
  std::string source;
  std::string prompt_used;

  void validate() const;
};

class CounterBackend {
 public:
  virtual ~CounterBackend() = default;
  virtual std::string id() const = 0;
  virtual CountField count(const RgbImage& image, const std::string& prompt) const = 0;
};

struct ToyShapeCounterOptions {
  CountKind kind = CountKind::kPoints;
  std::array<std::uint8_t, 3> background{40, 40, 40};
  int foreground_threshold = 40;
  std::size_t min_component = 4;
  double density_sigma = 2.0;
};

// Class-agnostic counter for MockShapes scenes: every 4-connected blob of
// non-background pixels is one object regardless of the prompt. Emits blob
// centroids, or a density map with unit mass per blob.
class ToyShapeCounter : public CounterBackend {
 public:
  explicit ToyShapeCounter(ToyShapeCounterOptions options = {});
  std::string id() const override { return "toy_shapes"; }
  CountField count(const RgbImage& image, const std::string& prompt) const override;

 private:
  ToyShapeCounterOptions options_;
};

// Decodes the image with z and bilinearly resizes the map to image size.
RealGrid predict_mask(const RgbImage& image, const EmbeddingVector& z,
                      const SegmenterBackend& backend);

inline constexpr double kDefaultPointTau = 0.5;

// Density is multiplied element-wise by the mask. A point is kept when the
// mask value at its nearest pixel is >= point_tau.
CountField specialize(const CountField& raw, const RealGrid& mask,
                      double point_tau = kDefaultPointTau);

// Sum of density or number of points.
double extract_count(const CountField& field);

struct CountDiagnostics {
  double raw_count = 0.0;
  double specialized_count = 0.0;
  CountKind kind = CountKind::kPoints;
  std::vector<Point2> retained;
  std::vector<Point2> discarded;
  // specialized / raw density mass, or retained / total points; 1 when raw is 0.
  double mask_mass_ratio = 1.0;
};

nlohmann::json diagnostics_to_json(const CountDiagnostics& d);

struct FineGrainedCount {
  double count = 0.0;
  CountDiagnostics diagnostics;
  CountField specialized;
  RealGrid mask;
};

// spec.parent when present, else spec.name.
std::string default_broad_prompt(const CategorySpec& spec);

// counter(broad_prompt) -> mask -> specialise -> count. Stage failures are
// rethrown as StageError tagged "counter", "segmenter" or "specialize".
FineGrainedCount count_fine_grained(const RgbImage& image, const CategorySpec& spec,
                                    const ConceptEmbedding& embedding,
                                    const CounterBackend& counter,
                                    const SegmenterBackend& segmenter,
                                    const std::string& broad_prompt,
                                    double point_tau = kDefaultPointTau);

// Alpha-blends the mask in green and marks retained points with green
// crosses and discarded points with red crosses.
RgbImage render_overlay(const RgbImage& image, const RealGrid& mask, const CountField& field,
                        double alpha = 0.45);

}  // namespace finecount
