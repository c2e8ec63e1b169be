#pragma once

// Procedural scenes of coloured shapes standing in for fine-grained
// subcategories. Every scene carries its exact layout, so attention maps,
// counts and masks derived from it have analytic ground truth.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "finecount/grid.hpp"
#include "finecount/synthesis.hpp"

namespace finecount::mock {

enum class ShapeKind { kDisk, kSquare, kTriangle };

struct ShapeClass {
  std::string name;
  ShapeKind kind = ShapeKind::kDisk;
  std::array<std::uint8_t, 3> color{};
};

struct PlacedShape {
  std::size_t class_index = 0;
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;

  bool covers(double x, double y, ShapeKind kind) const;
};

class ShapePalette {
 public:
  ShapePalette(std::string parent, std::vector<ShapeClass> classes);

  // Four warm-coloured classes under the parent "shape": red disk,
  // orange disk, magenta square, yellow triangle.
  static ShapePalette standard();

  const std::string& parent() const { return parent_; }
  const std::vector<ShapeClass>& classes() const { return classes_; }
  const ShapeClass& at(std::size_t i) const { return classes_.at(i); }
  std::size_t size() const { return classes_.size(); }

  std::optional<std::size_t> find(std::string_view name) const;

 private:
  std::string parent_;
  std::vector<ShapeClass> classes_;
};

struct SceneOptions {
  std::size_t size = 64;
  double min_radius = 4.0;
  double max_radius = 6.0;
  double brightness = 1.0;
  std::array<std::uint8_t, 3> background{40, 40, 40};
  int background_noise = 6;
};

struct Scene {
  RgbImage image;
  std::vector<PlacedShape> shapes;

  std::size_t count_of(std::size_t class_index) const;
};

// Places counts[c] shapes of class c without overlap (best effort: shapes
// that do not fit after repeated attempts are dropped).
Scene render_scene(const ShapePalette& palette, const std::vector<std::size_t>& counts,
                   const SceneOptions& options, std::mt19937_64& rng);

// Fraction of each patch covered by shapes of the given classes.
RealGrid class_occupancy(const Scene& scene, const ShapePalette& palette,
                         const std::vector<std::size_t>& classes, std::size_t patch);

struct MockShapesOptions {
  std::size_t image_size = 64;
  std::size_t patch = 4;
  std::size_t heads = 2;
  std::vector<int> captured_blocks{0, 1, 2, 3, 4, 5, 6, 7};
  // Blocks whose attention localises the named shape; others are noise.
  std::vector<int> localizing_blocks{3, 4, 5};
};

// Generator backend: parses the category, count, view and lighting slots
// from the prompt, renders a scene of that class and emits attention equal
// to the class occupancy per patch (scaled per layer/head) on the category
// tokens of localising blocks.
class MockShapesGenerator : public GeneratorBackend {
 public:
  explicit MockShapesGenerator(ShapePalette palette = ShapePalette::standard(),
                               MockShapesOptions options = {});

  Generation generate(const std::string& prompt, std::uint64_t seed) override;
  GeneratorCapabilities capabilities() const override;

  // Scene rendered for the prompt plus the classes it names.
  struct Rendered {
    Scene scene;
    std::vector<std::size_t> classes;
    std::string phrase;
  };
  Rendered render_prompt(const std::string& prompt, std::uint64_t seed) const;

  const ShapePalette& palette() const { return palette_; }
  const MockShapesOptions& options() const { return options_; }

 private:
  ShapePalette palette_;
  MockShapesOptions options_;
};

// Tokenises like the mock generator: a start token, one token per word (two
// for words longer than six characters), an end token.
std::vector<WordSpan> tokenize_prompt(const std::string& prompt, std::size_t* text_tokens);

}  // namespace finecount::mock
