#include <gtest/gtest.h>

#include <random>

#include "finecount/counting.hpp"
#include "finecount/error.hpp"
#include "finecount/mock_shapes.hpp"

using namespace finecount;

namespace {

// Decoder output is a constant, independent of the image and embedding.
class ConstantSegmenter : public SegmenterBackend {
 public:
  explicit ConstantSegmenter(double value) : value_(value) {}
  std::string id() const override { return "constant"; }
  FeatureField encode_image(const RgbImage& image) const override {
    return FeatureField(1, GridShape{image.height / 4, image.width / 4});
  }
  EmbeddingVector text_embed(std::string_view) const override { return {}; }
  RealGrid decode(const FeatureField& f, const EmbeddingVector&) const override {
    return RealGrid(f.grid, value_);
  }
  bool has_gradient() const override { return false; }
  EmbeddingVector decode_vjp(const FeatureField&, const EmbeddingVector&, const RealGrid&) const override {
    throw Error(ErrorKind::kCapability, "no gradient");
  }
  std::uint64_t parameter_checksum() const override { return 0; }

 private:
  double value_;
};

class BrokenCounter : public CounterBackend {
 public:
  std::string id() const override { return "broken"; }
  CountField count(const RgbImage&, const std::string&) const override {
    throw Error(ErrorKind::kBackend, "model crashed");
  }
};

CategorySpec red_disk() {
  CategorySpec s;
  s.name = "red disk";
  s.parent = "shape";
  return s;
}

ConceptEmbedding concept_for(const std::string& name) {
  ConceptEmbedding c;
  c.category = name;
  return c;
}

mock::Scene scene(std::vector<std::size_t> counts, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return mock::render_scene(mock::ShapePalette::standard(), counts, mock::SceneOptions{}, rng);
}

CountField density_field(RealGrid d) {
  CountField f;
  f.kind = CountKind::kDensity;
  f.image = d.shape();
  f.density = std::move(d);
  return f;
}

}  // namespace

TEST(Specialize, DensityExample) {
  const CountField raw = density_field(RealGrid(1, 2, std::vector<double>{2, 4}));
  const CountField s = specialize(raw, RealGrid(1, 2, std::vector<double>{0.5, 1}));
  EXPECT_EQ(*s.density, RealGrid(1, 2, std::vector<double>{1, 4}));
  EXPECT_EQ(extract_count(s), 5.0);
}

TEST(Specialize, IdentityAndAnnihilator) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RealGrid d(7, 9);
  for (auto& v : d.values()) v = u(rng);
  const CountField raw = density_field(d);
  EXPECT_EQ(*specialize(raw, RealGrid(7, 9, 1.0)).density, d);
  EXPECT_EQ(extract_count(specialize(raw, RealGrid(7, 9, 0.0))), 0.0);
}

TEST(Specialize, NeverExceedsRawForUnitMasks) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng() % 20, c = 1 + rng() % 20;
    RealGrid d(r, c), m(r, c);
    for (auto& v : d.values()) v = u(rng);
    for (auto& v : m.values()) v = u(rng);
    const CountField raw = density_field(d);
    ASSERT_LE(extract_count(specialize(raw, m)), extract_count(raw) + 1e-9);

    CountField pts;
    pts.image = {r, c};
    for (int i = 0; i < 10; ++i) pts.points.push_back({u(rng) * c, u(rng) * r});
    const CountField kept = specialize(pts, m);
    ASSERT_LE(kept.points.size(), pts.points.size());
    ASSERT_EQ(kept.points.size() + kept.discarded.size(), pts.points.size());
  }
}

TEST(Specialize, PointThreshold) {
  CountField raw;
  raw.image = {2, 2};
  raw.points = {{0.5, 0.5}, {1.5, 0.5}, {1.5, 1.5}};
  const RealGrid mask(2, 2, std::vector<double>{0.9, 0.2, 0.0, 0.5});
  const CountField s = specialize(raw, mask, 0.5);
  EXPECT_EQ(s.points, (std::vector<Point2>{{0.5, 0.5}, {1.5, 1.5}}));
  EXPECT_EQ(s.discarded, (std::vector<Point2>{{1.5, 0.5}}));
}

TEST(Specialize, ShapeMismatchThrows) {
  const CountField raw = density_field(RealGrid(2, 2, 1.0));
  EXPECT_THROW(specialize(raw, RealGrid(2, 3, 1.0)), Error);
}

TEST(ToyShapeCounter, CountsEveryBlob) {
  const mock::Scene s = scene({3, 2, 1, 2}, 4);
  std::size_t placed = s.shapes.size();
  ToyShapeCounter points;
  const CountField f = points.count(s.image, "shape");
  EXPECT_EQ(extract_count(f), static_cast<double>(placed));
  EXPECT_EQ(f.image, (GridShape{64, 64}));

  ToyShapeCounter density(ToyShapeCounterOptions{.kind = CountKind::kDensity});
  EXPECT_NEAR(extract_count(density.count(s.image, "anything")), static_cast<double>(placed), 1e-6);
}

TEST(ToyShapeCounter, EmptySceneCountsZero) {
  const mock::Scene s = scene({0, 0, 0, 0}, 5);
  EXPECT_EQ(extract_count(ToyShapeCounter().count(s.image, "shape")), 0.0);
}

TEST(FineGrained, ConstantMasksBoundTheCount) {
  const mock::Scene s = scene({2, 2, 1, 1}, 6);
  ToyShapeCounter counter;
  const auto all = count_fine_grained(s.image, red_disk(), concept_for("red disk"), counter,
                                      ConstantSegmenter(1.0), "shape");
  EXPECT_EQ(all.count, static_cast<double>(s.shapes.size()));
  EXPECT_EQ(all.diagnostics.mask_mass_ratio, 1.0);
  const auto none = count_fine_grained(s.image, red_disk(), concept_for("red disk"), counter,
                                       ConstantSegmenter(0.0), "shape");
  EXPECT_EQ(none.count, 0.0);
  EXPECT_EQ(none.diagnostics.discarded.size(), s.shapes.size());
  EXPECT_EQ(none.mask.shape(), (GridShape{64, 64}));
}

TEST(FineGrained, StageErrorsNameTheStage) {
  const mock::Scene s = scene({1, 1, 0, 0}, 7);
  try {
    count_fine_grained(s.image, red_disk(), concept_for("red disk"), BrokenCounter(),
                       ConstantSegmenter(1.0), "shape");
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "counter");
    EXPECT_EQ(e.kind(), ErrorKind::kBackend);
  }
}

TEST(FineGrained, RejectsConceptForAnotherCategory) {
  const mock::Scene s = scene({1, 0, 0, 0}, 8);
  EXPECT_THROW(count_fine_grained(s.image, red_disk(), concept_for("orange disk"),
                                  ToyShapeCounter(), ConstantSegmenter(1.0), "shape"),
               Error);
}

TEST(FineGrained, TunedConceptSeparatesSubcategories) {
  mock::MockShapesGenerator gen;
  CategorySpec spec = red_disk();
  spec.negatives = {"orange disk", "magenta square", "yellow triangle"};
  spec.negative_source = NegativeSource::kStatic;
  const auto pairs = synthesize_dataset(spec, expand_prompts(spec, 15, 1), gen, 15, 15, 1).pairs;
  ToySegmenter seg;
  TuningConfig cfg;
  cfg.seed = 1;
  const ConceptEmbedding c = tune(spec, pairs, seg, cfg);
  double err = 0.0, raw_err = 0.0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    const mock::Scene s = scene({1 + k % 4, 2, 1 + k % 3, 2}, 100 + k);
    const double truth = static_cast<double>(s.count_of(0));
    const auto r = count_fine_grained(s.image, spec, c, ToyShapeCounter(), seg, "shape");
    err += std::fabs(r.count - truth);
    raw_err += std::fabs(r.diagnostics.raw_count - truth);
  }
  EXPECT_LT(err, 0.3 * raw_err);
}

TEST(Overlay, MarksPointsAndKeepsSize) {
  const mock::Scene s = scene({2, 1, 0, 0}, 9);
  const auto r = count_fine_grained(s.image, red_disk(), concept_for("red disk"),
                                    ToyShapeCounter(), ConstantSegmenter(0.0), "shape");
  const RgbImage o = render_overlay(s.image, r.mask, r.specialized);
  EXPECT_EQ(o.height, s.image.height);
  EXPECT_EQ(o.width, s.image.width);
  EXPECT_NE(o, s.image);
  EXPECT_THROW(render_overlay(s.image, RealGrid(3, 3), r.specialized), Error);
}

TEST(Counting, DefaultBroadPrompt) {
  EXPECT_EQ(default_broad_prompt(red_disk()), "shape");
  CategorySpec bare;
  bare.name = "red disk";
  EXPECT_EQ(default_broad_prompt(bare), "red disk");
}
