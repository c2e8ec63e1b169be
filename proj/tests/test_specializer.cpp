#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "finecount/error.hpp"
#include "finecount/mock_shapes.hpp"
#include "finecount/specializer.hpp"
#include "oracles.hpp"

using namespace finecount;

namespace {

CategorySpec red_disk() {
  CategorySpec s;
  s.name = "red disk";
  s.parent = "shape";
  s.negatives = {"orange disk", "magenta square"};
  s.negative_source = NegativeSource::kStatic;
  return s;
}

const std::vector<PseudoPair>& toy_pairs() {
  static const std::vector<PseudoPair> pairs = [] {
    mock::MockShapesGenerator gen;
    const CategorySpec spec = red_disk();
    return synthesize_dataset(spec, expand_prompts(spec, 10, 3), gen, 10, 10, 3).pairs;
  }();
  return pairs;
}

TuningConfig quick_config(int epochs = 10) {
  TuningConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = 4;
  return cfg;
}

RealGrid grid(std::size_t r, std::size_t c, std::vector<double> v) { return RealGrid(r, c, std::move(v)); }

}  // namespace

TEST(Losses, PositiveLossExamples) {
  EXPECT_NEAR(positive_loss(grid(1, 1, {0.9}), Mask(1, 1, 1)), 0.10536051565782628, 1e-12);
  EXPECT_NEAR(positive_loss(grid(1, 1, {0.4}), Mask(1, 1, 1)), 0.916290731874155, 1e-12);
  EXPECT_NEAR(positive_loss(grid(1, 1, {0.5}), Mask(1, 1, 0)), std::log(2.0), 1e-12);
  EXPECT_NEAR(negative_loss(grid(1, 2, {0.5, 0.5})), std::log(2.0), 1e-12);
  // Saturated predictions are clamped, never infinite.
  EXPECT_TRUE(std::isfinite(positive_loss(grid(1, 1, {0.0}), Mask(1, 1, 1))));
  EXPECT_TRUE(std::isfinite(negative_loss(grid(1, 1, {1.0}))));
}

TEST(Losses, ConceptLossIsSumOfPolarityMeans) {
  const RealGrid a = grid(1, 1, {0.9});
  const RealGrid b = grid(1, 1, {0.4});
  const Mask one(1, 1, 1);
  const std::vector<LossTerm> terms{{&a, &one, Polarity::kPositive}, {&b, nullptr, Polarity::kNegative}};
  EXPECT_NEAR(concept_loss(terms), positive_loss(a, one) + negative_loss(b), 1e-12);
  const std::vector<LossTerm> only_pos{{&a, &one, Polarity::kPositive}};
  EXPECT_NEAR(concept_loss(only_pos), positive_loss(a, one), 1e-12);
}

TEST(Losses, ConceptLossMatchesOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<oracle::Item> items;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      oracle::Item it;
      it.pred = RealGrid(4, 4);
      for (auto& v : it.pred.values()) v = u(rng);
      it.target = Mask(1 + rng() % 8, 1 + rng() % 8);
      for (auto& v : it.target.values()) v = u(rng) < 0.4;
      it.positive = rng() % 2;
      items.push_back(std::move(it));
    }
    std::vector<LossTerm> terms;
    for (const auto& it : items) {
      terms.push_back({&it.pred, &it.target, it.positive ? Polarity::kPositive : Polarity::kNegative});
    }
    ASSERT_TRUE(oracle::close_rel(concept_loss(terms), oracle::concept_loss(items), 1e-10));
  }
}

TEST(Losses, GradientMatchesFiniteDifferences) {
  ToySegmenter seg(ToySegmenterOptions{.logit_scale = 4.0});
  std::vector<TrainingSample> samples;
  for (const auto& p : toy_pairs()) samples.push_back(prepare_pair(p, seg).original);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  EmbeddingVector z{};
  for (auto& v : z) v = n(rng);
  const auto lg = concept_loss_and_gradient(samples, seg, z);
  EXPECT_NEAR(lg.loss, concept_loss_at(samples, seg, z), 1e-12);
  const double h = 1e-5;
  for (std::size_t i : {1u, 64u, 300u}) {
    EmbeddingVector zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (concept_loss_at(samples, seg, zp) - concept_loss_at(samples, seg, zm)) / (2 * h);
    EXPECT_NEAR(lg.gradient[i], fd, 1e-7 + 1e-5 * std::fabs(fd));
  }
}

TEST(Augmentation, DownscaleAlignsImageAndMask) {
  RgbImage img(4, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(10 * (y * 4 + x));
    }
  }
  const RgbImage small = downscale_and_pad(img);
  EXPECT_EQ(small.height, 4u);
  EXPECT_EQ(small.at(0, 0, 0), (0 + 10 + 40 + 50) / 4);
  EXPECT_EQ(small.at(1, 1, 2), (100 + 110 + 140 + 150) / 4);
  EXPECT_EQ(small.at(3, 3, 0), 0);
  EXPECT_EQ(small.at(0, 2, 0), 0);

  Mask m(4, 4, 0);
  m(3, 3) = 1;
  const Mask ms = downscale_and_pad(m);
  Mask want(4, 4, 0);
  want(1, 1) = 1;
  EXPECT_EQ(ms, want);
}

TEST(Augmentation, QuadrantsTileTheGrid) {
  for (GridShape g : {GridShape{16, 16}, GridShape{5, 7}, GridShape{1, 3}}) {
    std::size_t area = 0;
    for (int q = 0; q < 4; ++q) {
      const auto b = quadrant_bounds(g, q);
      area += (b.r1 - b.r0) * (b.c1 - b.c0);
    }
    EXPECT_EQ(area, g.area());
  }
  EXPECT_THROW(quadrant_bounds(GridShape{4, 4}, 4), Error);
}

TEST(Augmentation, CutMixSwapsFeaturesAndClearsTarget) {
  TrainingSample pos, neg;
  pos.features = FeatureField(2, GridShape{4, 4});
  neg.features = FeatureField(2, GridShape{4, 4});
  std::fill(pos.features.values.begin(), pos.features.values.end(), 1.0);
  std::fill(neg.features.values.begin(), neg.features.values.end(), 2.0);
  pos.target = Mask(4, 4, 1);
  neg.polarity = Polarity::kNegative;
  swap_in_quadrant(pos, neg, 3);
  double feature_sum = 0;
  for (double v : pos.features.values) feature_sum += v;
  EXPECT_EQ(feature_sum, 2 * 12 * 1.0 + 2 * 4 * 2.0);
  std::size_t ones = 0;
  for (auto v : pos.target.values()) ones += v;
  EXPECT_EQ(ones, 12u);
  EXPECT_EQ(pos.target(3, 3), 0);
  EXPECT_EQ(pos.target(0, 0), 1);
}

TEST(Augmentation, NegativesNeverCutMixed) {
  ToySegmenter seg;
  std::vector<PreparedPair> prepared;
  for (const auto& p : toy_pairs()) prepared.push_back(prepare_pair(p, seg));
  std::vector<const PreparedPair*> negs;
  for (const auto& p : prepared) {
    if (p.original.polarity == Polarity::kNegative) negs.push_back(&p);
  }
  std::mt19937_64 rng(1);
  const AugmentOptions always{0.0, 1.0};
  for (const auto* n : negs) {
    const TrainingSample s = augment(*n, negs, always, rng);
    EXPECT_EQ(s.features, n->original.features);
  }
}

TEST(Sharpness, ConstantLossIsZero) {
  std::mt19937_64 rng(2);
  const EmbeddingVector z{};
  EXPECT_EQ(sharpness(z, [](const EmbeddingVector&) { return 3.0; }, 8, 0.1, rng), 0.0);
}

TEST(Sharpness, MatchesOracleOnRecordedPerturbations) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  EmbeddingVector z{};
  for (auto& v : z) v = n(rng);
  auto sq = [](const EmbeddingVector& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return s;
  };
  std::vector<EmbeddingVector> seen;
  auto recording = [&](const EmbeddingVector& v) {
    seen.push_back(v);
    return sq(v);
  };
  const double s = sharpness(z, recording, 6, 0.01, rng);
  ASSERT_EQ(seen.size(), 7u);
  std::vector<EmbeddingVector> deltas;
  for (std::size_t k = 1; k < seen.size(); ++k) {
    EmbeddingVector d{};
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = seen[k][i] - z[i];
    deltas.push_back(d);
  }
  EXPECT_TRUE(oracle::close_rel(s, oracle::sharpness(z, deltas, sq), 1e-9));
  EXPECT_GT(s, 0.0);
}

TEST(Selection, PicksLowestValAmongFlattest) {
  std::vector<EpochRecord> h;
  for (std::size_t e = 1; e <= 10; ++e) h.push_back({e, 0, 10.0 - e, static_cast<double>(e), 0});
  // Flattest 2: epochs 1 and 2; epoch 2 has the lower val loss.
  EXPECT_EQ(select_checkpoint(h, 0.2), 2u);
  EXPECT_EQ(select_checkpoint(h, 1.0), 10u);
  EXPECT_EQ(select_checkpoint(std::span(h).first(1), 0.2), 1u);
  EXPECT_THROW(select_checkpoint(std::span<const EpochRecord>{}, 0.2), Error);
}

TEST(Selection, InvariantToHistoryOrder) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EpochRecord> h;
    const std::size_t n = 1 + rng() % 30;
    for (std::size_t e = 1; e <= n; ++e) {
      h.push_back({e, 0, std::round(u(rng) * 4) / 4, std::round(u(rng) * 4) / 4, 0});
    }
    const auto want = select_checkpoint(h, 0.2);
    std::shuffle(h.begin(), h.end(), rng);
    ASSERT_EQ(select_checkpoint(h, 0.2), want);
  }
}

TEST(Tuning, DeterministicForFixedSeed) {
  ToySegmenter seg;
  const auto a = tune(red_disk(), toy_pairs(), seg, quick_config());
  const auto b = tune(red_disk(), toy_pairs(), seg, quick_config());
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.selected_epoch, b.selected_epoch);
}

TEST(Tuning, ReducesValidationLossAndLeavesSegmenterFrozen) {
  ToySegmenter seg;
  const auto before = seg.parameter_checksum();
  const auto weights = seg.weights();
  const auto c = tune(red_disk(), toy_pairs(), seg, quick_config(50));
  EXPECT_EQ(seg.parameter_checksum(), before);
  EXPECT_EQ(seg.weights(), weights);
  ASSERT_EQ(c.history.size(), 50u);
  const double selected_val = c.history[c.selected_epoch - 1].val_loss;
  EXPECT_LT(selected_val, 0.5 * c.initial_val_loss);
}

TEST(Tuning, SingleEpochSelectsIt) {
  ToySegmenter seg;
  const auto c = tune(red_disk(), toy_pairs(), seg, quick_config(1));
  EXPECT_EQ(c.selected_epoch, 1u);
}

TEST(Tuning, InitialisationsDiffer) {
  ToySegmenter seg;
  const auto text = initial_embedding(red_disk(), seg, ConceptInit::kTextEncoder, 0);
  const auto rnd = initial_embedding(red_disk(), seg, ConceptInit::kRandom, 0);
  EXPECT_EQ(text, seg.text_embed("red disk"));
  EXPECT_NE(text, rnd);
  EXPECT_EQ(rnd, initial_embedding(red_disk(), seg, ConceptInit::kRandom, 0));
}

TEST(Tuning, RejectsPositiveFreeData) {
  ToySegmenter seg;
  std::vector<PseudoPair> negs;
  for (const auto& p : toy_pairs()) {
    if (p.polarity == Polarity::kNegative) negs.push_back(p);
  }
  EXPECT_THROW(tune(red_disk(), negs, seg, quick_config()), Error);
}

namespace {

class PoisonStepper : public Stepper {
 public:
  void step(EmbeddingVector& z, const EmbeddingVector&, double) override {
    z[0] = std::numeric_limits<double>::quiet_NaN();
  }
};

}  // namespace

TEST(Tuning, DivergenceIsReported) {
  ToySegmenter seg;
  PoisonStepper poison;
  try {
    tune(red_disk(), toy_pairs(), seg, quick_config(3), &poison);
    FAIL() << "expected non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonFinite);
  }
}

TEST(Tuning, SmallStepsDecreaseLoss) {
  ToySegmenter seg;
  std::vector<TrainingSample> samples;
  for (const auto& p : toy_pairs()) samples.push_back(prepare_pair(p, seg).original);
  EmbeddingVector z = seg.text_embed("red disk");
  double prev = concept_loss_at(samples, seg, z);
  for (int step = 0; step < 20; ++step) {
    const auto lg = concept_loss_and_gradient(samples, seg, z);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= 1e-3 * lg.gradient[i];
    const double cur = concept_loss_at(samples, seg, z);
    EXPECT_LE(cur, prev + 1e-12) << "step " << step;
    prev = cur;
  }
}

TEST(Tuning, ConceptJsonRoundTrip) {
  ToySegmenter seg;
  const auto c = tune(red_disk(), toy_pairs(), seg, quick_config(3));
  const auto back = concept_from_json(nlohmann::json::parse(concept_to_json(c).dump()));
  EXPECT_EQ(back.z, c.z);
  EXPECT_EQ(back.history, c.history);
  EXPECT_EQ(back.selected_epoch, c.selected_epoch);
  EXPECT_EQ(back.category, c.category);
}

TEST(TuningConfig, Validation) {
  TuningConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TuningConfig{};
  cfg.select_fraction = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TuningConfig{};
  cfg.lr = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TuningConfig{};
  const nlohmann::json j = cfg;
  EXPECT_EQ(j.get<TuningConfig>().epochs, cfg.epochs);
}
