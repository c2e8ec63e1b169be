#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "finecount/error.hpp"
#include "finecount/mock_shapes.hpp"
#include "finecount/synthesis.hpp"
#include "oracles.hpp"

using namespace finecount;
namespace fs = std::filesystem;

namespace {

AttentionStack random_stack(std::mt19937_64& rng, std::vector<int> blocks, std::size_t heads,
                            std::size_t tokens, GridShape grid) {
  AttentionStack st(std::move(blocks), heads, tokens, grid);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : st.values) v = d(rng);
  return st;
}

RealGrid grid_of(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return RealGrid(rows, cols, std::move(v));
}

CategorySpec red_disk(std::vector<std::string> negatives = {}) {
  CategorySpec s;
  s.name = "red disk";
  s.parent = "shape";
  s.negatives = std::move(negatives);
  s.negative_source = s.negatives.empty() ? NegativeSource::kNone : NegativeSource::kStatic;
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("finecount_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Synthesis, AverageAttentionTwoLayerExample) {
  AttentionStack st({0, 1}, 1, 1, GridShape{1, 2});
  st.values = {1, 3, 3, 5};
  const RealGrid avg = average_attention(st);
  EXPECT_EQ(avg, grid_of(1, 2, {2, 4}));
}

TEST(Synthesis, AverageAttentionIdenticalSlices) {
  AttentionStack st({0, 1, 2}, 2, 2, GridShape{1, 2});
  const std::vector<float> m{0.25f, 0.5f, 0.75f, 1.0f};
  for (std::size_t k = 0; k < 6; ++k) std::copy(m.begin(), m.end(), st.values.begin() + k * 4);
  EXPECT_EQ(average_attention(st), grid_of(2, 2, {0.25, 0.5, 0.75, 1.0}));
}

TEST(Synthesis, AverageAttentionBlockSubset) {
  std::mt19937_64 rng(1);
  const AttentionStack st = random_stack(rng, {0, 1, 2, 3, 4, 5, 6, 7}, 3, 4, GridShape{2, 3});
  const std::vector<int> subset{3, 4, 5};
  const RealGrid got = average_attention(st, subset);
  const RealGrid want = oracle::average_attention(st, subset);
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_TRUE(oracle::close_rel(got.values()[i], want.values()[i], 1e-12));
  }
  // Mean over exactly 3 * H slices: changing an excluded block has no effect.
  AttentionStack other = st;
  for (std::size_t i = 0; i < other.slice_size() * other.heads; ++i) other.values[i] = 99.0f;
  EXPECT_EQ(average_attention(other, subset), got);
}

TEST(Synthesis, AverageAttentionErrors) {
  AttentionStack st({3, 4}, 1, 1, GridShape{1, 1});
  st.values = {1, 2};
  EXPECT_THROW(average_attention(st, std::vector<int>{}), Error);
  EXPECT_THROW(average_attention(st, std::vector<int>{9}), Error);
}

TEST(Synthesis, AverageAttentionRandomOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t layers = 1 + rng() % 4, heads = 1 + rng() % 3, tokens = 1 + rng() % 5;
    const GridShape grid{1 + rng() % 4, 1 + rng() % 4};
    std::vector<int> blocks(layers);
    for (std::size_t l = 0; l < layers; ++l) blocks[l] = static_cast<int>(l);
    const AttentionStack st = random_stack(rng, blocks, heads, tokens, grid);
    const RealGrid got = average_attention(st);
    const RealGrid want = oracle::average_attention(st, {});
    for (std::size_t i = 0; i < got.size(); ++i) {
      ASSERT_TRUE(oracle::close_rel(got.values()[i], want.values()[i], 1e-6));
    }
  }
}

TEST(Synthesis, ExtractCategoryMapExamples) {
  const RealGrid avg = grid_of(4, 2, {0, 0, 0, 0, 0.1, 0.9, 2.0, 1.0});
  EXPECT_EQ(extract_category_map(avg, {2, 3}, GridShape{1, 2}), grid_of(1, 2, {0.1, 0.9}));
  // Row sums 1.0 vs 3.0: row 3 wins.
  EXPECT_EQ(extract_category_map(avg, {2, 4}, GridShape{1, 2}), grid_of(1, 2, {2.0, 1.0}));

  const RealGrid one = grid_of(1, 4, {1, 2, 3, 4});
  EXPECT_EQ(extract_category_map(one, {0, 1}, GridShape{2, 2}), grid_of(2, 2, {1, 2, 3, 4}));
}

TEST(Synthesis, ExtractCategoryMapTieTakesLowestIndex) {
  const RealGrid avg = grid_of(3, 2, {0.5, 0.5, 1.0, 0.0, 0.0, 1.0});
  EXPECT_EQ(extract_category_map(avg, {0, 3}, GridShape{1, 2}), grid_of(1, 2, {0.5, 0.5}));
}

TEST(Synthesis, NormalizeMapExamples) {
  EXPECT_EQ(normalize_map(grid_of(2, 2, {0, 5, 10, 5})), grid_of(2, 2, {0, 0.5, 1, 0.5}));
  EXPECT_EQ(normalize_map(grid_of(2, 2, {3, 3, 3, 3})), RealGrid(2, 2, 0.0));
  const RealGrid fixed = grid_of(1, 3, {0, 0.3, 1});
  EXPECT_EQ(normalize_map(fixed), fixed);
}

TEST(Synthesis, NormalizeMapRangeProperty) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    RealGrid g(1 + rng() % 6, 1 + rng() % 6);
    for (auto& v : g.values()) v = d(rng);
    const RealGrid n = normalize_map(g);
    double lo = 1, hi = 0;
    for (double v : n.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (g.size() > 1) {
      EXPECT_EQ(lo, 0.0);
      EXPECT_EQ(hi, 1.0);
    }
  }
}

TEST(Synthesis, BinarizeExamples) {
  EXPECT_EQ(binarize(grid_of(1, 2, {0.05, 0.2}), 0.1), Mask(1, 2, std::vector<std::uint8_t>{0, 1}));
  EXPECT_EQ(binarize(RealGrid(2, 2, 0.0)), Mask(2, 2, 0));
  EXPECT_EQ(binarize(grid_of(1, 1, {0.1}), 0.1), Mask(1, 1, 1));
  EXPECT_THROW(binarize(grid_of(1, 1, {0.1}), 0.0), Error);
  EXPECT_THROW(binarize(grid_of(1, 1, {0.1}), 1.0), Error);
}

TEST(Synthesis, FindPhraseSpan) {
  std::size_t tokens = 0;
  const auto words = mock::tokenize_prompt("A photorealistic image of many red disk. close-up, backlit", &tokens);
  const auto span = find_phrase_span(words, "Red Disk");
  ASSERT_TRUE(span);
  EXPECT_EQ(span->size(), 2u);
  EXPECT_FALSE(find_phrase_span(words, "blue square"));
}

TEST(Synthesis, RoundRobinCounts) {
  EXPECT_EQ(round_robin_counts(5, 2), (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(round_robin_counts(0, 3), (std::vector<std::size_t>{0, 0, 0}));
  EXPECT_EQ(round_robin_counts(7, 3), (std::vector<std::size_t>{3, 2, 2}));
}

TEST(Synthesis, EmptyRequestGivesEmptyResult) {
  mock::MockShapesGenerator gen;
  const CategorySpec spec = red_disk({"orange disk"});
  const auto bundle = expand_prompts(spec, 1, 0);
  const auto result = synthesize_dataset(spec, bundle, gen, 0, 0, 0);
  EXPECT_TRUE(result.pairs.empty());
  EXPECT_TRUE(result.failures.empty());
}

TEST(Synthesis, NegativesSplitRoundRobin) {
  mock::MockShapesGenerator gen;
  const CategorySpec spec = red_disk({"orange disk", "magenta square"});
  const auto bundle = expand_prompts(spec, 5, 0);
  const auto result = synthesize_dataset(spec, bundle, gen, 1, 5, 0);
  std::map<std::string, int> per;
  for (const auto& p : result.pairs) {
    if (p.polarity == Polarity::kNegative) ++per[p.category];
  }
  EXPECT_EQ(per["orange disk"], 3);
  EXPECT_EQ(per["magenta square"], 2);
}

TEST(Synthesis, PositiveMasksMatchAnalyticOccupancy) {
  mock::MockShapesGenerator gen;
  const CategorySpec spec = red_disk({"orange disk"});
  const auto bundle = expand_prompts(spec, 12, 4);
  const auto result = synthesize_dataset(spec, bundle, gen, 12, 6, 4);
  ASSERT_EQ(result.count(Polarity::kPositive), 12u);
  for (const auto& p : result.pairs) {
    if (p.polarity == Polarity::kNegative) {
      std::size_t ones = 0;
      for (auto v : p.bin_mask.values()) ones += v;
      EXPECT_EQ(ones, 0u);
      continue;
    }
    const auto rendered = gen.render_prompt(p.prompt, p.seed);
    const RealGrid occ = mock::class_occupancy(rendered.scene, gen.palette(), rendered.classes,
                                               gen.options().patch);
    const RealGrid gt = oracle::normalize_map(occ);
    ASSERT_EQ(p.bin_mask.shape(), gt.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      EXPECT_EQ(p.bin_mask.values()[i], gt.values()[i] >= 0.1 ? 1 : 0) << "pair " << p.index;
    }
  }
}

TEST(Synthesis, DeterministicAndOrderStable) {
  mock::MockShapesGenerator gen;
  const CategorySpec spec = red_disk({"orange disk", "yellow triangle"});
  const auto bundle = expand_prompts(spec, 8, 9);
  const auto a = synthesize_dataset(spec, bundle, gen, 8, 8, 9);
  const auto b = synthesize_dataset(spec, bundle, gen, 8, 8, 9);
  ASSERT_EQ(a.pairs.size(), b.pairs.size());
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].image.pixels, b.pairs[i].image.pixels);
    EXPECT_EQ(a.pairs[i].bin_mask, b.pairs[i].bin_mask);
    EXPECT_EQ(a.pairs[i].seed, b.pairs[i].seed);
  }
  for (std::size_t i = 1; i < a.pairs.size(); ++i) {
    const auto& prev = a.pairs[i - 1];
    const auto& cur = a.pairs[i];
    if (prev.polarity == cur.polarity) EXPECT_LT(prev.index, cur.index);
  }
}

namespace {

// Fails every prompt containing a marker word.
class FlakyGenerator : public GeneratorBackend {
 public:
  explicit FlakyGenerator(std::string marker) : marker_(std::move(marker)) {}
  Generation generate(const std::string& prompt, std::uint64_t seed) override {
    if (prompt.find(marker_) != std::string::npos) throw Error(ErrorKind::kBackend, "refused");
    return inner_.generate(prompt, seed);
  }
  GeneratorCapabilities capabilities() const override { return inner_.capabilities(); }

 private:
  std::string marker_;
  mock::MockShapesGenerator inner_;
};

}  // namespace

TEST(Synthesis, FailureBudget) {
  const CategorySpec spec = red_disk({"orange disk"});
  const auto bundle = expand_prompts(spec, 120, 0);
  // Every prompt fails.
  FlakyGenerator flaky("photorealistic");
  try {
    synthesize_dataset(spec, bundle, flaky, 40, 40, 0);
    FAIL() << "expected the failure budget to trip";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDatasetSynthesis);
  }
  // A rarer failure is tolerated and reported.
  FlakyGenerator rare("macro shot, dimly lit");
  const auto ok = synthesize_dataset(spec, bundle, rare, 40, 40, 0);
  EXPECT_EQ(ok.pairs.size() + ok.failures.size(), 80u);
  for (const auto& f : ok.failures) EXPECT_NE(f.prompt.find("macro shot, dimly lit"), std::string::npos);
}

TEST(Synthesis, RleRoundTrip) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Mask m(1 + rng() % 9, 1 + rng() % 9);
    for (auto& v : m.values()) v = static_cast<std::uint8_t>((rng() % 3) == 0);
    EXPECT_EQ(decode_rle(encode_rle(m), m.shape()), m);
  }
  EXPECT_EQ(encode_rle(Mask(1, 4, std::vector<std::uint8_t>{1, 1, 0, 1})),
            (std::vector<std::uint32_t>{0, 2, 1, 1}));
  EXPECT_THROW(decode_rle({1, 2}, GridShape{2, 2}), Error);
}

TEST(Synthesis, WriteReadPairsByteIdentical) {
  mock::MockShapesGenerator gen;
  const CategorySpec spec = red_disk({"orange disk"});
  const auto bundle = expand_prompts(spec, 3, 1);
  const auto result = synthesize_dataset(spec, bundle, gen, 3, 3, 1);
  const fs::path a = temp_dir("a"), b = temp_dir("b");
  for (const auto& p : result.pairs) {
    write_pair(a, p, "hash");
    write_pair(b, p, "hash");
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_EQ(files, 12u);

  const auto back = read_pairs(a);
  ASSERT_EQ(back.size(), result.pairs.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].image.pixels, result.pairs[i].image.pixels);
    EXPECT_EQ(back[i].bin_mask, result.pairs[i].bin_mask);
    EXPECT_EQ(back[i].polarity, result.pairs[i].polarity);
    EXPECT_EQ(back[i].prompt, result.pairs[i].prompt);
    EXPECT_EQ(back[i].seed, result.pairs[i].seed);
  }
  const auto side = pair_sidecar(result.pairs[0], "hash");
  EXPECT_EQ(side.at("config_hash"), "hash");
  EXPECT_EQ(side.at("polarity"), "positive");
}
