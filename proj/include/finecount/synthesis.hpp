#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "finecount/grid.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

enum class Polarity { kPositive, kNegative };

std::string_view to_string(Polarity polarity);
Polarity polarity_from_string(std::string_view text);

// Cross-attention captured from a generator, indexed (layer, head, text
// token, image patch). Layer l corresponds to transformer block block_ids[l].
struct AttentionStack {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t text_tokens = 0;
  GridShape grid;
  std::vector<int> block_ids;
  std::vector<float> values;

  AttentionStack() = default;
  AttentionStack(std::vector<int> blocks, std::size_t heads, std::size_t text_tokens,
                 GridShape grid);

  std::size_t image_tokens() const { return grid.area(); }
  std::size_t slice_size() const { return text_tokens * image_tokens(); }

  float& at(std::size_t l, std::size_t h, std::size_t s, std::size_t q) {
    return values[((l * heads + h) * text_tokens + s) * image_tokens() + q];
  }
  float at(std::size_t l, std::size_t h, std::size_t s, std::size_t q) const {
    return values[((l * heads + h) * text_tokens + s) * image_tokens() + q];
  }

  // Shapes consistent, entries finite and non-negative.
  void validate() const;
};

// Half-open token index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct WordSpan {
  std::string word;
  TokenSpan tokens;
};

struct Generation {
  RgbImage image;
  AttentionStack attention;
  // Prompt words in order with the token range each occupies.
  std::vector<WordSpan> words;
};

struct GeneratorCapabilities {
  std::string id;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  int steps = 0;
  std::vector<int> captured_blocks;
  // Blocks to average by default; nullopt means all captured blocks.
  std::optional<std::vector<int>> attention_blocks;
  bool concurrent_generate = false;
};

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual Generation generate(const std::string& prompt, std::uint64_t seed) = 0;
  virtual GeneratorCapabilities capabilities() const = 0;
};

// Mean over all (layer, head) slices whose block id is in block_subset, or
// over every captured block when no subset is given. Result is
// text_tokens x image_tokens.
RealGrid average_attention(const AttentionStack& stack,
                           const std::optional<std::vector<int>>& block_subset = std::nullopt);

// Picks the row of span with the largest total mass (lowest index on ties)
// and reshapes it row-major to grid.
RealGrid extract_category_map(const RealGrid& avg, TokenSpan span, GridShape grid);

// Min-max normalisation to [0, 1]; constant input maps to all zeros.
RealGrid normalize_map(const RealGrid& raw);

inline constexpr double kDefaultBinThreshold = 0.1;

// 1 where map >= tau.
Mask binarize(const RealGrid& map, double tau = kDefaultBinThreshold);

// Token span covering the first occurrence of phrase's words in words.
// Comparison ignores case and trailing punctuation.
std::optional<TokenSpan> find_phrase_span(const std::vector<WordSpan>& words,
                                          std::string_view phrase);

struct PseudoPair {
  RgbImage image;
  RealGrid avg_map;  // empty for negatives
  RealGrid cat_map;
  Mask bin_mask;
  Polarity polarity = Polarity::kPositive;
  std::string target;    // category being specialised
  std::string category;  // category depicted
  std::string prompt;
  std::uint64_t seed = 0;
  std::size_t index = 0;

  void validate() const;
};

// Runs the averaging -> token selection -> normalisation -> threshold chain
// on one generation.
PseudoPair make_positive_pair(Generation generation, const std::string& category,
                              const std::optional<std::vector<int>>& block_subset,
                              double tau);

// Negative pairs carry an all-zero target at the attention grid resolution.
PseudoPair make_negative_pair(Generation generation, const std::string& target,
                              const std::string& category);

struct SynthesisOptions {
  double bin_threshold = kDefaultBinThreshold;
  // Overrides the backend's attention_blocks capability.
  std::optional<std::vector<int>> block_subset;
  int jobs = 0;
  double max_failure_fraction = 0.2;
};

struct SynthesisFailure {
  Polarity polarity = Polarity::kPositive;
  std::string category;
  std::size_t index = 0;
  std::string prompt;
  std::string message;
};

struct SynthesisResult {
  std::vector<PseudoPair> pairs;
  std::vector<SynthesisFailure> failures;
  std::size_t requested = 0;

  std::size_t count(Polarity polarity) const;
};

// Splits total across m buckets round-robin: bucket i gets
// total / m + (i < total % m).
std::vector<std::size_t> round_robin_counts(std::size_t total, std::size_t m);

// Generates n_pos positives for spec.name and n_neg_total negatives spread
// round-robin over spec.negatives. Pairs are ordered positives first, then
// negatives, each by index. Throws Error(kDatasetSynthesis) when more than
// max_failure_fraction of the requested images fail.
SynthesisResult synthesize_dataset(const CategorySpec& spec, const PromptBundle& bundle,
                                   GeneratorBackend& backend, std::size_t n_pos,
                                   std::size_t n_neg_total, std::uint64_t seed,
                                   const SynthesisOptions& options = {});

// Row-major run lengths, first run counts zeros.
std::vector<std::uint32_t> encode_rle(const Mask& mask);
Mask decode_rle(const std::vector<std::uint32_t>& runs, GridShape shape);

nlohmann::json pair_sidecar(const PseudoPair& pair, const std::string& config_hash);

// Writes <dir>/<polarity>/<index>.png and .json.
void write_pair(const std::filesystem::path& dir, const PseudoPair& pair,
                const std::string& config_hash);

// Reads every pair under <dir>/positive and <dir>/negative, positives first,
// each sorted by index.
std::vector<PseudoPair> read_pairs(const std::filesystem::path& dir);

}  // namespace finecount
