#include "finecount/synthesis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"
#include "finecount/image_io.hpp"
#include "finecount/kernels.hpp"

namespace finecount {

namespace fs = std::filesystem;

std::string_view to_string(Polarity polarity) {
  return polarity == Polarity::kPositive ? "positive" : "negative";
}

Polarity polarity_from_string(std::string_view text) {
  if (text == "positive") return Polarity::kPositive;
  if (text == "negative") return Polarity::kNegative;
  throw Error(ErrorKind::kParse, "unknown polarity '" + std::string(text) + "'");
}

AttentionStack::AttentionStack(std::vector<int> blocks, std::size_t heads_,
                               std::size_t text_tokens_, GridShape grid_)
    : layers(blocks.size()),
      heads(heads_),
      text_tokens(text_tokens_),
      grid(grid_),
      block_ids(std::move(blocks)),
      values(layers * heads * text_tokens * grid.area(), 0.0f) {}

void AttentionStack::validate() const {
  if (block_ids.size() != layers) {
    throw Error(ErrorKind::kInvalidArgument, "attention block id count != layer count");
  }
  if (values.size() != layers * heads * slice_size()) {
    throw Error(ErrorKind::kInvalidArgument, "attention value count does not match shape");
  }
  for (float v : values) {
    if (!std::isfinite(v) || v < 0.0f) {
      throw Error(ErrorKind::kInvalidArgument, "attention entries must be finite and >= 0");
    }
  }
}

RealGrid average_attention(const AttentionStack& stack,
                           const std::optional<std::vector<int>>& block_subset) {
  if (stack.layers == 0 || stack.heads == 0 || stack.slice_size() == 0) {
    throw Error(ErrorKind::kInvalidArgument, "empty attention stack");
  }
  std::vector<std::size_t> layers;
  if (block_subset) {
    if (block_subset->empty()) {
      throw Error(ErrorKind::kInvalidArgument, "attention block subset is empty");
    }
    std::set<int> wanted(block_subset->begin(), block_subset->end());
    for (int id : wanted) {
      auto it = std::find(stack.block_ids.begin(), stack.block_ids.end(), id);
      if (it == stack.block_ids.end()) {
        throw Error(ErrorKind::kInvalidArgument,
                    "block " + std::to_string(id) + " was not captured");
      }
      layers.push_back(static_cast<std::size_t>(it - stack.block_ids.begin()));
    }
    std::sort(layers.begin(), layers.end());
  } else {
    for (std::size_t l = 0; l < stack.layers; ++l) layers.push_back(l);
  }
  std::vector<std::size_t> slices;
  for (std::size_t l : layers) {
    for (std::size_t h = 0; h < stack.heads; ++h) slices.push_back(l * stack.heads + h);
  }
  RealGrid avg(stack.text_tokens, stack.image_tokens());
  kernels::parallel::mean_of_slices(stack.values, slices, stack.slice_size(), avg.values());
  return avg;
}

RealGrid extract_category_map(const RealGrid& avg, TokenSpan span, GridShape grid) {
  if (span.empty() || span.end > avg.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "token span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) +
                    ") outside " + std::to_string(avg.rows()) + " tokens");
  }
  if (grid.area() != avg.cols()) {
    throw Error(ErrorKind::kInvalidArgument,
                "patch grid " + to_string(grid) + " does not hold " +
                    std::to_string(avg.cols()) + " patches");
  }
  std::size_t best = span.begin;
  double best_mass = -1.0;
  for (std::size_t s = span.begin; s < span.end; ++s) {
    const double mass =
        kernels::parallel::sum(avg.values().subspan(s * avg.cols(), avg.cols()));
    if (mass > best_mass) {
      best_mass = mass;
      best = s;
    }
  }
  const auto row = avg.values().subspan(best * avg.cols(), avg.cols());
  return RealGrid(grid.rows, grid.cols, std::vector<double>(row.begin(), row.end()));
}

RealGrid normalize_map(const RealGrid& raw) {
  for (double v : raw.values()) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kInvalidArgument, "map has non-finite entries");
  }
  RealGrid out(raw.shape());
  if (!raw.empty()) kernels::parallel::normalize_min_max(raw.values(), out.values());
  return out;
}

Mask binarize(const RealGrid& map, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "binarisation threshold must lie in (0, 1)");
  }
  Mask out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out.values()[i] = map.values()[i] >= tau ? 1 : 0;
  return out;
}

namespace {

std::string word_key(std::string_view w) {
  std::string out;
  for (char ch : w) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '-' || ch == '\'') out += static_cast<char>(std::tolower(c));
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(word_key(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(word_key(cur));
  std::erase_if(out, [](const std::string& s) { return s.empty(); });
  return out;
}

}  // namespace

std::optional<TokenSpan> find_phrase_span(const std::vector<WordSpan>& words,
                                          std::string_view phrase) {
  const auto needle = split_words(phrase);
  if (needle.empty() || needle.size() > words.size()) return std::nullopt;
  for (std::size_t i = 0; i + needle.size() <= words.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < needle.size() && match; ++k) {
      match = word_key(words[i + k].word) == needle[k];
    }
    if (match) return TokenSpan{words[i].tokens.begin, words[i + needle.size() - 1].tokens.end};
  }
  return std::nullopt;
}

void PseudoPair::validate() const {
  if (cat_map.shape() != bin_mask.shape()) {
    throw Error(ErrorKind::kInvalidArgument, "cat_map and bin_mask shapes differ");
  }
  for (double v : cat_map.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "cat_map outside [0,1]");
  }
  for (auto v : bin_mask.values()) {
    if (v > 1) throw Error(ErrorKind::kInvalidArgument, "bin_mask is not binary");
    if (polarity == Polarity::kNegative && v != 0) {
      throw Error(ErrorKind::kInvalidArgument, "negative pair with non-empty mask");
    }
  }
}

PseudoPair make_positive_pair(Generation generation, const std::string& category,
                              const std::optional<std::vector<int>>& block_subset,
                              double tau) {
  generation.attention.validate();
  const auto span = find_phrase_span(generation.words, category);
  if (!span) {
    throw Error(ErrorKind::kBackend, "prompt tokens do not contain '" + category + "'");
  }
  PseudoPair pair;
  pair.avg_map = average_attention(generation.attention, block_subset);
  pair.cat_map = normalize_map(
      extract_category_map(pair.avg_map, *span, generation.attention.grid));
  pair.bin_mask = binarize(pair.cat_map, tau);
  pair.image = std::move(generation.image);
  pair.polarity = Polarity::kPositive;
  pair.target = category;
  pair.category = category;
  return pair;
}

PseudoPair make_negative_pair(Generation generation, const std::string& target,
                              const std::string& category) {
  PseudoPair pair;
  pair.cat_map = RealGrid(generation.attention.grid, 0.0);
  pair.bin_mask = Mask(generation.attention.grid, 0);
  pair.image = std::move(generation.image);
  pair.polarity = Polarity::kNegative;
  pair.target = target;
  pair.category = category;
  return pair;
}

std::size_t SynthesisResult::count(Polarity polarity) const {
  return static_cast<std::size_t>(std::count_if(
      pairs.begin(), pairs.end(), [&](const PseudoPair& p) { return p.polarity == polarity; }));
}

std::vector<std::size_t> round_robin_counts(std::size_t total, std::size_t m) {
  std::vector<std::size_t> out(m, 0);
  for (std::size_t i = 0; i < m; ++i) out[i] = total / m + (i < total % m ? 1 : 0);
  return out;
}

SynthesisResult synthesize_dataset(const CategorySpec& spec, const PromptBundle& bundle,
                                   GeneratorBackend& backend, std::size_t n_pos,
                                   std::size_t n_neg_total, std::uint64_t seed,
                                   const SynthesisOptions& options) {
  spec.validate();
  struct Job {
    Polarity polarity;
    std::string category;
    std::size_t index;
    std::string prompt;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  if (n_pos > 0 && bundle.positive_prompts.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "prompt bundle has no positive prompts");
  }
  for (std::size_t i = 0; i < n_pos; ++i) {
    jobs.push_back({Polarity::kPositive, spec.name, i,
                    bundle.positive_prompts[i % bundle.positive_prompts.size()],
                    mix_seed(mix_seed(seed, "positive"), i)});
  }
  if (!spec.negatives.empty()) {
    std::vector<std::size_t> used(spec.negatives.size(), 0);
    for (std::size_t i = 0; i < n_neg_total; ++i) {
      const std::size_t which = i % spec.negatives.size();
      const std::string& neg = spec.negatives[which];
      auto it = bundle.negative_prompts.find(neg);
      if (it == bundle.negative_prompts.end() || it->second.empty()) {
        throw Error(ErrorKind::kInvalidArgument, "prompt bundle has no prompts for '" + neg + "'");
      }
      const std::string& prompt = it->second[used[which]++ % it->second.size()];
      jobs.push_back({Polarity::kNegative, neg, i, prompt,
                      mix_seed(mix_seed(seed, "negative"), i)});
    }
  }

  const auto caps = backend.capabilities();
  const auto subset = options.block_subset ? options.block_subset : caps.attention_blocks;

  std::vector<std::optional<PseudoPair>> built(jobs.size());
  std::vector<std::string> errors(jobs.size());
  auto run = [&](std::size_t j) {
    const Job& job = jobs[j];
    try {
      Generation gen = backend.generate(job.prompt, job.seed);
      PseudoPair pair = job.polarity == Polarity::kPositive
                            ? make_positive_pair(std::move(gen), job.category, subset,
                                                 options.bin_threshold)
                            : make_negative_pair(std::move(gen), spec.name, job.category);
      pair.prompt = job.prompt;
      pair.seed = job.seed;
      pair.index = job.index;
      built[j] = std::move(pair);
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  };
  const auto count = static_cast<std::ptrdiff_t>(jobs.size());
  if (caps.concurrent_generate) {
    const int threads = options.jobs > 0 ? options.jobs : 0;
    if (threads > 0) {
#pragma omp parallel for schedule(dynamic) num_threads(threads)
      for (std::ptrdiff_t j = 0; j < count; ++j) run(static_cast<std::size_t>(j));
    } else {
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t j = 0; j < count; ++j) run(static_cast<std::size_t>(j));
    }
  } else {
    for (std::ptrdiff_t j = 0; j < count; ++j) run(static_cast<std::size_t>(j));
  }

  SynthesisResult result;
  result.requested = jobs.size();
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (built[j]) {
      result.pairs.push_back(std::move(*built[j]));
    } else {
      result.failures.push_back(
          {jobs[j].polarity, jobs[j].category, jobs[j].index, jobs[j].prompt, errors[j]});
    }
  }
  if (result.requested > 0 &&
      static_cast<double>(result.failures.size()) >
          options.max_failure_fraction * static_cast<double>(result.requested)) {
    throw Error(ErrorKind::kDatasetSynthesis,
                std::to_string(result.failures.size()) + " of " +
                    std::to_string(result.requested) + " images failed for '" + spec.name +
                    "'; first error: " + result.failures.front().message);
  }
  return result;
}

std::vector<std::uint32_t> encode_rle(const Mask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (auto v : mask.values()) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      runs.push_back(length);
      current = bit;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

Mask decode_rle(const std::vector<std::uint32_t>& runs, GridShape shape) {
  Mask out(shape, 0);
  std::size_t pos = 0;
  std::uint8_t bit = 0;
  for (auto run : runs) {
    if (pos + run > out.size()) throw Error(ErrorKind::kParse, "mask RLE overruns grid");
    std::fill_n(out.values().begin() + static_cast<std::ptrdiff_t>(pos), run, bit);
    pos += run;
    bit ^= 1;
  }
  if (pos != out.size()) throw Error(ErrorKind::kParse, "mask RLE does not cover grid");
  return out;
}

nlohmann::json pair_sidecar(const PseudoPair& pair, const std::string& config_hash) {
  return nlohmann::json{
      {"target", pair.target},
      {"category", pair.category},
      {"polarity", std::string(to_string(pair.polarity))},
      {"prompt", pair.prompt},
      {"seed", pair.seed},
      {"index", pair.index},
      {"grid", {pair.bin_mask.rows(), pair.bin_mask.cols()}},
      {"mask_rle", encode_rle(pair.bin_mask)},
      {"cat_map", pair.cat_map.storage()},
      {"config_hash", config_hash},
  };
}

void write_pair(const fs::path& dir, const PseudoPair& pair, const std::string& config_hash) {
  const fs::path base = dir / std::string(to_string(pair.polarity));
  fs::create_directories(base);
  const std::string stem = std::to_string(pair.index);
  write_png(base / (stem + ".png"), pair.image);
  std::ofstream out(base / (stem + ".json"));
  if (!out) throw Error(ErrorKind::kIo, "cannot write sidecar in " + base.string());
  out << pair_sidecar(pair, config_hash).dump(2) << '\n';
}

std::vector<PseudoPair> read_pairs(const fs::path& dir) {
  std::vector<PseudoPair> out;
  for (Polarity polarity : {Polarity::kPositive, Polarity::kNegative}) {
    const fs::path base = dir / std::string(to_string(polarity));
    if (!fs::is_directory(base)) continue;
    std::map<std::size_t, fs::path> sidecars;
    for (const auto& entry : fs::directory_iterator(base)) {
      if (entry.path().extension() != ".json") continue;
      sidecars[std::stoul(entry.path().stem().string())] = entry.path();
    }
    for (const auto& [index, path] : sidecars) {
      std::ifstream in(path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
      }
      PseudoPair pair;
      pair.target = j.at("target").get<std::string>();
      pair.category = j.at("category").get<std::string>();
      pair.polarity = polarity_from_string(j.at("polarity").get<std::string>());
      pair.prompt = j.at("prompt").get<std::string>();
      pair.seed = j.at("seed").get<std::uint64_t>();
      pair.index = index;
      const GridShape grid{j.at("grid").at(0).get<std::size_t>(),
                           j.at("grid").at(1).get<std::size_t>()};
      pair.bin_mask = decode_rle(j.at("mask_rle").get<std::vector<std::uint32_t>>(), grid);
      if (auto it = j.find("cat_map"); it != j.end() && !it->empty()) {
        pair.cat_map = RealGrid(grid.rows, grid.cols, it->get<std::vector<double>>());
      } else {
        pair.cat_map = RealGrid(grid, 0.0);
        for (std::size_t i = 0; i < grid.area(); ++i) {
          pair.cat_map.values()[i] = pair.bin_mask.values()[i];
        }
      }
      pair.image = read_image(fs::path(path).replace_extension(".png"));
      pair.validate();
      out.push_back(std::move(pair));
    }
  }
  return out;
}

}  // namespace finecount
