#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "finecount/config.hpp"
#include "finecount/counting.hpp"
#include "finecount/evaluation.hpp"
#include "finecount/mock_shapes.hpp"
#include "finecount/segmenter.hpp"
#include "finecount/specializer.hpp"
#include "finecount/synthesis.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

// Backend factories keyed by BackendSelection::kind.
//   generator: "mock_shapes" {image_size, patch, heads}
//              "pipe" {command: [argv...], image_height, image_width, steps,
//                      captured_blocks, attention_blocks, concurrent}
//   segmenter: "toy" {patch, seed, logit_scale, hue_sigma_deg}
//   counter:   "toy_shapes" {kind: "points"|"density", threshold, min_component, sigma}
//   suggester: "static" {negatives: [..]} or {by_category: {name: [..]}}
//              "http" (endpoint and token from the environment)
std::unique_ptr<GeneratorBackend> make_generator(const BackendSelection& sel);
std::unique_ptr<SegmenterBackend> make_segmenter(const BackendSelection& sel);
std::unique_ptr<CounterBackend> make_counter(const BackendSelection& sel);
std::unique_ptr<NegativeSuggester> make_suggester(const BackendSelection& sel);

// Artifact layout under cfg.output_root.
struct ArtifactPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path synth_dir(std::string_view category) const;
  std::filesystem::path synth_manifest(std::string_view category) const;
  std::filesystem::path concept_file(std::string_view category) const;
  std::filesystem::path training_log(std::string_view category) const;
  std::filesystem::path count_dir() const { return root / "count"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }
};

// Fields excluded from artifact comparisons.
inline constexpr const char* kTimestampField = "created_at";

struct SynthSummary {
  std::string category;
  CategorySpec resolved;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t failures = 0;
};

// source_negatives -> expand_prompts -> synthesize_dataset -> files, per
// category. Existing synth output for a category is replaced.
std::vector<SynthSummary> run_synth(const RunConfig& cfg, std::ostream* log = nullptr);

// Reads each category's synthetic pairs and writes its concept file and CSV log.
std::vector<ConceptEmbedding> run_tune(const RunConfig& cfg, std::ostream* log = nullptr);

ConceptEmbedding load_concept(const std::filesystem::path& path);

// Spec for a category: the configured entry, or a bare spec with the given parent.
CategorySpec spec_for(const RunConfig& cfg, const std::string& category,
                      const std::optional<std::string>& parent = std::nullopt);

struct CountOutput {
  std::filesystem::path image;
  FineGrainedCount result;
};

// Counts category in every image (a file, or every PNG/JPEG in a
// directory); writes <count_dir>/<stem>.json and, optionally, an overlay.
std::vector<CountOutput> run_count(const RunConfig& cfg, const std::string& category,
                                   const std::filesystem::path& input, bool overlays,
                                   std::ostream* log = nullptr);

struct EvalOptions {
  bool baseline = true;
  // Subset of pairs per category used for tuning; nullopt means concept files.
  std::optional<std::size_t> synthetic_pairs;
};

// Benchmarks the specialised pipeline (and the broad-prompt baseline) on a
// dataset using the stored concept files.
Report run_eval(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                const EvalOptions& options = {}, std::ostream* log = nullptr);

// Re-tunes on the first n/2 positive and n/2 negative synthetic pairs for
// every n in cfg.sweep (n = 0 keeps the initial embedding) and evaluates
// each; results are not written to the concept store.
std::vector<SweepPoint> run_sweep(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                                  std::ostream* log = nullptr);

// Rewrites report.md and plots from eval/report.json, adding sweep results
// when cfg.sweep is set.
Report run_report(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                  std::ostream* log = nullptr);

// Tunes one category on an in-memory subset: the first n_pos positives and
// n_neg negatives of pairs. Zero pairs returns the untuned initial embedding.
ConceptEmbedding tune_on_subset(const CategorySpec& spec, const std::vector<PseudoPair>& pairs,
                                std::size_t n_pos, std::size_t n_neg,
                                const SegmenterBackend& segmenter, const TuningConfig& cfg);

TuningConfig tuning_for(const RunConfig& cfg, const std::string& category);

struct ToyDatasetOptions {
  std::size_t images = 50;
  std::size_t min_classes = 2;
  std::size_t max_classes = 4;
  std::size_t min_per_class = 1;
  std::size_t max_per_class = 5;
  std::uint64_t seed = 0;
  mock::SceneOptions scene;
};

// Writes MockShapes test scenes in the annotation layout: images/<id>.png
// plus annotations.json with one point per shape centre.
void write_toy_dataset(const std::filesystem::path& root, const mock::ShapePalette& palette,
                       const ToyDatasetOptions& options);

}  // namespace finecount
