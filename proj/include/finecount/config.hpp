#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "finecount/counting.hpp"
#include "finecount/evaluation.hpp"
#include "finecount/specializer.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount {

// A backend kind plus its free-form options object.
struct BackendSelection {
  std::string kind;
  nlohmann::json options = nlohmann::json::object();

  friend bool operator==(const BackendSelection&, const BackendSelection&) = default;
};

void to_json(nlohmann::json& j, const BackendSelection& b);

// Everything a run needs. Serialises to the config file schema documented
// in the README; unknown keys are rejected.
struct RunConfig {
  std::vector<CategorySpec> categories;

  BackendSelection generator{"mock_shapes"};
  BackendSelection segmenter{"toy"};
  BackendSelection counter{"toy_shapes"};
  BackendSelection suggester{"static"};

  // tuning.bin_threshold also drives synthesis; tuning.seed is derived from
  // seed per category and is not part of the schema.
  TuningConfig tuning;

  // Per category: positive images and negative images (spread over negatives).
  std::size_t positives = 100;
  std::size_t negatives = 100;
  // Negatives requested from the suggester for llm_generated categories.
  int llm_negatives = 5;
  std::optional<std::vector<int>> block_subset;

  double point_tau = kDefaultPointTau;
  MetricOptions metric;
  bool include_other = false;
  // Synthetic pair totals evaluated by the report sweep; empty disables it.
  std::vector<std::size_t> sweep;

  std::uint64_t seed = 0;
  int jobs = 0;
  bool strict = true;
  std::filesystem::path output_root = "runs/default";

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

RunConfig load_config(const std::filesystem::path& path);

// FNV-1a over the canonical JSON of the config with output_root and jobs
// removed, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace finecount
