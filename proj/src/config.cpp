#include "finecount/config.hpp"

#include <fstream>
#include <set>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"

namespace finecount {

void to_json(nlohmann::json& j, const BackendSelection& b) {
  j = {{"kind", b.kind}, {"options", b.options}};
}

namespace {

BackendSelection backend_from(const nlohmann::json& j, const char* what) {
  if (j.is_string()) return {j.get<std::string>(), nlohmann::json::object()};
  if (!j.is_object() || !j.contains("kind")) {
    throw Error(ErrorKind::kParse, std::string(what) + " must be a kind string or {kind, options}");
  }
  BackendSelection b{j.at("kind").get<std::string>(), j.value("options", nlohmann::json::object())};
  if (!b.options.is_object()) throw Error(ErrorKind::kParse, std::string(what) + ".options must be an object");
  return b;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "categories", "generator", "segmenter", "counter",  "suggester", "tuning",
      "positives",  "negatives", "llm_negatives", "block_subset", "point_tau", "rmse_mode",
      "zero_truth", "include_other", "sweep", "seed", "jobs", "strict", "output_root"};
  return keys;
}

}  // namespace

void RunConfig::validate() const {
  if (categories.empty()) throw Error(ErrorKind::kInvalidSpec, "config lists no categories");
  std::set<std::string> seen;
  for (const auto& c : categories) {
    c.validate();
    if (!seen.insert(normalize_category_key(c.name)).second) {
      throw Error(ErrorKind::kInvalidSpec, "category '" + c.name + "' listed twice");
    }
  }
  tuning.validate();
  if (positives == 0) throw Error(ErrorKind::kInvalidArgument, "positives must be >= 1");
  if (llm_negatives < 1) throw Error(ErrorKind::kInvalidArgument, "llm_negatives must be >= 1");
  if (!(point_tau >= 0.0 && point_tau <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "point_tau must lie in [0, 1]");
  }
  if (block_subset && block_subset->empty()) {
    throw Error(ErrorKind::kInvalidArgument, "block_subset must not be empty");
  }
  if (jobs < 0) throw Error(ErrorKind::kInvalidArgument, "jobs must be >= 0");
}

void to_json(nlohmann::json& j, const RunConfig& cfg) {
  nlohmann::json tuning = cfg.tuning;
  tuning.erase("seed");
  j = {{"categories", cfg.categories},
       {"generator", cfg.generator},
       {"segmenter", cfg.segmenter},
       {"counter", cfg.counter},
       {"suggester", cfg.suggester},
       {"tuning", tuning},
       {"positives", cfg.positives},
       {"negatives", cfg.negatives},
       {"llm_negatives", cfg.llm_negatives},
       {"block_subset", cfg.block_subset ? nlohmann::json(*cfg.block_subset) : nlohmann::json()},
       {"point_tau", cfg.point_tau},
       {"rmse_mode", std::string(to_string(cfg.metric.rmse_mode))},
       {"zero_truth", std::string(to_string(cfg.metric.zero_truth))},
       {"include_other", cfg.include_other},
       {"sweep", cfg.sweep},
       {"seed", cfg.seed},
       {"jobs", cfg.jobs},
       {"strict", cfg.strict},
       {"output_root", cfg.output_root.generic_string()}};
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
  if (!j.is_object()) throw Error(ErrorKind::kParse, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().count(key)) throw Error(ErrorKind::kParse, "unknown config key '" + key + "'");
  }
  cfg = RunConfig{};
  try {
    cfg.categories = j.at("categories").get<std::vector<CategorySpec>>();
    if (j.contains("generator")) cfg.generator = backend_from(j["generator"], "generator");
    if (j.contains("segmenter")) cfg.segmenter = backend_from(j["segmenter"], "segmenter");
    if (j.contains("counter")) cfg.counter = backend_from(j["counter"], "counter");
    if (j.contains("suggester")) cfg.suggester = backend_from(j["suggester"], "suggester");
    if (j.contains("tuning")) cfg.tuning = j["tuning"].get<TuningConfig>();
    cfg.positives = j.value("positives", cfg.positives);
    cfg.negatives = j.value("negatives", cfg.negatives);
    cfg.llm_negatives = j.value("llm_negatives", cfg.llm_negatives);
    if (auto it = j.find("block_subset"); it != j.end() && !it->is_null()) {
      cfg.block_subset = it->get<std::vector<int>>();
    }
    cfg.point_tau = j.value("point_tau", cfg.point_tau);
    if (j.contains("rmse_mode")) cfg.metric.rmse_mode = rmse_mode_from_string(j["rmse_mode"].get<std::string>());
    if (j.contains("zero_truth")) cfg.metric.zero_truth = zero_truth_from_string(j["zero_truth"].get<std::string>());
    cfg.include_other = j.value("include_other", cfg.include_other);
    cfg.sweep = j.value("sweep", cfg.sweep);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.jobs = j.value("jobs", cfg.jobs);
    cfg.strict = j.value("strict", cfg.strict);
    if (j.contains("output_root")) cfg.output_root = j["output_root"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("config: ") + e.what());
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  RunConfig cfg = j.get<RunConfig>();
  cfg.validate();
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("output_root");
  j.erase("jobs");
  // nlohmann objects are key-sorted, so dump() is canonical.
  return to_hex(fnv1a(j.dump()));
}

}  // namespace finecount
