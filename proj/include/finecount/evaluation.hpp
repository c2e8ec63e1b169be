#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace finecount {

inline constexpr std::string_view kOtherSubcategory = "other";

struct PointLabel {
  double x = 0.0;
  double y = 0.0;
  std::string subcategory;
};

struct AnnotatedImage {
  std::string id;
  std::filesystem::path image_path;
  std::string parent;
  std::vector<PointLabel> labels;

  // Ground-truth count per subcategory present in the image.
  std::map<std::string, std::size_t> counts() const;
};

enum class LoadMode { kStrict, kLenient };

struct LoadIssue {
  std::string id;
  std::string message;
};

struct LoadedDataset {
  std::vector<AnnotatedImage> images;
  std::vector<LoadIssue> issues;
  std::vector<std::string> warnings;
};

inline constexpr std::string_view kAnnotationFile = "annotations.json";
inline constexpr std::string_view kImageDir = "images";

// Reads <root>/annotations.json:
//   {"<image file>": {"parent": str, "points": [{"x": f, "y": f, "sub": str}, ...]}}
// with images under <root>/images/. Strict mode throws on the first bad
// entry; lenient mode skips it and records a LoadIssue. Images are returned
// sorted by id.
LoadedDataset load_dataset(const std::filesystem::path& root, LoadMode mode = LoadMode::kStrict);

// Converts FSC147-style annotations ({"<img>": {"points": [[x, y], ...]}})
// and an image -> class listing ("<img>\t<class>" per line) into the
// annotation schema above, with every point labelled by the image's class
// and the class doubling as parent.
nlohmann::json convert_fsc147_annotations(const nlohmann::json& fsc, std::string_view image_classes);

struct EvalRecord {
  std::string image_id;
  std::string subcategory;
  std::string parent;
  double y = 0.0;
  double y_hat = 0.0;
};

enum class ErrorFn { kAbs, kSquared, kRelAbs };
// kPerSubcategory: sqrt of each subcategory's mean squared error, then averaged.
// kSqrtOfAverage: average of per-subcategory mean squared errors, then sqrt.
enum class RmseMode { kPerSubcategory, kSqrtOfAverage };
// What RELABS does with y = 0 and y_hat != 0: throw, or divide by max(y, 1).
enum class ZeroTruthPolicy { kStrict, kLenient };

struct MetricOptions {
  RmseMode rmse_mode = RmseMode::kPerSubcategory;
  ZeroTruthPolicy zero_truth = ZeroTruthPolicy::kStrict;
};

struct MetricValue {
  double value = 0.0;
  std::size_t subcategories = 0;
  std::size_t lenient_substitutions = 0;
};

// (1/C) sum_c (1/|I_c|) sum_{i in I_c} E(y_i, y_hat_i): every subcategory
// weighs the same regardless of how many images contain it.
MetricValue evaluate_metric(std::span<const EvalRecord> records, ErrorFn error_fn,
                            const MetricOptions& options = {});
double metric(std::span<const EvalRecord> records, ErrorFn error_fn,
              const MetricOptions& options = {});

struct MetricSummary {
  double mae = 0.0;
  double rmse = 0.0;
  double mrae = 0.0;
  std::size_t subcategories = 0;
  std::size_t records = 0;
  std::size_t lenient_substitutions = 0;
};

MetricSummary summarize_metrics(std::span<const EvalRecord> records, const MetricOptions& options);

struct RunSummary {
  std::string label;
  MetricSummary overall;
  std::map<std::string, MetricSummary> per_parent;
  std::map<std::string, MetricSummary> per_subcategory;
  std::vector<EvalRecord> records;
};

RunSummary summarize_run(std::string label, std::vector<EvalRecord> records,
                         const MetricOptions& options);

struct SweepPoint {
  std::size_t synthetic_images = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double mrae = 0.0;
};

struct Report {
  RunSummary specialized;
  std::optional<RunSummary> baseline;
  std::vector<std::string> skipped_subcategories;
  std::vector<SweepPoint> sweep;
  MetricOptions options;
  std::string config_hash;
};

struct BenchmarkPipeline {
  std::string label;
  // False for subcategories the pipeline cannot count (e.g. no embedding).
  std::function<bool(const std::string& subcategory)> supports;
  // Must be safe to call concurrently.
  std::function<double(const AnnotatedImage& image, const std::string& subcategory)> count;
};

struct BenchmarkOptions {
  MetricOptions metric;
  bool include_other = false;
  int jobs = 0;
};

// Builds one record per (image, subcategory present in the image) that the
// specialised pipeline supports; the baseline, when given, is scored on the
// same records.
Report run_benchmark(const std::vector<AnnotatedImage>& dataset,
                     const BenchmarkPipeline& specialized,
                     const std::optional<BenchmarkPipeline>& baseline,
                     const BenchmarkOptions& options = {});

nlohmann::json report_to_json(const Report& report);
Report report_from_json(const nlohmann::json& j);
std::string render_markdown(const Report& report);

// Writes report.json, report.md and, when plots is set, per-subcategory MAE
// bars (mae_by_subcategory.png) and the sweep curve (mae_vs_images.png).
void write_report(const Report& report, const std::filesystem::path& dir, bool plots = true);

std::string_view to_string(RmseMode mode);
std::string_view to_string(ZeroTruthPolicy policy);
RmseMode rmse_mode_from_string(std::string_view text);
ZeroTruthPolicy zero_truth_from_string(std::string_view text);

}  // namespace finecount
