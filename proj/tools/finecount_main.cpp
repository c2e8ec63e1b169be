#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "finecount/config.hpp"
#include "finecount/error.hpp"
#include "finecount/kernels.hpp"
#include "finecount/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace finecount;

// sysexits.h EX_TEMPFAIL: the caller may retry.
constexpr int kExitRetriable = 75;
constexpr int kExitFailure = 1;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<bool> strict;
  std::optional<std::string> out;
};

RunConfig resolve(const GlobalFlags& flags) {
  if (flags.config.empty()) throw Error(ErrorKind::kInvalidArgument, "--config is required");
  RunConfig cfg = load_config(flags.config);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.jobs) cfg.jobs = *flags.jobs;
  if (flags.strict) cfg.strict = *flags.strict;
  if (flags.out) cfg.output_root = *flags.out;
  cfg.validate();
  if (cfg.jobs > 0) kernels::set_max_threads(cfg.jobs);
  return cfg;
}

int report_error(const std::exception& e) {
  const Error* err = dynamic_cast<const Error*>(&e);
  std::cerr << "error";
  if (err) std::cerr << " [" << to_string(err->kind()) << "]";
  std::cerr << ": " << e.what() << '\n';
  if (err && err->retriable()) {
    std::cerr << "the failure is transient; retry later\n";
    return kExitRetriable;
  }
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained object counting: synthesise, tune, count, evaluate"};
  app.require_subcommand(1);
  GlobalFlags flags;
  app.add_option("--config", flags.config, "Run config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Override the config seed");
  app.add_option("--jobs", flags.jobs, "Worker threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
  app.add_flag("--strict,!--lenient", flags.strict, "Abort on the first malformed input");
  app.add_option("--out", flags.out, "Override the output root");

  auto* synth = app.add_subcommand("synth", "Generate pseudo-annotated positive and negative images");
  auto* tune = app.add_subcommand("tune", "Tune a concept embedding per category");

  auto* count = app.add_subcommand("count", "Count one category in an image or directory");
  std::string category;
  fs::path input;
  bool overlays = false;
  count->add_option("--category", category, "Category to count")->required();
  count->add_option("input", input, "Image file or directory")->required();
  count->add_flag("--overlay", overlays, "Also write mask overlays");

  auto* eval = app.add_subcommand("eval", "Benchmark on an annotated dataset");
  fs::path dataset;
  bool no_baseline = false;
  eval->add_option("dataset", dataset, "Dataset root (annotations.json + images/)")->required();
  eval->add_flag("--no-baseline", no_baseline, "Skip the broad-prompt baseline");

  auto* report = app.add_subcommand("report", "Render report.md and plots, running the sweep if configured");
  report->add_option("dataset", dataset, "Dataset root, needed when no eval exists or a sweep is configured");

  auto* toy = app.add_subcommand("toy-dataset", "Write a MockShapes test set in the annotation layout");
  fs::path toy_root;
  ToyDatasetOptions toy_opts;
  toy->add_option("root", toy_root, "Output directory")->required();
  toy->add_option("--images", toy_opts.images, "Number of scenes");
  toy->add_option("--dataset-seed", toy_opts.seed, "Scene seed");
  toy->add_option("--max-per-class", toy_opts.max_per_class, "Upper bound on shapes per class");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*toy) {
      write_toy_dataset(toy_root, mock::ShapePalette::standard(), toy_opts);
      std::cout << "wrote " << toy_opts.images << " scenes to " << toy_root.string() << '\n';
      return EXIT_SUCCESS;
    }
    const RunConfig cfg = resolve(flags);
    if (*synth) run_synth(cfg, &std::cout);
    if (*tune) run_tune(cfg, &std::cout);
    if (*count) run_count(cfg, category, input, overlays, &std::cout);
    if (*eval) run_eval(cfg, dataset, EvalOptions{!no_baseline, std::nullopt}, &std::cout);
    if (*report) run_report(cfg, dataset, &std::cout);
  } catch (const std::exception& e) {
    return report_error(e);
  }
  return EXIT_SUCCESS;
}
