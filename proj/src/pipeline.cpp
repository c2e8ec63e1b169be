#include "finecount/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"
#include "finecount/image_io.hpp"
#include "finecount/pipe_generator.hpp"

namespace finecount {

namespace fs = std::filesystem;

namespace {

template <typename T>
T option(const nlohmann::json& options, const char* key, T fallback) {
  auto it = options.find(key);
  if (it == options.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("backend option '") + key + "': " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void record_config(const RunConfig& cfg) {
  nlohmann::json j = cfg;
  j["config_hash"] = config_hash(cfg);
  write_json(ArtifactPaths{cfg.output_root}.config(), j);
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

std::unique_ptr<GeneratorBackend> make_generator(const BackendSelection& sel) {
  const auto& o = sel.options;
  if (sel.kind == "mock_shapes") {
    mock::MockShapesOptions opts;
    opts.image_size = option(o, "image_size", opts.image_size);
    opts.patch = option(o, "patch", opts.patch);
    opts.heads = option(o, "heads", opts.heads);
    return std::make_unique<mock::MockShapesGenerator>(mock::ShapePalette::standard(), opts);
  }
  if (sel.kind == "pipe") {
    auto argv = option(o, "command", std::vector<std::string>{});
    if (argv.empty()) throw Error(ErrorKind::kInvalidArgument, "pipe generator needs a command");
    GeneratorCapabilities caps;
    caps.id = option(o, "id", std::string("pipe"));
    caps.image_height = option(o, "image_height", std::size_t{0});
    caps.image_width = option(o, "image_width", std::size_t{0});
    caps.steps = option(o, "steps", 0);
    caps.captured_blocks = option(o, "captured_blocks", std::vector<int>{});
    if (o.contains("attention_blocks")) caps.attention_blocks = o["attention_blocks"].get<std::vector<int>>();
    caps.concurrent_generate = option(o, "concurrent", false);
    return std::make_unique<PipeGenerator>(std::move(argv), std::move(caps));
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown generator kind '" + sel.kind + "'");
}

std::unique_ptr<SegmenterBackend> make_segmenter(const BackendSelection& sel) {
  if (sel.kind == "toy") {
    ToySegmenterOptions opts;
    opts.patch = option(sel.options, "patch", opts.patch);
    opts.seed = option(sel.options, "seed", opts.seed);
    opts.logit_scale = option(sel.options, "logit_scale", opts.logit_scale);
    opts.hue_sigma_deg = option(sel.options, "hue_sigma_deg", opts.hue_sigma_deg);
    return std::make_unique<ToySegmenter>(opts);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown segmenter kind '" + sel.kind + "'");
}

std::unique_ptr<CounterBackend> make_counter(const BackendSelection& sel) {
  if (sel.kind == "toy_shapes") {
    ToyShapeCounterOptions opts;
    const auto kind = option(sel.options, "kind", std::string("points"));
    if (kind == "points") opts.kind = CountKind::kPoints;
    else if (kind == "density") opts.kind = CountKind::kDensity;
    else throw Error(ErrorKind::kInvalidArgument, "toy_shapes kind must be points or density");
    opts.foreground_threshold = option(sel.options, "threshold", opts.foreground_threshold);
    opts.min_component = option(sel.options, "min_component", opts.min_component);
    opts.density_sigma = option(sel.options, "sigma", opts.density_sigma);
    return std::make_unique<ToyShapeCounter>(opts);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown counter kind '" + sel.kind + "'");
}

std::unique_ptr<NegativeSuggester> make_suggester(const BackendSelection& sel) {
  if (sel.kind == "static") {
    if (sel.options.contains("by_category")) {
      return std::make_unique<StaticSuggester>(
          sel.options["by_category"].get<std::map<std::string, std::vector<std::string>>>());
    }
    return std::make_unique<StaticSuggester>(option(sel.options, "negatives", std::vector<std::string>{}));
  }
  if (sel.kind == "http") return std::make_unique<HttpSuggester>(HttpSuggester::from_environment());
  throw Error(ErrorKind::kInvalidArgument, "unknown suggester kind '" + sel.kind + "'");
}

fs::path ArtifactPaths::synth_dir(std::string_view category) const {
  return root / "synth" / category_slug(category);
}
fs::path ArtifactPaths::synth_manifest(std::string_view category) const {
  return synth_dir(category) / "manifest.json";
}
fs::path ArtifactPaths::concept_file(std::string_view category) const {
  return root / "concepts" / (category_slug(category) + ".json");
}
fs::path ArtifactPaths::training_log(std::string_view category) const {
  return root / "logs" / (category_slug(category) + ".csv");
}

TuningConfig tuning_for(const RunConfig& cfg, const std::string& category) {
  TuningConfig t = cfg.tuning;
  t.seed = mix_seed(mix_seed(cfg.seed, "tune"), normalize_category_key(category));
  return t;
}

std::vector<SynthSummary> run_synth(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const ArtifactPaths paths{cfg.output_root};
  const std::string hash = config_hash(cfg);
  record_config(cfg);
  auto generator = make_generator(cfg.generator);
  std::unique_ptr<NegativeSuggester> suggester;

  std::vector<SynthSummary> out;
  for (const auto& category : cfg.categories) {
    NegativeSuggester* llm = nullptr;
    if (category.negative_source == NegativeSource::kLlmGenerated) {
      if (!suggester) suggester = make_suggester(cfg.suggester);
      llm = suggester.get();
    }
    const CategorySpec spec = source_negatives(category, cfg.llm_negatives, llm);
    const std::uint64_t seed = mix_seed(cfg.seed, normalize_category_key(spec.name));
    const std::size_t per_negative =
        spec.negatives.empty() ? 0 : (cfg.negatives + spec.negatives.size() - 1) / spec.negatives.size();
    const int n_prompts = static_cast<int>(std::max<std::size_t>({cfg.positives, per_negative, 1}));
    const PromptBundle bundle = expand_prompts(spec, n_prompts, seed);

    SynthesisOptions opts;
    opts.bin_threshold = cfg.tuning.bin_threshold;
    opts.block_subset = cfg.block_subset;
    opts.jobs = cfg.jobs;
    const std::size_t n_neg = spec.negatives.empty() ? 0 : cfg.negatives;
    SynthesisResult result = synthesize_dataset(spec, bundle, *generator, cfg.positives, n_neg, seed, opts);

    const fs::path dir = paths.synth_dir(spec.name);
    fs::remove_all(dir);
    for (const auto& pair : result.pairs) write_pair(dir, pair, hash);
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : result.failures) {
      failures.push_back({{"polarity", std::string(to_string(f.polarity))},
                          {"category", f.category},
                          {"index", f.index},
                          {"prompt", f.prompt},
                          {"message", f.message}});
    }
    SynthSummary summary{spec.name, spec, result.count(Polarity::kPositive),
                         result.count(Polarity::kNegative), result.failures.size()};
    write_json(paths.synth_manifest(spec.name), {{"spec", spec},
                                                 {"positives", summary.positives},
                                                 {"negatives", summary.negatives},
                                                 {"requested", result.requested},
                                                 {"failures", failures},
                                                 {"config_hash", hash}});
    if (log) {
      *log << spec.name << ": " << summary.positives << " positive, " << summary.negatives
           << " negative, " << summary.failures << " failed";
      if (!spec.negatives.empty()) {
        *log << " (negatives:";
        for (const auto& n : spec.negatives) *log << ' ' << n << ';';
        *log << ')';
      }
      *log << '\n';
    }
    out.push_back(std::move(summary));
  }
  return out;
}

ConceptEmbedding tune_on_subset(const CategorySpec& spec, const std::vector<PseudoPair>& pairs,
                                std::size_t n_pos, std::size_t n_neg,
                                const SegmenterBackend& segmenter, const TuningConfig& cfg) {
  std::vector<PseudoPair> subset;
  std::size_t pos = 0, neg = 0;
  for (const auto& p : pairs) {
    if (p.polarity == Polarity::kPositive && pos < n_pos) {
      subset.push_back(p);
      ++pos;
    } else if (p.polarity == Polarity::kNegative && neg < n_neg) {
      subset.push_back(p);
      ++neg;
    }
  }
  if (subset.empty()) {
    ConceptEmbedding c;
    c.category = spec.name;
    c.init = cfg.init;
    c.z = initial_embedding(spec, segmenter, cfg.init, cfg.seed);
    return c;
  }
  return tune(spec, subset, segmenter, cfg);
}

std::vector<ConceptEmbedding> run_tune(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const ArtifactPaths paths{cfg.output_root};
  const std::string hash = config_hash(cfg);
  auto segmenter = make_segmenter(cfg.segmenter);

  std::vector<ConceptEmbedding> out;
  for (const auto& category : cfg.categories) {
    const fs::path dir = paths.synth_dir(category.name);
    if (!fs::exists(paths.synth_manifest(category.name))) {
      throw Error(ErrorKind::kIo, "no synthetic data for '" + category.name + "' under " +
                                      dir.string() + "; run the synth command first");
    }
    const CategorySpec spec = read_json(paths.synth_manifest(category.name)).at("spec").get<CategorySpec>();
    const std::vector<PseudoPair> pairs = read_pairs(dir);
    ConceptEmbedding embedding = tune(spec, pairs, *segmenter, tuning_for(cfg, spec.name));

    nlohmann::json j = concept_to_json(embedding);
    j["config_hash"] = hash;
    j["segmenter"] = segmenter->id();
    j[kTimestampField] = utc_timestamp();
    write_json(paths.concept_file(spec.name), j);
    write_training_log(paths.training_log(spec.name), embedding);
    if (log) {
      *log << spec.name << ": selected epoch " << embedding.selected_epoch << " of "
           << embedding.history.size() << ", val loss "
           << embedding.history.at(embedding.selected_epoch - 1).val_loss << " (initial "
           << embedding.initial_val_loss << ")\n";
    }
    out.push_back(std::move(embedding));
  }
  return out;
}

ConceptEmbedding load_concept(const fs::path& path) { return concept_from_json(read_json(path)); }

CategorySpec spec_for(const RunConfig& cfg, const std::string& category,
                      const std::optional<std::string>& parent) {
  const std::string key = normalize_category_key(category);
  for (const auto& c : cfg.categories) {
    if (normalize_category_key(c.name) == key) return c;
  }
  CategorySpec spec;
  spec.name = category;
  spec.parent = parent;
  return spec;
}

std::vector<CountOutput> run_count(const RunConfig& cfg, const std::string& category,
                                   const fs::path& input, bool overlays, std::ostream* log) {
  const ArtifactPaths paths{cfg.output_root};
  const fs::path concept_path = paths.concept_file(category);
  if (!fs::exists(concept_path)) {
    throw Error(ErrorKind::kIo, "no concept file for '" + category + "' at " +
                                    concept_path.string() + "; run the tune command first");
  }
  const ConceptEmbedding embedding = load_concept(concept_path);
  const CategorySpec spec = spec_for(cfg, category);
  auto counter = make_counter(cfg.counter);
  auto segmenter = make_segmenter(cfg.segmenter);

  std::vector<fs::path> images;
  if (fs::is_directory(input)) {
    for (const auto& entry : fs::directory_iterator(input)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) images.push_back(entry.path());
    }
    std::sort(images.begin(), images.end());
  } else if (fs::is_regular_file(input)) {
    images.push_back(input);
  } else {
    throw Error(ErrorKind::kIo, "no such image or directory: " + input.string());
  }

  std::vector<CountOutput> out;
  const std::string hash = config_hash(cfg);
  for (const auto& path : images) {
    const RgbImage image = read_image(path);
    FineGrainedCount result = count_fine_grained(image, spec, embedding, *counter, *segmenter,
                                                 default_broad_prompt(spec), cfg.point_tau);
    nlohmann::json j = diagnostics_to_json(result.diagnostics);
    j["image"] = path.filename().string();
    j["category"] = spec.name;
    j["config_hash"] = hash;
    const std::string stem = path.stem().string();
    write_json(paths.count_dir() / (stem + ".json"), j);
    if (overlays) {
      write_png(paths.count_dir() / (stem + "_overlay.png"),
                render_overlay(image, result.mask, result.specialized));
    }
    if (log) *log << path.filename().string() << ": " << result.count << '\n';
    out.push_back({path, std::move(result)});
  }
  return out;
}

namespace {

using ConceptMap = std::map<std::string, ConceptEmbedding>;

Report benchmark_with(const RunConfig& cfg, const std::vector<AnnotatedImage>& images,
                      const ConceptMap& concepts, bool baseline) {
  auto counter = make_counter(cfg.counter);
  auto segmenter = make_segmenter(cfg.segmenter);

  BenchmarkPipeline specialized;
  specialized.label = "specialized";
  specialized.supports = [&](const std::string& sub) {
    return concepts.count(normalize_category_key(sub)) > 0;
  };
  specialized.count = [&](const AnnotatedImage& img, const std::string& sub) {
    const CategorySpec spec = spec_for(cfg, sub, img.parent);
    const RgbImage image = read_image(img.image_path);
    return count_fine_grained(image, spec, concepts.at(normalize_category_key(sub)), *counter,
                              *segmenter, img.parent, cfg.point_tau)
        .count;
  };
  std::optional<BenchmarkPipeline> base;
  if (baseline) {
    base = BenchmarkPipeline{};
    base->label = "baseline";
    base->count = [&](const AnnotatedImage& img, const std::string&) {
      return extract_count(counter->count(read_image(img.image_path), img.parent));
    };
  }
  BenchmarkOptions opts;
  opts.metric = cfg.metric;
  opts.include_other = cfg.include_other;
  opts.jobs = cfg.jobs;
  Report report = run_benchmark(images, specialized, base, opts);
  report.config_hash = config_hash(cfg);
  return report;
}

LoadedDataset load_for(const RunConfig& cfg, const fs::path& root, std::ostream* log) {
  LoadedDataset data = load_dataset(root, cfg.strict ? LoadMode::kStrict : LoadMode::kLenient);
  if (log) {
    for (const auto& w : data.warnings) *log << "warning: " << w << '\n';
    for (const auto& issue : data.issues) *log << "skipped " << issue.id << ": " << issue.message << '\n';
  }
  return data;
}

ConceptMap stored_concepts(const RunConfig& cfg, const std::vector<AnnotatedImage>& images) {
  const ArtifactPaths paths{cfg.output_root};
  ConceptMap concepts;
  for (const auto& img : images) {
    for (const auto& [sub, n] : img.counts()) {
      const std::string key = normalize_category_key(sub);
      if (concepts.count(key)) continue;
      const fs::path p = paths.concept_file(sub);
      if (fs::exists(p)) concepts.emplace(key, load_concept(p));
    }
  }
  return concepts;
}

}  // namespace

Report run_eval(const RunConfig& cfg, const fs::path& dataset_root, const EvalOptions& options,
                std::ostream* log) {
  const LoadedDataset data = load_for(cfg, dataset_root, log);
  const ConceptMap concepts = stored_concepts(cfg, data.images);
  Report report = benchmark_with(cfg, data.images, concepts, options.baseline);
  write_report(report, ArtifactPaths{cfg.output_root}.eval_dir());
  if (log) {
    *log << "specialized MAE " << report.specialized.overall.mae << ", RMSE "
         << report.specialized.overall.rmse << ", MRAE " << report.specialized.overall.mrae;
    if (report.baseline) *log << "; baseline MAE " << report.baseline->overall.mae;
    *log << " over " << report.specialized.overall.subcategories << " subcategories\n";
    for (const auto& s : report.skipped_subcategories) *log << "skipped (no concept): " << s << '\n';
  }
  return report;
}

std::vector<SweepPoint> run_sweep(const RunConfig& cfg, const fs::path& dataset_root,
                                  std::ostream* log) {
  const ArtifactPaths paths{cfg.output_root};
  const LoadedDataset data = load_for(cfg, dataset_root, log);
  auto segmenter = make_segmenter(cfg.segmenter);

  std::map<std::string, std::pair<CategorySpec, std::vector<PseudoPair>>> sources;
  for (const auto& category : cfg.categories) {
    if (!fs::exists(paths.synth_manifest(category.name))) {
      throw Error(ErrorKind::kIo, "sweep needs synthetic data for '" + category.name +
                                      "'; run the synth command first");
    }
    sources[normalize_category_key(category.name)] = {
        read_json(paths.synth_manifest(category.name)).at("spec").get<CategorySpec>(),
        read_pairs(paths.synth_dir(category.name))};
  }

  std::vector<SweepPoint> out;
  for (std::size_t n : cfg.sweep) {
    ConceptMap concepts;
    for (const auto& [key, source] : sources) {
      const auto& [spec, pairs] = source;
      const std::size_t n_neg = spec.negatives.empty() ? 0 : n / 2;
      const std::size_t n_pos = n - n_neg;
      concepts.emplace(key, tune_on_subset(spec, pairs, n_pos, n_neg, *segmenter,
                                           tuning_for(cfg, spec.name)));
    }
    const Report r = benchmark_with(cfg, data.images, concepts, false);
    out.push_back({n, r.specialized.overall.mae, r.specialized.overall.rmse, r.specialized.overall.mrae});
    if (log) *log << "sweep " << n << " pairs: MAE " << out.back().mae << '\n';
  }
  return out;
}

Report run_report(const RunConfig& cfg, const fs::path& dataset_root, std::ostream* log) {
  const ArtifactPaths paths{cfg.output_root};
  const fs::path json_path = paths.eval_dir() / "report.json";
  Report report = fs::exists(json_path) ? report_from_json(read_json(json_path))
                                        : run_eval(cfg, dataset_root, {}, log);
  if (!cfg.sweep.empty()) report.sweep = run_sweep(cfg, dataset_root, log);
  write_report(report, paths.eval_dir());
  if (log) *log << "wrote " << (paths.eval_dir() / "report.md").string() << '\n';
  return report;
}

void write_toy_dataset(const fs::path& root, const mock::ShapePalette& palette,
                       const ToyDatasetOptions& options) {
  if (options.min_classes < 1 || options.max_classes < options.min_classes ||
      options.max_classes > palette.size() || options.max_per_class < options.min_per_class) {
    throw Error(ErrorKind::kInvalidArgument, "inconsistent toy dataset options");
  }
  fs::create_directories(root / kImageDir);
  std::mt19937_64 rng(mix_seed(options.seed, "toy-dataset"));
  nlohmann::json annotations = nlohmann::json::object();
  for (std::size_t i = 0; i < options.images; ++i) {
    std::vector<std::size_t> order(palette.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_classes = std::uniform_int_distribution<std::size_t>(
        options.min_classes, options.max_classes)(rng);
    std::vector<std::size_t> counts(palette.size(), 0);
    for (std::size_t k = 0; k < n_classes; ++k) {
      counts[order[k]] = std::uniform_int_distribution<std::size_t>(options.min_per_class,
                                                                    options.max_per_class)(rng);
    }
    const mock::Scene scene = mock::render_scene(palette, counts, options.scene, rng);
    std::ostringstream id;
    id << "scene_" << std::setw(4) << std::setfill('0') << i << ".png";
    write_png(root / kImageDir / id.str(), scene.image);
    nlohmann::json points = nlohmann::json::array();
    for (const auto& s : scene.shapes) {
      points.push_back({{"x", s.cx}, {"y", s.cy}, {"sub", palette.at(s.class_index).name}});
    }
    annotations[id.str()] = {{"parent", palette.parent()}, {"points", points}};
  }
  write_json(root / kAnnotationFile, annotations);
}

}  // namespace finecount
