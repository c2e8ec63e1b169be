#include "finecount/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "finecount/error.hpp"
#include "finecount/image_io.hpp"
#include "finecount/plot.hpp"

namespace finecount {

namespace fs = std::filesystem;

std::map<std::string, std::size_t> AnnotatedImage::counts() const {
  std::map<std::string, std::size_t> out;
  for (const auto& label : labels) ++out[label.subcategory];
  return out;
}

namespace {

AnnotatedImage parse_entry(const fs::path& root, const std::string& id, const nlohmann::json& e) {
  auto bad = [&](const std::string& msg) { return Error(ErrorKind::kParse, id + ": " + msg); };
  if (!e.is_object()) throw bad("entry is not an object");
  AnnotatedImage img;
  img.id = id;
  img.image_path = root / kImageDir / id;
  auto parent = e.find("parent");
  if (parent == e.end() || !parent->is_string() || parent->get<std::string>().empty()) {
    throw bad("missing parent category");
  }
  img.parent = parent->get<std::string>();
  auto points = e.find("points");
  if (points == e.end() || !points->is_array()) throw bad("missing points array");
  for (const auto& p : *points) {
    if (!p.is_object() || !p.contains("x") || !p.contains("y") || !p.contains("sub") ||
        !p["x"].is_number() || !p["y"].is_number() || !p["sub"].is_string()) {
      throw bad("point needs numeric x, y and string sub");
    }
    PointLabel label{p["x"].get<double>(), p["y"].get<double>(), p["sub"].get<std::string>()};
    if (label.subcategory.empty()) throw bad("point with empty subcategory");
    img.labels.push_back(std::move(label));
  }
  if (!fs::is_regular_file(img.image_path)) {
    throw Error(ErrorKind::kIo, id + ": missing image file " + img.image_path.string());
  }
  const GridShape dims = image_dimensions(img.image_path);
  for (const auto& label : img.labels) {
    if (label.x < 0 || label.y < 0 || label.x > static_cast<double>(dims.cols) ||
        label.y > static_cast<double>(dims.rows)) {
      std::ostringstream msg;
      msg << "point (" << label.x << ", " << label.y << ") outside " << dims.cols << "x"
          << dims.rows << " image";
      throw bad(msg.str());
    }
  }
  return img;
}

double error_value(const EvalRecord& r, ErrorFn fn, const MetricOptions& options,
                   std::size_t& substitutions) {
  if (!std::isfinite(r.y) || !std::isfinite(r.y_hat) || r.y < 0 || r.y_hat < 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "record " + r.image_id + "/" + r.subcategory + " has invalid counts");
  }
  const double diff = std::abs(r.y - r.y_hat);
  switch (fn) {
    case ErrorFn::kAbs: return diff;
    case ErrorFn::kSquared: return diff * diff;
    case ErrorFn::kRelAbs:
      if (r.y > 0) return diff / r.y;
      if (r.y_hat == 0) return 0.0;
      if (options.zero_truth == ZeroTruthPolicy::kStrict) {
        throw Error(ErrorKind::kInvalidArgument, "relative error undefined for " + r.image_id +
                                                     "/" + r.subcategory + " (y = 0)");
      }
      ++substitutions;
      return diff / std::max(r.y, 1.0);
  }
  return 0.0;
}

}  // namespace

LoadedDataset load_dataset(const fs::path& root, LoadMode mode) {
  const fs::path ann = root / kAnnotationFile;
  std::ifstream in(ann);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + ann.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, ann.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::kParse, ann.string() + ": top level must be an object");
  LoadedDataset out;
  if (j.empty()) out.warnings.push_back(ann.string() + " has no entries");
  for (const auto& [id, entry] : j.items()) {
    try {
      out.images.push_back(parse_entry(root, id, entry));
    } catch (const Error& e) {
      if (mode == LoadMode::kStrict) throw;
      out.issues.push_back({id, e.what()});
    }
  }
  std::sort(out.images.begin(), out.images.end(),
            [](const AnnotatedImage& a, const AnnotatedImage& b) { return a.id < b.id; });
  return out;
}

nlohmann::json convert_fsc147_annotations(const nlohmann::json& fsc, std::string_view image_classes) {
  std::map<std::string, std::string> classes;
  std::istringstream lines{std::string(image_classes)};
  for (std::string line; std::getline(lines, line);) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    std::string cls = line.substr(tab + 1);
    while (!cls.empty() && (cls.back() == '\r' || cls.back() == ' ')) cls.pop_back();
    classes[line.substr(0, tab)] = cls;
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [id, entry] : fsc.items()) {
    auto it = classes.find(id);
    if (it == classes.end()) throw Error(ErrorKind::kParse, id + ": no class listed");
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : entry.at("points")) {
      points.push_back({{"x", p.at(0).get<double>()}, {"y", p.at(1).get<double>()}, {"sub", it->second}});
    }
    out[id] = {{"parent", it->second}, {"points", points}};
  }
  return out;
}

MetricValue evaluate_metric(std::span<const EvalRecord> records, ErrorFn error_fn,
                            const MetricOptions& options) {
  if (records.empty()) throw Error(ErrorKind::kInvalidArgument, "metric over zero records");
  MetricValue out;
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : records) {
    groups[r.subcategory].push_back(error_value(r, error_fn, options, out.lenient_substitutions));
  }
  double acc = 0.0;
  for (auto& [sub, errors] : groups) {
    // Sorting makes the fold independent of record order.
    std::sort(errors.begin(), errors.end());
    double s = 0.0;
    for (double e : errors) s += e;
    double mean = s / static_cast<double>(errors.size());
    if (error_fn == ErrorFn::kSquared && options.rmse_mode == RmseMode::kPerSubcategory) {
      mean = std::sqrt(mean);
    }
    acc += mean;
  }
  out.subcategories = groups.size();
  out.value = acc / static_cast<double>(groups.size());
  if (error_fn == ErrorFn::kSquared && options.rmse_mode == RmseMode::kSqrtOfAverage) {
    out.value = std::sqrt(out.value);
  }
  return out;
}

double metric(std::span<const EvalRecord> records, ErrorFn error_fn, const MetricOptions& options) {
  return evaluate_metric(records, error_fn, options).value;
}

MetricSummary summarize_metrics(std::span<const EvalRecord> records, const MetricOptions& options) {
  MetricSummary s;
  s.records = records.size();
  if (records.empty()) return s;
  s.mae = metric(records, ErrorFn::kAbs, options);
  s.rmse = metric(records, ErrorFn::kSquared, options);
  const auto rel = evaluate_metric(records, ErrorFn::kRelAbs, options);
  s.mrae = rel.value;
  s.subcategories = rel.subcategories;
  s.lenient_substitutions = rel.lenient_substitutions;
  return s;
}

RunSummary summarize_run(std::string label, std::vector<EvalRecord> records,
                         const MetricOptions& options) {
  RunSummary run;
  run.label = std::move(label);
  run.overall = summarize_metrics(records, options);
  std::map<std::string, std::vector<EvalRecord>> by_parent, by_sub;
  for (const auto& r : records) {
    by_parent[r.parent].push_back(r);
    by_sub[r.subcategory].push_back(r);
  }
  for (const auto& [p, rs] : by_parent) run.per_parent[p] = summarize_metrics(rs, options);
  for (const auto& [c, rs] : by_sub) run.per_subcategory[c] = summarize_metrics(rs, options);
  run.records = std::move(records);
  return run;
}

Report run_benchmark(const std::vector<AnnotatedImage>& dataset,
                     const BenchmarkPipeline& specialized,
                     const std::optional<BenchmarkPipeline>& baseline,
                     const BenchmarkOptions& options) {
  struct Task {
    std::size_t image;
    std::string sub;
    double y;
  };
  std::vector<Task> tasks;
  std::set<std::string> skipped;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (const auto& [sub, n] : dataset[i].counts()) {
      if (!options.include_other && sub == kOtherSubcategory) continue;
      if (specialized.supports && !specialized.supports(sub)) {
        skipped.insert(sub);
        continue;
      }
      tasks.push_back({i, sub, static_cast<double>(n)});
    }
  }

  std::vector<double> spec_pred(tasks.size()), base_pred(tasks.size());
  std::vector<std::string> errors(tasks.size());
  const auto count = static_cast<std::ptrdiff_t>(tasks.size());
  auto run = [&](std::ptrdiff_t t) {
    const Task& task = tasks[t];
    try {
      spec_pred[t] = specialized.count(dataset[task.image], task.sub);
      if (baseline) base_pred[t] = baseline->count(dataset[task.image], task.sub);
    } catch (const std::exception& e) {
      errors[t] = dataset[task.image].id + "/" + task.sub + ": " + e.what();
    }
  };
  if (options.jobs > 0) {
#pragma omp parallel for schedule(dynamic) num_threads(options.jobs)
    for (std::ptrdiff_t t = 0; t < count; ++t) run(t);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t t = 0; t < count; ++t) run(t);
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(ErrorKind::kBackend, "benchmark failed at " + e);
  }

  auto records_from = [&](const std::vector<double>& preds) {
    std::vector<EvalRecord> out;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const auto& img = dataset[tasks[t].image];
      out.push_back({img.id, tasks[t].sub, img.parent, tasks[t].y, preds[t]});
    }
    return out;
  };
  Report report;
  report.options = options.metric;
  report.specialized = summarize_run(specialized.label, records_from(spec_pred), options.metric);
  if (baseline) {
    report.baseline = summarize_run(baseline->label, records_from(base_pred), options.metric);
  }
  report.skipped_subcategories.assign(skipped.begin(), skipped.end());
  return report;
}

std::string_view to_string(RmseMode mode) {
  return mode == RmseMode::kPerSubcategory ? "per_subcategory" : "sqrt_of_average";
}

std::string_view to_string(ZeroTruthPolicy policy) {
  return policy == ZeroTruthPolicy::kStrict ? "strict" : "lenient";
}

RmseMode rmse_mode_from_string(std::string_view text) {
  if (text == "per_subcategory") return RmseMode::kPerSubcategory;
  if (text == "sqrt_of_average") return RmseMode::kSqrtOfAverage;
  throw Error(ErrorKind::kParse, "unknown rmse mode '" + std::string(text) + "'");
}

ZeroTruthPolicy zero_truth_from_string(std::string_view text) {
  if (text == "strict") return ZeroTruthPolicy::kStrict;
  if (text == "lenient") return ZeroTruthPolicy::kLenient;
  throw Error(ErrorKind::kParse, "unknown zero-truth policy '" + std::string(text) + "'");
}

namespace {

nlohmann::json summary_json(const MetricSummary& s) {
  return {{"mae", s.mae},
          {"rmse", s.rmse},
          {"mrae", s.mrae},
          {"subcategories", s.subcategories},
          {"records", s.records},
          {"lenient_substitutions", s.lenient_substitutions}};
}

MetricSummary summary_from(const nlohmann::json& j) {
  return {j.at("mae").get<double>(),          j.at("rmse").get<double>(),
          j.at("mrae").get<double>(),         j.at("subcategories").get<std::size_t>(),
          j.at("records").get<std::size_t>(), j.value("lenient_substitutions", std::size_t{0})};
}

nlohmann::json run_json(const RunSummary& run) {
  nlohmann::json per_parent = nlohmann::json::object(), per_sub = nlohmann::json::object();
  for (const auto& [k, v] : run.per_parent) per_parent[k] = summary_json(v);
  for (const auto& [k, v] : run.per_subcategory) per_sub[k] = summary_json(v);
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : run.records) {
    records.push_back({{"image", r.image_id},
                       {"subcategory", r.subcategory},
                       {"parent", r.parent},
                       {"y", r.y},
                       {"y_hat", r.y_hat}});
  }
  return {{"label", run.label},
          {"overall", summary_json(run.overall)},
          {"per_parent", per_parent},
          {"per_subcategory", per_sub},
          {"records", records}};
}

RunSummary run_from(const nlohmann::json& j) {
  RunSummary run;
  run.label = j.at("label").get<std::string>();
  run.overall = summary_from(j.at("overall"));
  for (const auto& [k, v] : j.at("per_parent").items()) run.per_parent[k] = summary_from(v);
  for (const auto& [k, v] : j.at("per_subcategory").items()) run.per_subcategory[k] = summary_from(v);
  for (const auto& r : j.at("records")) {
    run.records.push_back({r.at("image").get<std::string>(), r.at("subcategory").get<std::string>(),
                           r.at("parent").get<std::string>(), r.at("y").get<double>(),
                           r.at("y_hat").get<double>()});
  }
  return run;
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

std::string signed_fmt(double v) { return (v >= 0 ? "+" : "") + fmt(v); }

}  // namespace

nlohmann::json report_to_json(const Report& report) {
  nlohmann::json j{{"specialized", run_json(report.specialized)},
                   {"skipped_subcategories", report.skipped_subcategories},
                   {"rmse_mode", std::string(to_string(report.options.rmse_mode))},
                   {"zero_truth", std::string(to_string(report.options.zero_truth))},
                   {"config_hash", report.config_hash}};
  if (report.baseline) {
    j["baseline"] = run_json(*report.baseline);
    const auto& s = report.specialized.overall;
    const auto& b = report.baseline->overall;
    j["deltas"] = {{"mae", s.mae - b.mae}, {"rmse", s.rmse - b.rmse}, {"mrae", s.mrae - b.mrae}};
  }
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& p : report.sweep) {
    sweep.push_back({{"synthetic_images", p.synthetic_images},
                     {"mae", p.mae},
                     {"rmse", p.rmse},
                     {"mrae", p.mrae}});
  }
  j["sweep"] = sweep;
  return j;
}

Report report_from_json(const nlohmann::json& j) {
  Report report;
  report.specialized = run_from(j.at("specialized"));
  if (j.contains("baseline")) report.baseline = run_from(j.at("baseline"));
  report.skipped_subcategories = j.value("skipped_subcategories", std::vector<std::string>{});
  report.options.rmse_mode = rmse_mode_from_string(j.value("rmse_mode", "per_subcategory"));
  report.options.zero_truth = zero_truth_from_string(j.value("zero_truth", "strict"));
  report.config_hash = j.value("config_hash", "");
  for (const auto& p : j.value("sweep", nlohmann::json::array())) {
    report.sweep.push_back({p.at("synthetic_images").get<std::size_t>(), p.at("mae").get<double>(),
                            p.at("rmse").get<double>(), p.at("mrae").get<double>()});
  }
  return report;
}

std::string render_markdown(const Report& report) {
  std::ostringstream md;
  md << "# Counting report\n\n";
  if (!report.config_hash.empty()) md << "Config hash: `" << report.config_hash << "`\n\n";
  md << "RMSE mode: " << to_string(report.options.rmse_mode)
     << "; zero-count MRAE policy: " << to_string(report.options.zero_truth) << "\n\n";

  auto row = [&](const std::string& name, const MetricSummary& s) {
    md << "| " << name << " | " << fmt(s.mae) << " | " << fmt(s.rmse) << " | " << fmt(s.mrae)
       << " | " << s.subcategories << " | " << s.records << " |\n";
  };
  auto table_header = [&](const char* first) {
    md << "| " << first << " | MAE | RMSE | MRAE | C | records |\n";
    md << "|---|---:|---:|---:|---:|---:|\n";
  };

  md << "## Overall\n\n";
  table_header("run");
  row(report.specialized.label, report.specialized.overall);
  if (report.baseline) {
    row(report.baseline->label, report.baseline->overall);
    const auto& s = report.specialized.overall;
    const auto& b = report.baseline->overall;
    md << "| delta | " << signed_fmt(s.mae - b.mae) << " | " << signed_fmt(s.rmse - b.rmse)
       << " | " << signed_fmt(s.mrae - b.mrae) << " | | |\n";
  }

  md << "\n## Per parent category (" << report.specialized.label << ")\n\n";
  table_header("parent");
  for (const auto& [p, s] : report.specialized.per_parent) row(p, s);

  md << "\n## Per subcategory\n\n";
  if (report.baseline) {
    md << "| subcategory | MAE | baseline MAE | delta | MRAE | baseline MRAE |\n";
    md << "|---|---:|---:|---:|---:|---:|\n";
    for (const auto& [c, s] : report.specialized.per_subcategory) {
      const auto it = report.baseline->per_subcategory.find(c);
      const MetricSummary b = it == report.baseline->per_subcategory.end() ? MetricSummary{} : it->second;
      md << "| " << c << " | " << fmt(s.mae) << " | " << fmt(b.mae) << " | "
         << signed_fmt(s.mae - b.mae) << " | " << fmt(s.mrae) << " | " << fmt(b.mrae) << " |\n";
    }
  } else {
    table_header("subcategory");
    for (const auto& [c, s] : report.specialized.per_subcategory) row(c, s);
  }

  if (!report.skipped_subcategories.empty()) {
    md << "\nSkipped (no concept embedding):";
    for (const auto& s : report.skipped_subcategories) md << " " << s << ";";
    md << "\n";
  }
  if (!report.sweep.empty()) {
    md << "\n## Synthetic image sweep\n\n| images | MAE | RMSE | MRAE |\n|---:|---:|---:|---:|\n";
    for (const auto& p : report.sweep) {
      md << "| " << p.synthetic_images << " | " << fmt(p.mae) << " | " << fmt(p.rmse) << " | "
         << fmt(p.mrae) << " |\n";
    }
  }
  return md.str();
}

void write_report(const Report& report, const fs::path& dir, bool plots) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw Error(ErrorKind::kIo, "cannot write report in " + dir.string());
    out << report_to_json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "report.md");
    out << render_markdown(report);
  }
  if (!plots) return;
  std::vector<double> maes;
  for (const auto& [c, s] : report.specialized.per_subcategory) maes.push_back(s.mae);
  if (!maes.empty()) write_png(dir / "mae_by_subcategory.png", plot::bar_chart(maes));
  if (!report.sweep.empty()) {
    std::vector<double> xs, ys;
    for (const auto& p : report.sweep) {
      xs.push_back(static_cast<double>(p.synthetic_images));
      ys.push_back(p.mae);
    }
    write_png(dir / "mae_vs_images.png", plot::line_chart(xs, ys));
  }
}

}  // namespace finecount
