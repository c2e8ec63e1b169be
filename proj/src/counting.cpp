#include "finecount/counting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "finecount/error.hpp"
#include "finecount/kernels.hpp"

namespace finecount {

std::string_view to_string(CountKind kind) {
  return kind == CountKind::kDensity ? "density" : "points";
}

void CountField::validate() const {
  if (kind == CountKind::kDensity) {
    if (!density || !points.empty()) {
      throw Error(ErrorKind::kInvalidArgument, "density field must carry only a density grid");
    }
    for (double v : density->values()) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw Error(ErrorKind::kInvalidArgument, "density entries must be finite and >= 0");
      }
    }
  } else {
    if (density) throw Error(ErrorKind::kInvalidArgument, "point field must not carry a density");
    for (const auto& p : points) {
      if (p.x < 0.0 || p.y < 0.0 || p.x > static_cast<double>(image.cols) ||
          p.y > static_cast<double>(image.rows)) {
        throw Error(ErrorKind::kInvalidArgument, "point outside image bounds");
      }
    }
  }
}

ToyShapeCounter::ToyShapeCounter(ToyShapeCounterOptions options) : options_(options) {}

CountField ToyShapeCounter::count(const RgbImage& image, const std::string& prompt) const {
  const std::size_t h = image.height, w = image.width;
  std::vector<std::uint8_t> fg(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      int diff = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        diff = std::max(diff, std::abs(int(image.at(y, x, c)) - int(options_.background[c])));
      }
      fg[y * w + x] = diff > options_.foreground_threshold;
    }
  }
  // Flood-fill 4-connected components.
  std::vector<int> label(h * w, -1);
  std::vector<std::vector<std::size_t>> components;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!fg[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(components.size());
    components.emplace_back();
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      components.back().push_back(p);
      const std::size_t y = p / w, x = p % w;
      const std::size_t nbrs[4] = {y > 0 ? p - w : p, y + 1 < h ? p + w : p, x > 0 ? p - 1 : p,
                                   x + 1 < w ? p + 1 : p};
      for (std::size_t n : nbrs) {
        if (n != p && fg[n] && label[n] < 0) {
          label[n] = id;
          stack.push_back(n);
        }
      }
    }
  }

  CountField field;
  field.kind = options_.kind;
  field.image = {h, w};
  field.source = id();
  field.prompt_used = prompt;
  std::vector<Point2> centroids;
  for (const auto& comp : components) {
    if (comp.size() < options_.min_component) continue;
    double sx = 0.0, sy = 0.0;
    for (std::size_t p : comp) {
      sx += static_cast<double>(p % w) + 0.5;
      sy += static_cast<double>(p / w) + 0.5;
    }
    centroids.push_back({sx / comp.size(), sy / comp.size()});
  }
  if (options_.kind == CountKind::kPoints) {
    field.points = std::move(centroids);
    return field;
  }
  RealGrid density(h, w, 0.0);
  const double s2 = 2.0 * options_.density_sigma * options_.density_sigma;
  for (const auto& c : centroids) {
    RealGrid blob(h, w, 0.0);
    double mass = 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
        const double v = std::exp(-(dx * dx + dy * dy) / s2);
        blob(y, x) = v;
        mass += v;
      }
    }
    for (std::size_t i = 0; i < blob.size(); ++i) density.values()[i] += blob.values()[i] / mass;
  }
  field.density = std::move(density);
  return field;
}

RealGrid predict_mask(const RgbImage& image, const EmbeddingVector& z,
                      const SegmenterBackend& backend) {
  const RealGrid coarse = backend.decode(backend.encode_image(image), z);
  RealGrid mask = kernels::resize_bilinear(coarse, {image.height, image.width});
  for (double& v : mask.values()) v = std::clamp(v, 0.0, 1.0);
  return mask;
}

CountField specialize(const CountField& raw, const RealGrid& mask, double point_tau) {
  if (mask.shape() != raw.image) {
    throw Error(ErrorKind::kInvalidArgument, "mask " + to_string(mask.shape()) +
                                                 " does not match image " + to_string(raw.image));
  }
  CountField out = raw;
  out.discarded.clear();
  if (raw.kind == CountKind::kDensity) {
    if (!raw.density || raw.density->shape() != mask.shape()) {
      throw Error(ErrorKind::kInvalidArgument, "density grid does not match mask");
    }
    RealGrid product(mask.shape());
    kernels::parallel::multiply_sum(raw.density->values(), mask.values(), product.values());
    out.density = std::move(product);
    return out;
  }
  out.points.clear();
  for (const auto& p : raw.points) {
    const auto r = std::min(mask.rows() - 1, static_cast<std::size_t>(std::max(0.0, p.y)));
    const auto c = std::min(mask.cols() - 1, static_cast<std::size_t>(std::max(0.0, p.x)));
    (mask(r, c) >= point_tau ? out.points : out.discarded).push_back(p);
  }
  return out;
}

double extract_count(const CountField& field) {
  if (field.kind == CountKind::kDensity) {
    return field.density ? kernels::parallel::sum(field.density->values()) : 0.0;
  }
  return static_cast<double>(field.points.size());
}

nlohmann::json diagnostics_to_json(const CountDiagnostics& d) {
  auto points = [](const std::vector<Point2>& pts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : pts) arr.push_back({p.x, p.y});
    return arr;
  };
  return nlohmann::json{{"raw_count", d.raw_count},
                        {"specialized_count", d.specialized_count},
                        {"kind", std::string(to_string(d.kind))},
                        {"retained", points(d.retained)},
                        {"discarded", points(d.discarded)},
                        {"mask_mass_ratio", d.mask_mass_ratio}};
}

std::string default_broad_prompt(const CategorySpec& spec) {
  return spec.parent && !spec.parent->empty() ? *spec.parent : spec.name;
}

FineGrainedCount count_fine_grained(const RgbImage& image, const CategorySpec& spec,
                                    const ConceptEmbedding& embedding,
                                    const CounterBackend& counter,
                                    const SegmenterBackend& segmenter,
                                    const std::string& broad_prompt, double point_tau) {
  auto staged = [](const char* stage, auto&& fn) {
    try {
      return fn();
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(stage, e);
    } catch (const std::exception& e) {
      throw StageError(stage, Error(ErrorKind::kBackend, e.what()));
    }
  };
  if (normalize_category_key(embedding.category) != normalize_category_key(spec.name)) {
    throw Error(ErrorKind::kInvalidArgument, "concept for '" + embedding.category +
                                                 "' used to count '" + spec.name + "'");
  }
  const CountField raw = staged("counter", [&] {
    CountField f = counter.count(image, broad_prompt);
    f.validate();
    return f;
  });
  FineGrainedCount out;
  out.mask = staged("segmenter", [&] { return predict_mask(image, embedding.z, segmenter); });
  out.specialized = staged("specialize", [&] { return specialize(raw, out.mask, point_tau); });
  out.count = extract_count(out.specialized);

  auto& d = out.diagnostics;
  d.raw_count = extract_count(raw);
  d.specialized_count = out.count;
  d.kind = raw.kind;
  d.retained = out.specialized.points;
  d.discarded = out.specialized.discarded;
  d.mask_mass_ratio = d.raw_count > 0.0 ? d.specialized_count / d.raw_count : 1.0;
  return out;
}

RgbImage render_overlay(const RgbImage& image, const RealGrid& mask, const CountField& field,
                        double alpha) {
  if (mask.shape() != GridShape{image.height, image.width}) {
    throw Error(ErrorKind::kInvalidArgument, "overlay mask does not match image");
  }
  RgbImage out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double a = alpha * std::clamp(mask(y, x), 0.0, 1.0);
      out.at(y, x, 1) = static_cast<std::uint8_t>(std::lround((1 - a) * image.at(y, x, 1) + a * 255));
    }
  }
  auto cross = [&](const Point2& p, std::array<std::uint8_t, 3> color) {
    const long cx = std::lround(p.x - 0.5), cy = std::lround(p.y - 0.5);
    for (long d = -2; d <= 2; ++d) {
      for (auto [x, y] : {std::pair{cx + d, cy + d}, std::pair{cx + d, cy - d}}) {
        if (x < 0 || y < 0 || x >= long(image.width) || y >= long(image.height)) continue;
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = color[c];
      }
    }
  };
  for (const auto& p : field.points) cross(p, {0, 230, 0});
  for (const auto& p : field.discarded) cross(p, {230, 0, 0});
  return out;
}

}  // namespace finecount
