#include "finecount/mock_shapes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "finecount/error.hpp"
#include "finecount/taxonomy.hpp"

namespace finecount::mock {

bool PlacedShape::covers(double x, double y, ShapeKind kind) const {
  const double dx = x - cx;
  const double dy = y - cy;
  switch (kind) {
    case ShapeKind::kDisk:
      return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::kSquare:
      return std::abs(dx) <= 0.85 * radius && std::abs(dy) <= 0.85 * radius;
    case ShapeKind::kTriangle: {
      const double top = cy - radius;
      const double base = cy + 0.8 * radius;
      if (y < top || y > base) return false;
      return std::abs(dx) <= radius * (y - top) / (base - top);
    }
  }
  return false;
}

ShapePalette::ShapePalette(std::string parent, std::vector<ShapeClass> classes)
    : parent_(std::move(parent)), classes_(std::move(classes)) {}

ShapePalette ShapePalette::standard() {
  return ShapePalette("shape", {
                                   {"red disk", ShapeKind::kDisk, {220, 40, 40}},
                                   {"orange disk", ShapeKind::kDisk, {235, 140, 30}},
                                   {"magenta square", ShapeKind::kSquare, {210, 50, 170}},
                                   {"yellow triangle", ShapeKind::kTriangle, {220, 220, 40}},
                               });
}

std::optional<std::size_t> ShapePalette::find(std::string_view name) const {
  const std::string key = normalize_category_key(name);
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (normalize_category_key(classes_[i].name) == key) return i;
  }
  return std::nullopt;
}

std::size_t Scene::count_of(std::size_t class_index) const {
  return static_cast<std::size_t>(std::count_if(
      shapes.begin(), shapes.end(),
      [&](const PlacedShape& s) { return s.class_index == class_index; }));
}

Scene render_scene(const ShapePalette& palette, const std::vector<std::size_t>& counts,
                   const SceneOptions& options, std::mt19937_64& rng) {
  if (counts.size() > palette.size()) {
    throw Error(ErrorKind::kInvalidArgument, "more class counts than palette entries");
  }
  Scene scene;
  scene.image = RgbImage(options.size, options.size);
  std::uniform_int_distribution<int> noise(-options.background_noise, options.background_noise);
  for (std::size_t y = 0; y < options.size; ++y) {
    for (std::size_t x = 0; x < options.size; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        scene.image.at(y, x, c) =
            static_cast<std::uint8_t>(std::clamp(options.background[c] + noise(rng), 0, 255));
      }
    }
  }

  std::vector<std::size_t> order;
  for (std::size_t c = 0; c < counts.size(); ++c) order.insert(order.end(), counts[c], c);
  std::shuffle(order.begin(), order.end(), rng);

  std::uniform_real_distribution<double> radius_dist(options.min_radius, options.max_radius);
  const double size = static_cast<double>(options.size);
  for (std::size_t cls : order) {
    const double r = radius_dist(rng);
    if (2 * r + 2 >= size) continue;
    std::uniform_real_distribution<double> pos(r + 1, size - r - 1);
    for (int attempt = 0; attempt < 200; ++attempt) {
      const PlacedShape candidate{cls, pos(rng), pos(rng), r};
      const bool clear = std::all_of(scene.shapes.begin(), scene.shapes.end(),
                                     [&](const PlacedShape& o) {
                                       return std::hypot(o.cx - candidate.cx,
                                                         o.cy - candidate.cy) >= o.radius + r + 2;
                                     });
      if (clear) {
        scene.shapes.push_back(candidate);
        break;
      }
    }
  }

  for (const auto& shape : scene.shapes) {
    const auto& cls = palette.at(shape.class_index);
    std::array<std::uint8_t, 3> color{};
    for (std::size_t c = 0; c < 3; ++c) {
      color[c] = static_cast<std::uint8_t>(std::clamp(
          std::lround(cls.color[c] * options.brightness), 0L, 255L));
    }
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(shape.cy - shape.radius)));
    const auto y1 = std::min(options.size, static_cast<std::size_t>(shape.cy + shape.radius) + 1);
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(shape.cx - shape.radius)));
    const auto x1 = std::min(options.size, static_cast<std::size_t>(shape.cx + shape.radius) + 1);
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        if (!shape.covers(x + 0.5, y + 0.5, cls.kind)) continue;
        for (std::size_t c = 0; c < 3; ++c) scene.image.at(y, x, c) = color[c];
      }
    }
  }
  return scene;
}

RealGrid class_occupancy(const Scene& scene, const ShapePalette& palette,
                         const std::vector<std::size_t>& classes, std::size_t patch) {
  if (patch == 0 || scene.image.height % patch != 0 || scene.image.width % patch != 0) {
    throw Error(ErrorKind::kInvalidArgument, "image size must be a multiple of the patch size");
  }
  RealGrid occ(scene.image.height / patch, scene.image.width / patch, 0.0);
  const double per_pixel = 1.0 / static_cast<double>(patch * patch);
  for (std::size_t y = 0; y < scene.image.height; ++y) {
    for (std::size_t x = 0; x < scene.image.width; ++x) {
      for (const auto& shape : scene.shapes) {
        if (std::find(classes.begin(), classes.end(), shape.class_index) == classes.end()) {
          continue;
        }
        if (shape.covers(x + 0.5, y + 0.5, palette.at(shape.class_index).kind)) {
          occ(y / patch, x / patch) += per_pixel;
          break;
        }
      }
    }
  }
  return occ;
}

std::vector<WordSpan> tokenize_prompt(const std::string& prompt, std::size_t* text_tokens) {
  std::vector<WordSpan> words;
  std::size_t next = 1;  // token 0 is the start token
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    const std::size_t n = cur.size() > 6 ? 2 : 1;
    words.push_back({cur, {next, next + n}});
    next += n;
    cur.clear();
  };
  for (char ch : prompt) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur += ch;
    }
  }
  flush();
  if (text_tokens) *text_tokens = next + 1;  // end token
  return words;
}

namespace {

bool contains(const std::string& haystack, std::string_view needle) {
  return haystack.find(needle) != std::string::npos;
}

}  // namespace

MockShapesGenerator::MockShapesGenerator(ShapePalette palette, MockShapesOptions options)
    : palette_(std::move(palette)), options_(std::move(options)) {
  if (options_.patch == 0 || options_.image_size % options_.patch != 0) {
    throw Error(ErrorKind::kInvalidArgument, "image_size must be a multiple of patch");
  }
}

GeneratorCapabilities MockShapesGenerator::capabilities() const {
  GeneratorCapabilities caps;
  caps.id = "mock_shapes";
  caps.image_height = options_.image_size;
  caps.image_width = options_.image_size;
  caps.steps = 1;
  caps.captured_blocks = options_.captured_blocks;
  caps.attention_blocks = options_.localizing_blocks;
  caps.concurrent_generate = true;
  return caps;
}

MockShapesGenerator::Rendered MockShapesGenerator::render_prompt(const std::string& prompt,
                                                                 std::uint64_t seed) const {
  const std::string text = normalize_category_key(prompt);
  Rendered out;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < palette_.size(); ++i) {
    const std::string key = normalize_category_key(palette_.at(i).name);
    if (key.size() > best_len && contains(text, key)) {
      best_len = key.size();
      out.classes = {i};
      out.phrase = palette_.at(i).name;
    }
  }
  if (out.classes.empty()) {
    if (!contains(text, normalize_category_key(palette_.parent()))) {
      throw Error(ErrorKind::kBackend, "mock generator cannot render '" + prompt + "'");
    }
    for (std::size_t i = 0; i < palette_.size(); ++i) out.classes.push_back(i);
    out.phrase = palette_.parent();
  }

  std::mt19937_64 rng(seed);
  auto uniform_int = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  int total = uniform_int(3, 6);
  if (contains(text, "hundreds of")) total = uniform_int(9, 12);
  else if (contains(text, "many")) total = uniform_int(6, 8);
  else if (contains(text, "a few")) total = uniform_int(3, 4);
  else if (contains(text, "exactly two")) total = 2;

  SceneOptions scene;
  scene.size = options_.image_size;
  if (contains(text, "close-up") || contains(text, "macro shot")) {
    scene.min_radius = 6.0;
    scene.max_radius = 8.0;
  } else if (contains(text, "viewed from a distance")) {
    scene.min_radius = 3.0;
    scene.max_radius = 4.0;
  }
  if (contains(text, "dimly lit")) scene.brightness = 0.75;
  else if (contains(text, "backlit")) scene.brightness = 0.85;
  else if (contains(text, "overcast")) scene.brightness = 0.9;
  else if (contains(text, "soft lighting")) scene.brightness = 0.95;

  std::vector<std::size_t> counts(palette_.size(), 0);
  for (int k = 0; k < total; ++k) {
    const std::size_t pick = out.classes.size() == 1
                                 ? out.classes.front()
                                 : out.classes[static_cast<std::size_t>(uniform_int(
                                       0, static_cast<int>(out.classes.size()) - 1))];
    ++counts[pick];
  }
  out.scene = render_scene(palette_, counts, scene, rng);
  return out;
}

Generation MockShapesGenerator::generate(const std::string& prompt, std::uint64_t seed) {
  Rendered rendered = render_prompt(prompt, seed);
  const RealGrid occ =
      class_occupancy(rendered.scene, palette_, rendered.classes, options_.patch);

  Generation gen;
  std::size_t text_tokens = 0;
  gen.words = tokenize_prompt(prompt, &text_tokens);
  const auto span = find_phrase_span(gen.words, rendered.phrase);
  gen.attention = AttentionStack(options_.captured_blocks, options_.heads, text_tokens, occ.shape());

  std::mt19937_64 noise_rng(seed ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<float> noise(0.0f, 1.0f);
  const std::size_t patches = occ.size();
  for (std::size_t l = 0; l < gen.attention.layers; ++l) {
    const bool localizing =
        std::find(options_.localizing_blocks.begin(), options_.localizing_blocks.end(),
                  gen.attention.block_ids[l]) != options_.localizing_blocks.end();
    for (std::size_t h = 0; h < gen.attention.heads; ++h) {
      const double scale = 0.5 + 0.25 * static_cast<double>((l + 2 * h) % 3);
      for (std::size_t s = 0; s < text_tokens; ++s) {
        const bool category_token = span && s >= span->begin && s < span->end;
        for (std::size_t q = 0; q < patches; ++q) {
          double v = 0.02 * scale;
          if (category_token) {
            if (localizing) {
              const double weight = s + 1 == span->end ? 1.0 : 0.6;
              v = scale * weight * occ.values()[q];
            } else {
              v = scale * noise(noise_rng);
            }
          }
          gen.attention.at(l, h, s, q) = static_cast<float>(v);
        }
      }
    }
  }
  gen.image = std::move(rendered.scene.image);
  return gen;
}

}  // namespace finecount::mock
