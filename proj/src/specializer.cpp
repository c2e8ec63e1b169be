#include "finecount/specializer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"
#include "finecount/kernels.hpp"

namespace finecount {

std::string_view to_string(ConceptInit init) {
  return init == ConceptInit::kTextEncoder ? "text_encoder" : "random";
}

ConceptInit concept_init_from_string(std::string_view text) {
  if (text == "text_encoder") return ConceptInit::kTextEncoder;
  if (text == "random") return ConceptInit::kRandom;
  throw Error(ErrorKind::kParse, "unknown embedding init '" + std::string(text) + "'");
}

void TuningConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidArgument, what); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(lr > 0.0 && std::isfinite(lr))) fail("lr must be finite and > 0");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) fail("plateau_factor must be in (0, 1]");
  if (plateau_patience < 1) fail("plateau_patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must be in (0, 1)");
  if (!(bin_threshold > 0.0 && bin_threshold < 1.0)) fail("bin_threshold must be in (0, 1)");
  if (sharpness_k < 1) fail("sharpness_k must be >= 1");
  if (!(select_fraction > 0.0 && select_fraction <= 1.0)) fail("select_fraction must be in (0, 1]");
  if (cutmix_prob < 0.0 || cutmix_prob > 1.0) fail("cutmix_prob must be in [0, 1]");
  if (downscale_prob < 0.0 || downscale_prob > 1.0) fail("downscale_prob must be in [0, 1]");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const TuningConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"lr", c.lr},
                     {"plateau_factor", c.plateau_factor},
                     {"plateau_patience", c.plateau_patience},
                     {"val_fraction", c.val_fraction},
                     {"bin_threshold", c.bin_threshold},
                     {"sharpness_k", c.sharpness_k},
                     {"sharpness_sigma", c.sharpness_sigma},
                     {"select_fraction", c.select_fraction},
                     {"cutmix_prob", c.cutmix_prob},
                     {"downscale_prob", c.downscale_prob},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"init", std::string(to_string(c.init))},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TuningConfig& c) {
  c = TuningConfig{};
  auto get = [&](const char* key, auto& field) {
    if (auto it = j.find(key); it != j.end()) it->get_to(field);
  };
  get("epochs", c.epochs);
  get("lr", c.lr);
  get("plateau_factor", c.plateau_factor);
  get("plateau_patience", c.plateau_patience);
  get("val_fraction", c.val_fraction);
  get("bin_threshold", c.bin_threshold);
  get("sharpness_k", c.sharpness_k);
  get("sharpness_sigma", c.sharpness_sigma);
  get("select_fraction", c.select_fraction);
  get("cutmix_prob", c.cutmix_prob);
  get("downscale_prob", c.downscale_prob);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("seed", c.seed);
  if (auto it = j.find("init"); it != j.end()) c.init = concept_init_from_string(it->get<std::string>());
}

double positive_loss(const RealGrid& pred, const Mask& target) {
  if (pred.empty()) throw Error(ErrorKind::kInvalidArgument, "empty prediction");
  const Mask resized = resize_nearest(target, pred.shape());
  return kernels::parallel::bce_sum(pred.values(), resized.values(), kBceEpsilon) /
         static_cast<double>(pred.size());
}

double negative_loss(const RealGrid& pred) {
  if (pred.empty()) throw Error(ErrorKind::kInvalidArgument, "empty prediction");
  return kernels::parallel::bce_sum(pred.values(), {}, kBceEpsilon) /
         static_cast<double>(pred.size());
}

double concept_loss(std::span<const LossTerm> batch) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidArgument, "empty loss batch");
  double pos = 0.0, neg = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& term : batch) {
    if (term.polarity == Polarity::kPositive) {
      pos += positive_loss(*term.pred, *term.target);
      ++n_pos;
    } else {
      neg += negative_loss(*term.pred);
      ++n_neg;
    }
  }
  return (n_pos ? pos / n_pos : 0.0) + (n_neg ? neg / n_neg : 0.0);
}

double concept_loss(std::span<const ScoredPair> batch) {
  std::vector<LossTerm> terms;
  terms.reserve(batch.size());
  for (const auto& item : batch) {
    terms.push_back({item.pred, &item.pair->bin_mask, item.pair->polarity});
  }
  return concept_loss(terms);
}

RgbImage downscale_and_pad(const RgbImage& image) {
  RgbImage out(image.height, image.width);
  const std::size_t h = (image.height + 1) / 2;
  const std::size_t w = (image.width + 1) / 2;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        unsigned acc = 0, n = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t sy = 2 * y + dy, sx = 2 * x + dx;
            if (sy < image.height && sx < image.width) {
              acc += image.at(sy, sx, c);
              ++n;
            }
          }
        }
        out.at(y, x, c) = static_cast<std::uint8_t>((acc + n / 2) / n);
      }
    }
  }
  return out;
}

Mask downscale_and_pad(const Mask& mask) {
  Mask out(mask.shape(), 0);
  const std::size_t h = (mask.rows() + 1) / 2;
  const std::size_t w = (mask.cols() + 1) / 2;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::uint8_t v = 0;
      for (std::size_t dr = 0; dr < 2; ++dr) {
        for (std::size_t dc = 0; dc < 2; ++dc) {
          const std::size_t sr = 2 * r + dr, sc = 2 * c + dc;
          if (sr < mask.rows() && sc < mask.cols()) v |= mask(sr, sc);
        }
      }
      out(r, c) = v;
    }
  }
  return out;
}

PreparedPair prepare_pair(const PseudoPair& pair, const SegmenterBackend& backend) {
  PreparedPair out;
  out.original.features = backend.encode_image(pair.image);
  out.original.target = resize_nearest(pair.bin_mask, out.original.features.grid);
  out.original.polarity = pair.polarity;
  out.downscaled.features = backend.encode_image(downscale_and_pad(pair.image));
  out.downscaled.target = downscale_and_pad(out.original.target);
  out.downscaled.polarity = pair.polarity;
  if (out.downscaled.features.grid != out.original.features.grid) {
    out.downscaled.target = resize_nearest(out.downscaled.target, out.downscaled.features.grid);
  }
  return out;
}

QuadrantBounds quadrant_bounds(GridShape grid, int quadrant) {
  if (quadrant < 0 || quadrant > 3) throw Error(ErrorKind::kInvalidArgument, "quadrant must be 0..3");
  const std::size_t hr = grid.rows / 2, hc = grid.cols / 2;
  const bool bottom = quadrant >= 2, right = quadrant % 2 == 1;
  return {bottom ? hr : 0, bottom ? grid.rows : hr, right ? hc : 0, right ? grid.cols : hc};
}

void swap_in_quadrant(TrainingSample& positive, const TrainingSample& negative, int quadrant) {
  if (positive.features.grid != negative.features.grid ||
      positive.features.channels != negative.features.channels) {
    throw Error(ErrorKind::kInvalidArgument, "cutmix samples have different feature shapes");
  }
  const auto b = quadrant_bounds(positive.features.grid, quadrant);
  for (std::size_t ch = 0; ch < positive.features.channels; ++ch) {
    for (std::size_t r = b.r0; r < b.r1; ++r) {
      for (std::size_t c = b.c0; c < b.c1; ++c) {
        positive.features.at(ch, r, c) = negative.features.at(ch, r, c);
      }
    }
  }
  for (std::size_t r = b.r0; r < b.r1; ++r) {
    for (std::size_t c = b.c0; c < b.c1; ++c) positive.target(r, c) = 0;
  }
}

TrainingSample augment(const PreparedPair& item, std::span<const PreparedPair* const> negatives,
                       const AugmentOptions& options, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TrainingSample out = unit(rng) < options.downscale_prob ? item.downscaled : item.original;
  if (out.polarity == Polarity::kPositive && !negatives.empty() &&
      unit(rng) < options.cutmix_prob) {
    const auto pick = std::uniform_int_distribution<std::size_t>(0, negatives.size() - 1)(rng);
    const int quadrant = std::uniform_int_distribution<int>(0, 3)(rng);
    swap_in_quadrant(out, negatives[pick]->original, quadrant);
  }
  return out;
}

double default_sharpness_sigma(const EmbeddingVector& z) {
  double sq = 0.0;
  for (double v : z) sq += v * v;
  const double rms = std::sqrt(sq / static_cast<double>(kEmbeddingDim));
  return 1e-2 * std::max(rms, 1e-3);
}

double sharpness(const EmbeddingVector& z, const EmbeddingLoss& loss, int k, double sigma,
                 std::mt19937_64& rng) {
  if (k < 1) throw Error(ErrorKind::kInvalidArgument, "sharpness needs k >= 1");
  if (!(sigma > 0.0)) throw Error(ErrorKind::kInvalidArgument, "sharpness needs sigma > 0");
  const double base = loss(z);
  std::normal_distribution<double> normal(0.0, sigma);
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    EmbeddingVector perturbed = z;
    for (auto& v : perturbed) v += normal(rng);
    acc += std::max(0.0, loss(perturbed) - base);
  }
  return acc / static_cast<double>(k);
}

std::size_t select_checkpoint(std::span<const EpochRecord> history, double fraction) {
  if (history.empty()) throw Error(ErrorKind::kInvalidArgument, "no epochs to select from");
  std::vector<const EpochRecord*> order;
  for (const auto& r : history) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const EpochRecord* a, const EpochRecord* b) {
    return std::tie(a->sharpness, a->epoch) < std::tie(b->sharpness, b->epoch);
  });
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(history.size()) - 1e-9)),
      1, history.size());
  const EpochRecord* best = order.front();
  for (std::size_t i = 1; i < keep; ++i) {
    const EpochRecord* r = order[i];
    if (std::tie(r->val_loss, r->epoch) < std::tie(best->val_loss, best->epoch)) best = r;
  }
  return best->epoch;
}

namespace {

struct SampleResult {
  double loss = 0.0;
  EmbeddingVector grad{};
};

}  // namespace

LossAndGradient concept_loss_and_gradient(std::span<const TrainingSample> samples,
                                          const SegmenterBackend& backend,
                                          const EmbeddingVector& z) {
  if (samples.empty()) throw Error(ErrorKind::kInvalidArgument, "empty loss batch");
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& s : samples) (s.polarity == Polarity::kPositive ? n_pos : n_neg)++;

  std::vector<SampleResult> results(samples.size());
  const auto count = static_cast<std::ptrdiff_t>(samples.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const TrainingSample& s = samples[i];
    const RealGrid pred = backend.decode(s.features, z);
    const bool positive = s.polarity == Polarity::kPositive;
    const Mask target = positive ? resize_nearest(s.target, pred.shape()) : Mask();
    const double weight = 1.0 / static_cast<double>(positive ? n_pos : n_neg);
    const double per_item = weight / static_cast<double>(pred.size());
    results[i].loss =
        weight * kernels::serial::bce_sum(pred.values(), target.values(), kBceEpsilon) /
        static_cast<double>(pred.size());
    RealGrid upstream(pred.shape());
    kernels::serial::bce_grad(pred.values(), target.values(), kBceEpsilon, per_item,
                              upstream.values());
    results[i].grad = backend.decode_vjp(s.features, z, upstream);
  }
  LossAndGradient out;
  for (const auto& r : results) {
    out.loss += r.loss;
    for (std::size_t j = 0; j < kEmbeddingDim; ++j) out.gradient[j] += r.grad[j];
  }
  return out;
}

double concept_loss_at(std::span<const TrainingSample> samples, const SegmenterBackend& backend,
                       const EmbeddingVector& z) {
  std::vector<RealGrid> preds(samples.size());
  const auto count = static_cast<std::ptrdiff_t>(samples.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) preds[i] = backend.decode(samples[i].features, z);
  std::vector<LossTerm> terms;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    terms.push_back({&preds[i], &samples[i].target, samples[i].polarity});
  }
  return concept_loss(terms);
}

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(EmbeddingVector& z, const EmbeddingVector& g, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t j = 0; j < kEmbeddingDim; ++j) {
    z[j] -= lr * weight_decay_ * z[j];
    m_[j] = beta1_ * m_[j] + (1.0 - beta1_) * g[j];
    v_[j] = beta2_ * v_[j] + (1.0 - beta2_) * g[j] * g[j];
    z[j] -= lr * (m_[j] / bc1) / (std::sqrt(v_[j] / bc2) + eps_);
  }
}

EmbeddingVector initial_embedding(const CategorySpec& spec, const SegmenterBackend& backend,
                                  ConceptInit init, std::uint64_t seed) {
  if (init == ConceptInit::kTextEncoder) return backend.text_embed(spec.name);
  std::mt19937_64 rng(mix_seed(seed, "concept-init:" + normalize_category_key(spec.name)));
  std::normal_distribution<double> normal(0.0, 0.02);
  EmbeddingVector z{};
  for (auto& v : z) v = normal(rng);
  return z;
}

namespace {

void require_finite(double value, const char* what, std::size_t epoch, double lr) {
  if (std::isfinite(value)) return;
  std::ostringstream msg;
  msg << "non-finite " << what << " at epoch " << epoch << " (lr=" << lr << ")";
  throw Error(ErrorKind::kNonFinite, msg.str());
}

}  // namespace

ConceptEmbedding tune(const CategorySpec& spec, const std::vector<PseudoPair>& pairs,
                      const SegmenterBackend& backend, const TuningConfig& cfg,
                      Stepper* stepper) {
  cfg.validate();
  if (std::none_of(pairs.begin(), pairs.end(),
                   [](const PseudoPair& p) { return p.polarity == Polarity::kPositive; })) {
    throw Error(ErrorKind::kInvalidArgument, "tuning '" + spec.name + "' needs a positive pair");
  }
  if (!backend.has_gradient()) {
    throw Error(ErrorKind::kCapability, "segmenter '" + backend.id() + "' exposes no gradient");
  }
  AdamW default_stepper(cfg.weight_decay);
  if (stepper == nullptr) stepper = &default_stepper;

  // Feature extraction happens once, before the first epoch.
  std::vector<PreparedPair> prepared(pairs.size());
  {
    std::vector<std::string> errors(pairs.size());
    const auto count = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      try {
        prepared[i] = prepare_pair(pairs[i], backend);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) throw Error(ErrorKind::kBackend, "feature extraction failed: " + e);
    }
  }

  // Stratified split preserving the polarity ratio.
  std::mt19937_64 split_rng(mix_seed(cfg.seed, "split"));
  std::vector<std::size_t> train_idx, val_idx;
  for (Polarity polarity : {Polarity::kPositive, Polarity::kNegative}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].polarity == polarity) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), split_rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * idx.size()));
    if (idx.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    else n_val = 0;
    val_idx.insert(val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  if (val_idx.empty()) val_idx = train_idx;

  std::vector<TrainingSample> train_clean, val_clean;
  std::vector<const PreparedPair*> negative_pool;
  for (std::size_t i : train_idx) {
    train_clean.push_back(prepared[i].original);
    if (pairs[i].polarity == Polarity::kNegative) negative_pool.push_back(&prepared[i]);
  }
  for (std::size_t i : val_idx) val_clean.push_back(prepared[i].original);

  ConceptEmbedding embedding;
  embedding.category = spec.name;
  embedding.init = cfg.init;
  EmbeddingVector z = initial_embedding(spec, backend, cfg.init, cfg.seed);
  embedding.initial_val_loss = concept_loss_at(val_clean, backend, z);
  require_finite(embedding.initial_val_loss, "validation loss", 0, cfg.lr);

  std::mt19937_64 epoch_rng(mix_seed(cfg.seed, "epochs"));
  std::mt19937_64 sharp_rng(mix_seed(cfg.seed, "sharpness"));
  const AugmentOptions aug{cfg.downscale_prob, cfg.cutmix_prob};
  const std::size_t batch = cfg.batch_size == 0 ? train_idx.size()
                                                 : std::min(cfg.batch_size, train_idx.size());
  std::vector<EmbeddingVector> snapshots;
  double lr = cfg.lr;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  for (int e = 1; e <= cfg.epochs; ++e) {
    const auto epoch = static_cast<std::size_t>(e);
    std::vector<std::size_t> order = train_idx;
    std::shuffle(order.begin(), order.end(), epoch_rng);
    double train_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<TrainingSample> views;
      for (std::size_t k = start; k < end; ++k) {
        views.push_back(augment(prepared[order[k]], negative_pool, aug, epoch_rng));
      }
      const auto lg = concept_loss_and_gradient(views, backend, z);
      require_finite(lg.loss, "training loss", epoch, lr);
      train_loss += lg.loss * static_cast<double>(end - start);
      stepper->step(z, lg.gradient, lr);
    }
    train_loss /= static_cast<double>(order.size());

    const double val_loss = concept_loss_at(val_clean, backend, z);
    require_finite(val_loss, "validation loss", epoch, lr);
    const double sigma = cfg.sharpness_sigma > 0.0 ? cfg.sharpness_sigma : default_sharpness_sigma(z);
    const double sharp = sharpness(
        z, [&](const EmbeddingVector& v) { return concept_loss_at(train_clean, backend, v); },
        cfg.sharpness_k, sigma, sharp_rng);
    require_finite(sharp, "sharpness", epoch, lr);

    embedding.history.push_back({epoch, train_loss, val_loss, sharp, lr});
    snapshots.push_back(z);

    if (val_loss < best_val) {
      best_val = val_loss;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.plateau_patience) {
      lr *= cfg.plateau_factor;
      bad_epochs = 0;
    }
  }

  embedding.selected_epoch = select_checkpoint(embedding.history, cfg.select_fraction);
  embedding.z = snapshots[embedding.selected_epoch - 1];
  return embedding;
}

nlohmann::json concept_to_json(const ConceptEmbedding& c) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : c.history) {
    history.push_back({{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"val_loss", r.val_loss},
                       {"sharpness", r.sharpness},
                       {"lr", r.lr}});
  }
  return nlohmann::json{{"category", c.category},
                        {"init", std::string(to_string(c.init))},
                        {"z", std::vector<double>(c.z.begin(), c.z.end())},
                        {"selected_epoch", c.selected_epoch},
                        {"initial_val_loss", c.initial_val_loss},
                        {"history", history}};
}

ConceptEmbedding concept_from_json(const nlohmann::json& j) {
  ConceptEmbedding c;
  c.category = j.at("category").get<std::string>();
  c.init = concept_init_from_string(j.at("init").get<std::string>());
  const auto z = j.at("z").get<std::vector<double>>();
  if (z.size() != kEmbeddingDim) {
    throw Error(ErrorKind::kParse, "concept embedding must have 512 entries, got " +
                                       std::to_string(z.size()));
  }
  std::copy(z.begin(), z.end(), c.z.begin());
  c.selected_epoch = j.value("selected_epoch", std::size_t{0});
  c.initial_val_loss = j.value("initial_val_loss", 0.0);
  for (const auto& r : j.value("history", nlohmann::json::array())) {
    c.history.push_back({r.at("epoch").get<std::size_t>(), r.at("train_loss").get<double>(),
                         r.at("val_loss").get<double>(), r.at("sharpness").get<double>(),
                         r.at("lr").get<double>()});
  }
  return c;
}

void write_training_log(const std::filesystem::path& path, const ConceptEmbedding& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.precision(17);
  out << "epoch,train_loss,val_loss,sharpness,lr\n";
  for (const auto& r : c.history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.sharpness << ','
        << r.lr << '\n';
  }
}

}  // namespace finecount
