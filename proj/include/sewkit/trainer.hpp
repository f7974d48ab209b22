#pragma once

// Training loop: per-sample tapes, fixed-order gradient averaging, global
// norm clipping and AdamW with two learning-rate groups. Also checkpoint
// files with the model config embedded, and checkpoint evaluation.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sewkit/checkpoint.hpp"
#include "sewkit/datagen.hpp"
#include "sewkit/losses.hpp"
#include "sewkit/metrics.hpp"
#include "sewkit/model.hpp"

namespace sewkit {

struct TrainConfig {
  std::filesystem::path dataset;
  std::filesystem::path out = "run";
  std::string split = "train";
  ModelConfig model;
  int steps = 1000;
  int batch_size = 32;
  double lr_transformer = 1e-4;
  double lr_embed = 1e-5;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  LossWeights weights;
  StitchLossConfig stitch;
  int eval_every = 0;
  int checkpoint_every = 0;
  bool augment = false;
  int workers = 1;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"dataset", c.dataset.string()},
       {"out", c.out.string()},
       {"split", c.split},
       {"model", c.model},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"lr_transformer", c.lr_transformer},
       {"lr_embed", c.lr_embed},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"loss_weights",
        {{"lambda1", c.weights.lambda1},
         {"lambda2", c.weights.lambda2},
         {"lambda3", c.weights.lambda3},
         {"padding", c.weights.padding}}},
       {"stitch", {{"margin", c.stitch.margin}, {"neg_samples", c.stitch.neg_samples}, {"bce_weight", c.stitch.bce_weight}}},
       {"eval_every", c.eval_every},
       {"checkpoint_every", c.checkpoint_every},
       {"augment", c.augment},
       {"workers", c.workers}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("unknown " + where + " key '" + k + "'");
}

template <class V>
void read_key(const nlohmann::json& j, const char* key, V& v) {
  if (!j.contains(key)) return;
  try {
    v = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"dataset", "out", "split", "model", "steps", "batch_size", "lr_transformer", "lr_embed",
                          "weight_decay", "clip_norm", "seed", "loss_weights", "stitch", "eval_every",
                          "checkpoint_every", "augment", "workers"},
                         "train config");
  std::string dataset = c.dataset.string(), out = c.out.string();
  detail::read_key(j, "dataset", dataset);
  detail::read_key(j, "out", out);
  c.dataset = dataset;
  c.out = out;
  detail::read_key(j, "split", c.split);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  detail::read_key(j, "steps", c.steps);
  detail::read_key(j, "batch_size", c.batch_size);
  detail::read_key(j, "lr_transformer", c.lr_transformer);
  detail::read_key(j, "lr_embed", c.lr_embed);
  detail::read_key(j, "weight_decay", c.weight_decay);
  detail::read_key(j, "clip_norm", c.clip_norm);
  detail::read_key(j, "seed", c.seed);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    detail::reject_unknown(w, {"lambda1", "lambda2", "lambda3", "padding"}, "loss_weights");
    detail::read_key(w, "lambda1", c.weights.lambda1);
    detail::read_key(w, "lambda2", c.weights.lambda2);
    detail::read_key(w, "lambda3", c.weights.lambda3);
    detail::read_key(w, "padding", c.weights.padding);
  }
  if (j.contains("stitch")) {
    const auto& s = j.at("stitch");
    detail::reject_unknown(s, {"margin", "neg_samples", "bce_weight"}, "stitch");
    detail::read_key(s, "margin", c.stitch.margin);
    detail::read_key(s, "neg_samples", c.stitch.neg_samples);
    detail::read_key(s, "bce_weight", c.stitch.bce_weight);
  }
  detail::read_key(j, "eval_every", c.eval_every);
  detail::read_key(j, "checkpoint_every", c.checkpoint_every);
  detail::read_key(j, "augment", c.augment);
  detail::read_key(j, "workers", c.workers);
  if (c.steps < 0) throw ConfigError("steps must be nonnegative");
  if (c.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (c.lr_transformer < 0 || c.lr_embed < 0 || c.weight_decay < 0) throw ConfigError("rates must be nonnegative");
  if (c.clip_norm <= 0) throw ConfigError("clip_norm must be positive");
  if (c.workers <= 0) throw ConfigError("workers must be positive");
  c.model.check();
}

/// SEWKIT_SEED, when set to an unsigned integer, replaces the configured seed.
inline std::uint64_t seed_override(std::uint64_t seed) {
  const char* env = std::getenv("SEWKIT_SEED");
  if (!env || !*env) return seed;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(env, &used);
    if (used != std::string_view(env).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("SEWKIT_SEED='") + env + "' is not an unsigned integer");
  }
}

// ---------------------------------------------------------------------------
// Model checkpoints

template <std::floating_point T>
std::string model_checkpoint(const Model<T>& m, int step) {
  const nlohmann::json meta = {{"format", "sewkit-model"}, {"model", m.config}, {"step", step}};
  return encode_checkpoint(m.params, meta.dump());
}

struct LoadedModel {
  Model<float> model;
  int step = 0;
};

inline LoadedModel load_model_checkpoint(std::string_view bytes) {
  const auto ck = decode_checkpoint(bytes);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointCorrupt(std::string("metadata is not JSON: ") + e.what());
  }
  if (!meta.is_object() || meta.value("format", "") != "sewkit-model" || !meta.contains("model"))
    throw CheckpointCorrupt("metadata does not describe a sewkit model");
  LoadedModel out;
  out.model = init_params<float>(meta.at("model").get<ModelConfig>(), 0);
  out.step = meta.value("step", 0);
  load_into(out.model.params, ck);
  return out;
}

inline LoadedModel load_model_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IOError("no checkpoint at '" + path.string() + "'");
  return load_model_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// Losses for one sample

template <std::floating_point T>
struct SampleLoss {
  ad::Var<T> total;
  LossParts<T> parts;
};

template <std::floating_point T>
SampleLoss<T> sample_loss(ad::Tape<T>& tape, const Model<T>& m, const Bound<T>& P, std::span<const float> raster,
                          const LossTargets& tg, const LossWeights& w, const StitchLossConfig& sc) {
  auto out = forward(tape, m, P, raster);
  SampleLoss<T> s;
  s.parts.shape = shape_loss(tape, out.edges, tg.gt);
  s.parts.loop = loop_loss(tape, out.edges, tg.gt);
  s.parts.rt = rt_loss(tape, out.rot, out.trans, tg.gt);
  s.parts.stitch = stitch_loss(tape, out.tags, out.free_logits, tg.stitches, sc);
  s.parts.pose = pose_loss(tape, out.theta, std::span<const double>(tg.theta.theta));
  s.parts.padding = padding_loss(tape, out.edges, tg.gt);
  s.total = total_loss(s.parts, w);
  return s;
}

struct LossValues {
  double shape = 0, loop = 0, rt = 0, stitch = 0, pose = 0, padding = 0, total = 0;

  LossValues& operator+=(const LossValues& o) {
    shape += o.shape, loop += o.loop, rt += o.rt, stitch += o.stitch, pose += o.pose, padding += o.padding;
    total += o.total;
    return *this;
  }
  LossValues& operator/=(double n) {
    shape /= n, loop /= n, rt /= n, stitch /= n, pose /= n, padding /= n, total /= n;
    return *this;
  }
};

template <std::floating_point T>
LossValues values_of(const SampleLoss<T>& s) {
  return {s.parts.shape.item(), s.parts.loop.item(), s.parts.rt.item(), s.parts.stitch.item(),
          s.parts.pose.item(),  s.parts.padding.item(), s.total.item()};
}

struct TrainItem {
  int id = 0;
  std::vector<float> raster;
  LossTargets targets;
  SewingPattern pattern;
};

inline std::vector<TrainItem> load_items(const Dataset& ds, std::span<const int> ids, const ModelConfig& mc) {
  std::vector<TrainItem> out;
  for (int id : ids) {
    auto s = ds.load(id, mc.max_edges, mc.num_classes);
    if (s.raster.channels != mc.channels || s.raster.height != mc.height || s.raster.width != mc.width)
      throw ConfigError("sample " + std::to_string(id) + " raster is " + std::to_string(s.raster.channels) + "x" +
                        std::to_string(s.raster.height) + "x" + std::to_string(s.raster.width) +
                        ", model expects " + std::to_string(mc.channels) + "x" + std::to_string(mc.height) + "x" +
                        std::to_string(mc.width));
    TrainItem it;
    it.id = id;
    it.raster = std::move(s.raster.data);
    it.targets = make_targets(s.pattern, s.theta, mc.max_edges, mc.num_classes);
    it.pattern = std::move(s.pattern);
    out.push_back(std::move(it));
  }
  return out;
}

/// Random rotation (up to 10 degrees) about the image center plus a shift
/// of up to 5% of the image size; nearest-neighbour resampling.
inline std::vector<float> augment_raster(std::span<const float> in, int channels, int height, int width, Rng& rng) {
  const double angle = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
  const double tx = rng.uniform(-0.05, 0.05) * width, ty = rng.uniform(-0.05, 0.05) * height;
  const double c = std::cos(angle), s = std::sin(angle);
  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  std::vector<float> out(in.size(), 0.0f);
  const std::size_t plane = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double u = x - cx - tx, v = y - cy - ty;
      const long sx = std::lround(c * u + s * v + cx), sy = std::lround(-s * u + c * v + cy);
      if (sx < 0 || sy < 0 || sx >= width || sy >= height) continue;
      const std::size_t src = static_cast<std::size_t>(sy) * static_cast<std::size_t>(width) + static_cast<std::size_t>(sx);
      const std::size_t dst = static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
      for (int ch = 0; ch < channels; ++ch) out[static_cast<std::size_t>(ch) * plane + dst] = in[static_cast<std::size_t>(ch) * plane + src];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <std::floating_point T>
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamW(const ParamStore<T>& params) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), T(0));
      v_.emplace_back(p.value.size(), T(0));
    }
  }

  /// One update; `grads` is indexed like the parameter store.
  void step(ParamStore<T>& params, const std::vector<std::vector<T>>& grads, double lr_transformer, double lr_embed,
            double weight_decay) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, t_), c2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const double lr = p.group == ParamGroup::embed ? lr_embed : lr_transformer;
      const double wd = p.decay ? weight_decay : 0.0;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double gj = g[j];
        m[j] = static_cast<T>(beta1 * m[j] + (1.0 - beta1) * gj);
        v[j] = static_cast<T>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
        const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps) + wd * p.value.data[j];
        p.value.data[j] = static_cast<T>(p.value.data[j] - lr * update);
      }
    }
  }

 private:
  int t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Batch gradients

template <std::floating_point T>
struct BatchResult {
  LossValues loss;
  std::vector<std::vector<T>> grads;
};

struct BatchEntry {
  const TrainItem* item = nullptr;
  std::vector<float> raster;  // augmented copy, empty to use item->raster
  std::uint64_t stitch_seed = 0;
};

/// Mean loss and gradient over the batch. Each sample runs on its own tape;
/// results are reduced in batch order, so the worker count does not change
/// the outcome.
template <std::floating_point T>
BatchResult<T> batch_gradients(const Model<T>& m, const std::vector<BatchEntry>& batch, const LossWeights& w,
                               StitchLossConfig sc, int workers = 1) {
  const std::size_t n = batch.size();
  std::vector<LossValues> losses(n);
  std::vector<std::vector<std::vector<T>>> grads(n);
  auto run = [&](std::size_t i) {
    ad::Tape<T> tape;
    auto P = bind(tape, m.params, true);
    StitchLossConfig c = sc;
    c.seed = batch[i].stitch_seed;
    const auto& raster = batch[i].raster.empty() ? batch[i].item->raster : batch[i].raster;
    auto s = sample_loss(tape, m, P, raster, batch[i].item->targets, w, c);
    losses[i] = values_of(s);
    tape.backward(s.total);
    grads[i].reserve(P.vars.size());
    for (const auto& v : P.vars) grads[i].push_back(tape.grad(v));
  };
  const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (nw <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::vector<std::exception_ptr> errors(nw);
    {
      std::vector<std::jthread> pool;
      for (std::size_t k = 0; k < nw; ++k)
        pool.emplace_back([&, k] {
          try {
            for (std::size_t i = k; i < n; i += nw) run(i);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  BatchResult<T> r;
  r.grads.resize(m.params.size());
  for (std::size_t p = 0; p < m.params.size(); ++p) r.grads[p].assign(m.params[p].value.size(), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    r.loss += losses[i];
    for (std::size_t p = 0; p < r.grads.size(); ++p)
      for (std::size_t j = 0; j < r.grads[p].size(); ++j) r.grads[p][j] += grads[i][p][j];
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.loss /= static_cast<double>(n);
  for (auto& g : r.grads)
    for (auto& x : g) x = static_cast<T>(x * inv);
  return r;
}

/// Scales gradients to a global L2 norm of at most `max_norm`; returns the
/// norm before clipping.
template <std::floating_point T>
double clip_gradients(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g) x = static_cast<T>(x * s);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  int steps = 0;
  LossValues last;
};

namespace detail {

/// Sample ids in per-epoch shuffled order, drawn from a seed-determined stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    Rng rng(mix_seed(seed_, 0x65706f6368ULL + epoch_++));
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    pos_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline nlohmann::json log_record(int step, const LossValues& l, double grad_norm, double wall) {
  return {{"step", step},       {"shape", l.shape}, {"loop", l.loop},   {"rt", l.rt},
          {"stitch", l.stitch}, {"pose", l.pose},   {"padding", l.padding}, {"total", l.total},
          {"grad_norm", grad_norm}, {"wall", wall}};
}

}  // namespace detail

template <std::floating_point T>
MetricsReport evaluate_model(const Model<T>& m, std::span<const TrainItem> items, const DecodeOptions& opt = {}) {
  std::vector<SewingPattern> preds, gts;
  for (const auto& it : items) {
    preds.push_back(predict(m, it.raster, opt));
    gts.push_back(it.pattern);
  }
  return evaluate(preds, gts);
}

/// Runs `cfg.steps` optimizer steps and writes `final.ckpt` plus
/// `train_log.jsonl` under `cfg.out` (and `step_<n>.ckpt` every
/// `checkpoint_every` steps). Records are written before a non-finite loss
/// aborts the run.
inline TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr) {
  if (cfg.dataset.empty() || !std::filesystem::exists(cfg.dataset / "manifest.json"))
    throw DatasetMissing("no dataset at '" + cfg.dataset.string() + "'");
  const Dataset ds(cfg.dataset);
  const auto& ids = ds.manifest().split(cfg.split);
  if (ids.empty()) throw DatasetMissing("split '" + cfg.split + "' of '" + cfg.dataset.string() + "' is empty");
  const auto items = load_items(ds, ids, cfg.model);
  std::vector<TrainItem> test_items;
  if (cfg.eval_every > 0 && cfg.split == "train" && !ds.manifest().test.empty())
    test_items = load_items(ds, ds.manifest().test, cfg.model);

  std::filesystem::create_directories(cfg.out);
  TrainResult result;
  result.checkpoint = cfg.out / "final.ckpt";
  result.log = cfg.out / "train_log.jsonl";

  auto model = init_params<float>(cfg.model, cfg.seed);
  AdamW<float> opt(model.params);
  detail::BatchSampler sampler(items.size(), mix_seed(cfg.seed, 0x6261746368ULL));
  std::ofstream log(result.log, std::ios::trunc);
  if (!log) throw IOError("cannot write '" + result.log.string() + "'");
  const auto start = std::chrono::steady_clock::now();
  auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<BatchEntry> batch;
    const auto picks = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    for (std::size_t i = 0; i < picks.size(); ++i) {
      BatchEntry e;
      e.item = &items[picks[i]];
      const std::uint64_t key = mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 1000003ULL + i);
      e.stitch_seed = mix_seed(key, 1);
      if (cfg.augment) {
        Rng rng(mix_seed(key, 2));
        e.raster = augment_raster(e.item->raster, cfg.model.channels, cfg.model.height, cfg.model.width, rng);
      }
      batch.push_back(std::move(e));
    }
    auto r = batch_gradients(model, batch, cfg.weights, cfg.stitch, cfg.workers);
    const double norm = clip_gradients(r.grads, cfg.clip_norm);
    log << detail::log_record(step, r.loss, norm, wall()).dump() << '\n';
    if (!std::isfinite(r.loss.total) || !std::isfinite(norm)) {
      log.flush();
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
    }
    opt.step(model.params, r.grads, cfg.lr_transformer, cfg.lr_embed, cfg.weight_decay);
    result.last = r.loss;
    result.steps = step;
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      write_file_atomic(cfg.out / ("step_" + std::to_string(step) + ".ckpt"), model_checkpoint(model, step));
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      nlohmann::json rec = {{"step", step}, {"eval_train", to_json(evaluate_model(model, items))}};
      if (!test_items.empty()) rec["eval_test"] = to_json(evaluate_model(model, test_items));
      log << rec.dump() << '\n';
    }
    if (progress && (step % 50 == 0 || step == cfg.steps))
      *progress << "step " << step << "/" << cfg.steps << " loss " << r.loss.total << " (" << wall() << " s)\n"
                << std::flush;
  }
  write_file_atomic(result.checkpoint, model_checkpoint(model, result.steps));
  return result;
}

/// Metrics of `model` predictions on a dataset split.
inline MetricsReport eval_checkpoint(const std::filesystem::path& ckpt, const std::filesystem::path& dataset,
                                     const std::string& split, const DecodeOptions& opt = {}) {
  const auto loaded = load_model_file(ckpt);
  const Dataset ds(dataset);
  const auto items = load_items(ds, ds.manifest().split(split), loaded.model.config);
  return evaluate_model(loaded.model, items, opt);
}

/// Harness check: ground-truth patterns scored against themselves.
inline MetricsReport eval_ground_truth(const std::filesystem::path& dataset, const std::string& split) {
  const Dataset ds(dataset);
  std::vector<SewingPattern> gts;
  for (int id : ds.manifest().split(split)) gts.push_back(ds.load(id).pattern);
  return evaluate(gts, gts);
}

}  // namespace sewkit
