#pragma once

// Procedural garment templates and the on-disk dataset they populate.
//
// Each template is a fixed panel/stitch topology driven by a handful of
// uniformly drawn parameters. Panels are built from vertex lists so closure
// holds by construction; stitched edges share chord vectors or mirrored
// copies of them so seam lengths match exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sewkit/errors.hpp"
#include "sewkit/geometry.hpp"
#include "sewkit/io.hpp"
#include "sewkit/pattern.hpp"
#include "sewkit/pose.hpp"

namespace sewkit {

struct ParamRange {
  std::string name;
  double lo = 0.0;
  double hi = 0.0;
};

struct TemplateSpec {
  std::string name;
  std::vector<ParamRange> params;
  std::vector<int> slots;
  std::vector<Stitch> stitches;
};

using TemplateParams = std::map<std::string, double>;

namespace detail {

inline Stitch seam(int pa, int ea, int pb, int eb) { return Stitch::make({pa, ea}, {pb, eb}); }

}  // namespace detail

inline const std::vector<TemplateSpec>& templates() {
  using detail::seam;
  static const std::vector<TemplateSpec> all = {
      {"skirt2",
       {{"length", 0.45, 0.9}, {"hem_width", 0.45, 0.8}, {"waist_width", 0.28, 0.42}, {"hem_curve", 0.0, 0.08}},
       {4, 5},
       {seam(4, 1, 5, 3), seam(4, 3, 5, 1)}},
      {"skirt4",
       {{"length", 0.45, 0.9}, {"hem_width", 0.25, 0.42}, {"waist_width", 0.14, 0.21}, {"hem_curve", 0.0, 0.08}},
       {6, 7, 8, 9},
       {seam(6, 1, 7, 3), seam(8, 1, 9, 3), seam(6, 3, 9, 1), seam(7, 1, 8, 3)}},
      {"tee",
       {{"body_width", 0.45, 0.6},
        {"body_length", 0.45, 0.7},
        {"armhole_depth", 0.15, 0.22},
        {"armhole_inset", 0.08, 0.12},
        {"sleeve_length", 0.12, 0.35},
        {"neck_depth_front", 0.06, 0.14},
        {"neck_depth_back", 0.01, 0.04}},
       {0, 1, 2, 3},
       {seam(0, 1, 1, 5), seam(0, 5, 1, 1), seam(2, 2, 0, 4), seam(2, 3, 1, 2), seam(3, 2, 0, 2), seam(3, 3, 1, 4)}},
      {"pants",
       {{"length", 0.6, 0.9},
        {"hem_width", 0.16, 0.26},
        {"waist_width", 0.18, 0.26},
        {"crotch_depth", 0.15, 0.25},
        {"crotch_extension", 0.05, 0.1},
        {"crotch_curve", 0.05, 0.15}},
       {10, 11, 12, 13},
       {seam(10, 1, 12, 1), seam(11, 1, 13, 1), seam(10, 4, 12, 4), seam(11, 4, 13, 4), seam(10, 2, 11, 2),
        seam(12, 2, 13, 2)}},
  };
  return all;
}

inline const TemplateSpec& find_template(std::string_view name) {
  for (const auto& t : templates())
    if (t.name == name) return t;
  throw ConfigError("unknown template '" + std::string(name) + "'");
}

namespace detail {

inline constexpr double kGrid = 1e-6;

struct Outline {
  std::vector<Vec2> vertices;
  std::vector<std::pair<int, double>> curves;  // (edge index, cy); cx is 0.5
};

/// Edges between consecutive (snapped) vertices, closing back to vertex 0.
/// The panel origin is vertex 0.
inline std::vector<Edge> edges_from(const Outline& o) {
  std::vector<Vec2> v;
  for (const auto& p : o.vertices) v.emplace_back(snap(p.x(), kGrid), snap(p.y(), kGrid));
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Vec2 d = v[(i + 1) % v.size()] - v[i];
    edges.push_back({snap(d.x(), kGrid), snap(d.y(), kGrid), 0.0, 0.0});
  }
  for (auto [i, cy] : o.curves) {
    edges[static_cast<std::size_t>(i)].cx = 0.5;
    edges[static_cast<std::size_t>(i)].cy = snap(cy, kGrid);
  }
  return edges;
}

inline Quaternion rot_y180() { return {0.0, 0.0, 1.0, 0.0}; }
inline Quaternion rot_z(double angle) { return {std::cos(angle / 2), 0.0, 0.0, std::sin(angle / 2)}; }

inline Panel make_panel(int slot, const Outline& o, Quaternion q, Vec3 t) {
  Panel p;
  p.class_id = slot;
  p.edges = edges_from(o);
  p.rotation = q;
  p.translation = {snap(t.x(), kGrid), snap(t.y(), kGrid), snap(t.z(), kGrid)};
  return p;
}

inline Outline trapezoid(double hem, double waist, double length, double hem_curve) {
  return {{{0, 0}, {hem, 0}, {(hem + waist) / 2, length}, {(hem - waist) / 2, length}}, {{0, -hem_curve}}};
}

inline std::vector<Panel> skirt2(const TemplateParams& q) {
  const double L = q.at("length"), h = q.at("hem_width");
  const auto o = trapezoid(h, q.at("waist_width"), L, q.at("hem_curve"));
  return {make_panel(4, o, {1, 0, 0, 0}, {-h / 2, -L / 2, 0.1}), make_panel(5, o, rot_y180(), {h / 2, -L / 2, -0.1})};
}

inline std::vector<Panel> skirt4(const TemplateParams& q) {
  const double L = q.at("length"), h = q.at("hem_width");
  const auto o = trapezoid(h, q.at("waist_width"), L, q.at("hem_curve"));
  return {make_panel(6, o, {1, 0, 0, 0}, {-h, -L / 2, 0.1}), make_panel(7, o, {1, 0, 0, 0}, {0, -L / 2, 0.1}),
          make_panel(8, o, rot_y180(), {h, -L / 2, -0.1}), make_panel(9, o, rot_y180(), {0, -L / 2, -0.1})};
}

/// Body: hem, right side, right armhole, neckline (shoulder to shoulder),
/// left armhole, left side. Sleeve: cuff, side, two cap halves, side; each
/// cap half repeats an armhole chord.
inline std::vector<Panel> tee(const TemplateParams& q) {
  const double W = q.at("body_width"), H = q.at("body_length");
  const double h = q.at("armhole_depth"), a = q.at("armhole_inset"), sl = q.at("sleeve_length");
  auto body = [&](double neck_depth) {
    return Outline{{{0, 0}, {W, 0}, {W, H}, {W - a, H + h}, {a, H + h}, {0, H}}, {{3, 2 * neck_depth / (W - 2 * a)}}};
  };
  const Outline sleeve{{{0, 0}, {2 * a, 0}, {2 * a, sl}, {a, sl + h}, {0, sl}}, {}};
  const double y0 = -(H + h) / 2;
  const double tilt = 50.0 * std::numbers::pi / 180.0;
  auto sleeve_at = [&](int slot, double angle, Vec2 target) {
    const Quaternion rq = rot_z(angle);
    const Vec3 apex = to_eigen(rq) * Vec3(a, sl + h, 0.0);
    return make_panel(slot, sleeve, rq, {target.x() - apex.x(), target.y() - apex.y(), 0.0});
  };
  return {make_panel(0, body(q.at("neck_depth_front")), {1, 0, 0, 0}, {-W / 2, y0, 0.1}),
          make_panel(1, body(q.at("neck_depth_back")), rot_y180(), {W / 2, y0, -0.1}),
          sleeve_at(2, -tilt, {-W / 2 + a / 2, y0 + H + h / 2}), sleeve_at(3, tilt, {W / 2 - a / 2, y0 + H + h / 2})};
}

/// Leg panel: hem, inseam, crotch curve, waist, outseam.
inline std::vector<Panel> pants(const TemplateParams& q) {
  const double L = q.at("length"), hw = q.at("hem_width"), ww = q.at("waist_width");
  const double c = q.at("crotch_depth"), ce = q.at("crotch_extension");
  const Outline leg{{{0, 0}, {hw, 0}, {ww + ce, L - c}, {ww, L}, {0, L}}, {{2, q.at("crotch_curve")}}};
  const double x = ww + ce;
  return {make_panel(10, leg, {1, 0, 0, 0}, {-x, -L / 2, 0.1}), make_panel(11, leg, rot_y180(), {x, -L / 2, 0.1}),
          make_panel(12, leg, {1, 0, 0, 0}, {-x, -L / 2, -0.1}), make_panel(13, leg, rot_y180(), {x, -L / 2, -0.1})};
}

}  // namespace detail

/// Deterministic pattern for explicit parameters. The result is normalized
/// through the file format, so it equals what a reader gets back.
inline SewingPattern build_pattern(const TemplateSpec& t, const TemplateParams& params) {
  for (const auto& r : t.params)
    if (!params.contains(r.name)) throw ConfigError("template '" + t.name + "' needs parameter '" + r.name + "'");
  SewingPattern p;
  if (t.name == "skirt2") p.panels = detail::skirt2(params);
  else if (t.name == "skirt4") p.panels = detail::skirt4(params);
  else if (t.name == "tee") p.panels = detail::tee(params);
  else if (t.name == "pants") p.panels = detail::pants(params);
  else throw ConfigError("no builder for template '" + t.name + "'");
  p.stitches = t.stitches;
  p.metadata["template"] = t.name;
  p.canonicalize();
  return parse_pattern(serialize_pattern(p));
}

inline TemplateParams sample_params(const TemplateSpec& t, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x74706cULL));
  TemplateParams out;
  for (const auto& r : t.params) out[r.name] = snap(rng.uniform(r.lo, r.hi), 1e-4);
  return out;
}

inline SewingPattern sample_pattern(const TemplateSpec& t, std::uint64_t seed) {
  return build_pattern(t, sample_params(t, seed));
}

/// Pose as stored on disk: float32-rounded components.
inline PoseVector sample_stored_pose(std::uint64_t seed) {
  PoseVector p = sample_pose(seed);
  for (auto& v : p.theta) v = static_cast<double>(static_cast<float>(v));
  return p;
}

// ---------------------------------------------------------------------------
// Binary payloads

inline constexpr std::string_view kRasterMagic = "SEWRAS1";

inline std::string encode_raster(const Raster& r) {
  ByteWriter w;
  w.bytes(kRasterMagic);
  w.u32(static_cast<std::uint32_t>(r.channels));
  w.u32(static_cast<std::uint32_t>(r.height));
  w.u32(static_cast<std::uint32_t>(r.width));
  w.raw(r.data.data(), r.data.size() * sizeof(float));
  return w.take();
}

inline Raster decode_raster(std::string_view bytes) {
  ByteReader rd(bytes);
  if (rd.remaining() < kRasterMagic.size() || rd.bytes(kRasterMagic.size()) != kRasterMagic)
    throw IOError("raster: missing SEWRAS1 header");
  const auto c = rd.u32(), h = rd.u32(), w = rd.u32();
  if (c == 0 || h == 0 || w == 0 || c > 4096 || h > 65536 || w > 65536) throw IOError("raster: implausible shape");
  Raster r(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  if (rd.remaining() != r.data.size() * sizeof(float)) throw IOError("raster: payload size does not match header");
  rd.raw(r.data.data(), r.data.size() * sizeof(float));
  return r;
}

inline std::string encode_pose(const PoseVector& p) {
  ByteWriter w;
  for (double v : p.theta) w.f32(static_cast<float>(v));
  return w.take();
}

inline PoseVector decode_pose(std::string_view bytes) {
  if (bytes.size() != kPoseDim * sizeof(float)) throw IOError("pose file must hold 72 float32 values");
  ByteReader rd(bytes);
  PoseVector p;
  for (auto& v : p.theta) v = rd.f32();
  return p;
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetConfig {
  std::string name = "dataset";
  std::uint64_t seed = 0;
  std::map<std::string, int> counts;
  double train_fraction = 0.8;
  int height = 64;
  int width = 64;
  int max_retries = 100;

  RenderConfig render() const {
    RenderConfig r;
    r.height = height;
    r.width = width;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"name", c.name},     {"seed", c.seed},   {"counts", c.counts},          {"train_fraction", c.train_fraction},
       {"height", c.height}, {"width", c.width}, {"max_retries", c.max_retries}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  static const std::set<std::string> known = {"name",   "seed",  "counts",     "train_fraction",
                                              "height", "width", "max_retries"};
  if (!j.is_object()) throw ConfigError("dataset config must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("unknown dataset config key '" + k + "'");
  c.name = j.value("name", c.name);
  c.seed = j.value("seed", c.seed);
  c.counts = j.value("counts", c.counts);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.max_retries = j.value("max_retries", c.max_retries);
  if (c.counts.empty()) throw ConfigError("dataset config needs at least one template count");
  for (const auto& [name, n] : c.counts) {
    find_template(name);
    if (n < 0) throw ConfigError("negative count for template '" + name + "'");
  }
  if (!(c.train_fraction >= 0.0 && c.train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in [0, 1]");
  if (c.height <= 0 || c.width <= 0) throw ConfigError("raster size must be positive");
  if (c.max_retries < 1) throw ConfigError("max_retries must be at least 1");
}

struct SampleRecord {
  int id = 0;
  std::string template_name;
  std::uint64_t seed = 0;
  TemplateParams params;

  bool operator==(const SampleRecord&) const = default;
};

struct Manifest {
  DatasetConfig config;
  std::vector<int> train;
  std::vector<int> test;
  std::vector<SampleRecord> samples;

  const SampleRecord& record(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= samples.size()) throw DatasetMissing("no sample with id " + std::to_string(id));
    return samples[static_cast<std::size_t>(id)];
  }
  const std::vector<int>& split(std::string_view name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + std::string(name) + "'");
  }
};

inline std::string manifest_json(const Manifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : m.samples)
    samples.push_back({{"id", s.id}, {"template", s.template_name}, {"seed", s.seed}, {"params", s.params}});
  nlohmann::json j = {{"version", 1}, {"config", m.config}, {"train", m.train}, {"test", m.test}, {"samples", samples}};
  return j.dump(1) + "\n";
}

inline Manifest parse_manifest(std::string_view bytes) {
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(bytes);
    if (j.at("version").get<int>() != 1) throw IOError("unsupported manifest version");
    m.config = j.at("config").get<DatasetConfig>();
    m.train = j.at("train").get<std::vector<int>>();
    m.test = j.at("test").get<std::vector<int>>();
    for (const auto& s : j.at("samples")) {
      SampleRecord r;
      r.id = s.at("id").get<int>();
      r.template_name = s.at("template").get<std::string>();
      r.seed = s.at("seed").get<std::uint64_t>();
      r.params = s.at("params").get<TemplateParams>();
      if (r.id != static_cast<int>(m.samples.size())) throw IOError("manifest sample ids must be 0..N-1 in order");
      m.samples.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IOError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

struct DatasetPaths {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path pattern(int id) const { return root / "patterns" / (std::to_string(id) + ".json"); }
  std::filesystem::path raster(int id) const { return root / "rasters" / (std::to_string(id) + ".bin"); }
  std::filesystem::path pose(int id) const { return root / "poses" / (std::to_string(id) + ".bin"); }
};

namespace detail {

inline std::string param_key(const std::string& name, const TemplateParams& params) {
  std::string key = name;
  for (const auto& [k, v] : params) key += "|" + std::to_string(std::llround(v * 1000.0));
  return key;
}

inline std::string pose_key(const PoseVector& p) {
  std::string key;
  for (double v : p.theta) key += std::to_string(std::llround(v * 1000.0)) + ",";
  return key;
}

inline void write_sample(const DatasetPaths& paths, const SampleRecord& rec, const RenderConfig& render) {
  const auto pattern = build_pattern(find_template(rec.template_name), rec.params);
  const auto pose = sample_stored_pose(rec.seed);
  write_file_atomic(paths.pattern(rec.id), serialize_pattern(pattern));
  write_file_atomic(paths.raster(rec.id), encode_raster(render_raster(pattern, pose, render)));
  write_file_atomic(paths.pose(rec.id), encode_pose(pose));
}

}  // namespace detail

/// Sample records in template order, each re-drawn until neither its
/// quantized parameters nor its pose repeat an earlier record.
inline std::vector<SampleRecord> draw_records(const DatasetConfig& cfg, std::span<const TemplateSpec> specs) {
  std::vector<SampleRecord> out;
  std::set<std::string> seen_params, seen_poses;
  int id = 0;
  for (const auto& t : specs) {
    auto it = cfg.counts.find(t.name);
    if (it == cfg.counts.end()) continue;
    for (int i = 0; i < it->second; ++i, ++id) {
      bool accepted = false;
      for (int attempt = 0; attempt < cfg.max_retries && !accepted; ++attempt) {
        SampleRecord rec{id, t.name, mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(id)), attempt), {}};
        rec.params = sample_params(t, rec.seed);
        auto pk = detail::param_key(t.name, rec.params);
        auto qk = detail::pose_key(sample_stored_pose(rec.seed));
        if (seen_params.contains(pk) || seen_poses.contains(qk)) continue;
        seen_params.insert(std::move(pk));
        seen_poses.insert(std::move(qk));
        out.push_back(std::move(rec));
        accepted = true;
      }
      if (!accepted)
        throw DuplicateAfterMaxRetries("sample " + std::to_string(id) + " (" + t.name +
                                       ") repeats an earlier garment or pose after " +
                                       std::to_string(cfg.max_retries) + " draws");
    }
  }
  return out;
}

/// Draws every record (sequentially, so retries are reproducible), then
/// renders and writes per-id files on `workers` threads, and finally the
/// manifest. Outputs do not depend on the worker count.
inline Manifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out, int workers = 1) {
  Manifest m;
  m.config = cfg;
  m.samples = draw_records(cfg, templates());

  std::vector<int> order(m.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(mix_seed(cfg.seed, 0x73706c6974ULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(order.size())));
  m.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.test.begin(), m.test.end());

  const DatasetPaths paths{out};
  for (auto sub : {"patterns", "rasters", "poses"}) {
    std::error_code ec;
    std::filesystem::create_directories(out / sub, ec);
    if (ec) throw IOError("cannot create '" + (out / sub).string() + "': " + ec.message());
  }
  const RenderConfig render = cfg.render();
  const std::size_t n_workers = static_cast<std::size_t>(std::clamp(workers, 1, 64));
  std::vector<std::exception_ptr> errors(n_workers);
  auto job = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < m.samples.size(); i += n_workers) detail::write_sample(paths, m.samples[i], render);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (n_workers == 1) {
    job(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(job, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  write_file_atomic(paths.manifest(), manifest_json(m));
  return m;
}

struct Sample {
  int id = 0;
  Raster raster;
  PatternTensor gt;
  PoseVector theta;
  SewingPattern pattern;
  std::filesystem::path pattern_file;
};

class Dataset {
 public:
  explicit Dataset(std::filesystem::path root) : paths_{std::move(root)} {
    if (!std::filesystem::exists(paths_.manifest()))
      throw DatasetMissing("no manifest.json under '" + paths_.root.string() + "'");
    manifest_ = parse_manifest(read_file(paths_.manifest()));
  }

  const Manifest& manifest() const noexcept { return manifest_; }
  const DatasetPaths& paths() const noexcept { return paths_; }

  Sample load(int id, int max_edges = kDefaultMaxEdges, int num_classes = kDefaultClasses) const {
    manifest_.record(id);
    Sample s;
    s.id = id;
    s.pattern_file = paths_.pattern(id);
    if (!std::filesystem::exists(s.pattern_file)) throw DatasetMissing("missing '" + s.pattern_file.string() + "'");
    s.pattern = parse_pattern(read_file(s.pattern_file), num_classes);
    s.gt = to_tensor(s.pattern, max_edges, num_classes);
    s.raster = decode_raster(read_file(paths_.raster(id)));
    s.theta = decode_pose(read_file(paths_.pose(id)));
    return s;
  }

 private:
  DatasetPaths paths_;
  Manifest manifest_;
};

}  // namespace sewkit
