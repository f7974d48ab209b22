// Acceptance run: one PASS/FAIL line per criterion. Tolerances and frozen
// baselines live in this file.
//
//   sewkit_acceptance [--only 1,2,...] [--work DIR] [--verbose]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "sewkit/selfcheck.hpp"
#include "sewkit/trainer.hpp"

using namespace sewkit;
namespace fs = std::filesystem;

namespace {

// Criterion 1.
constexpr double kPrimitiveTol = 1e-5;
constexpr double kCompositeTol = 1e-3;
constexpr double kGradcheckSeconds = 120.0;
// Criteria 2 and 3.
constexpr double kIdentityTol = 1e-12;
constexpr int kIdentityPairs = 10000;
constexpr int kScalings = 100;
// Criterion 4.
constexpr int kSmallInstances = 10000;
constexpr int kLargeInstances = 1000;
// Criterion 5. Panel L2 of the first accepted overfit run.
constexpr double kOverfitPanelL2Baseline = 0.3717;
constexpr double kBaselineSlack = 1.10;
constexpr double kLossRatio = 0.10;
constexpr double kOverfitSeconds = 30 * 60.0;
// Criterion 6.
constexpr double kTestPanelAcc = 0.9;
constexpr double kTestStitchF1 = 0.8;
// Criterion 7.
constexpr int kRoundTrips = 1000;
// Criterion 8.
constexpr double kLossAtTruth = 1e-9;
constexpr int kTruthPatterns = 200;

const fs::path kConfigs = SEWKIT_CONFIGS;
const fs::path kBinary = SEWKIT_BIN;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Context {
  fs::path work;
  bool verbose = false;
};

Outcome gradients(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradchecks(false);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double prim = 0.0, comp = 0.0;
  bool ok = true;
  std::string failed;
  for (const auto& r : results) {
    const bool composite = r.name == "total_loss" || r.name == "model";
    const double tol = composite ? kCompositeTol : kPrimitiveTol;
    (composite ? comp : prim) = std::max(composite ? comp : prim, r.max_rel_error);
    if (!(r.max_rel_error < tol)) ok = false, failed += " " + r.name;
  }
  ok = ok && secs < kGradcheckSeconds;
  return {ok, fmt("%zu checks, primitives %.1e < %.0e, composites %.1e < %.0e, %.1f s%s", results.size(), prim, kPrimitiveTol,
                  comp, kCompositeTol, secs, failed.empty() ? "" : (", failed:" + failed).c_str())};
}

Outcome two_edge_identity(const Context&) {
  Rng rng(2024);
  double worst = 0.0;
  int n = 0;
  while (n < kIdentityPairs) {
    const Vec2 v1(rng.uniform(-1, 1), rng.uniform(-1, 1)), v2(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec2 d1(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)), d2(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    const Vec2 s = d1 + d2;
    if (s.norm() <= 1e-6 || d1.norm() == 0.0 || d2.norm() == 0.0) continue;
    const std::vector<Vec2> gt = {Vec2::Zero(), v1, v1 + v2};
    const std::vector<Vec2> pred = {Vec2::Zero(), v1 + d1, v1 + v2 + s};
    const double c1 = d1.dot(s) / (d1.norm() * s.norm());
    const double c2 = d2.dot(s) / (d2.norm() * s.norm());
    worst = std::max(worst, std::abs(unsquared_support_error(pred, gt) - ((1 + c1) * d1.norm() + (1 + c2) * d2.norm())));
    ++n;
  }
  return {worst <= kIdentityTol, fmt("%d pairs, max |diff| %.2e <= %.0e", n, worst, kIdentityTol)};
}

PatternTensor square_tensor(const std::vector<Edge>& edges) {
  SewingPattern p;
  Panel panel;
  panel.edges = edges;
  p.panels = {panel};
  return to_tensor(p);
}

template <class Loss>
double eval_loss(Loss loss, const std::vector<Edge>& pred, const std::vector<Edge>& gt) {
  ad::Tape<double> tape;
  const auto t = square_tensor(pred);
  auto e = tape.constant({static_cast<std::size_t>(t.num_classes), static_cast<std::size_t>(t.max_edges), 4}, t.edges);
  return loss(tape, e, square_tensor(gt)).item();
}

Outcome discrimination(const Context&) {
  Rng rng(77);
  double worst_nt = 0.0, min_gap = std::numeric_limits<double>::infinity();
  bool ok = true;
  for (int i = 0; i < kScalings; ++i) {
    const double side = rng.uniform(0.3, 1.5);
    const double delta = rng.uniform(0.005, 0.2) * side;
    auto [a, b] = oracle::spread_vs_corner_pair(side, delta);
    auto gt = oracle::unit_square();
    for (auto& e : gt) e.dx *= side, e.dy *= side;
    auto nt = [](auto& t, auto& e, const auto& g) { return shape_loss_nt(t, e, g); };
    auto sl = [](auto& t, auto& e, const auto& g) { return shape_loss(t, e, g); };
    const double diff = std::abs(eval_loss(nt, a, gt) - eval_loss(nt, b, gt));
    const double la = eval_loss(sl, a, gt), lb = eval_loss(sl, b, gt);
    worst_nt = std::max(worst_nt, diff);
    min_gap = std::min(min_gap, lb - la);
    ok = ok && diff <= kIdentityTol && la < lb;
  }
  return {ok, fmt("%d scalings, max |nt(A)-nt(B)| %.2e, min shape(B)-shape(A) %.3e > 0", kScalings, worst_nt, min_gap)};
}

Outcome stitch_oracle(const Context&) {
  Rng rng(404);
  int mismatches = 0;
  for (int i = 0; i < kSmallInstances; ++i) {
    const std::size_t m = rng.below(7);
    auto s = oracle::random_symmetric(rng, m);
    std::vector<std::uint8_t> free(m);
    for (auto& f : free) f = rng.uniform() < 0.2;
    const double threshold = rng.uniform(-3, 0);
    mismatches += greedy_pairs(s, free, threshold) != oracle::greedy_reference(s, free, threshold);
  }
  int exhaustive = 0;
  for (std::size_t m = 2; m <= 6; ++m) {
    const std::size_t entries = m * (m - 1) / 2;
    for (std::uint32_t bits = 0; bits < (1u << entries); ++bits) {
      SimilarityMatrix s;
      s.size = m;
      s.values.assign(m * m, 0.0);
      std::size_t k = 0;
      for (std::size_t a = 0; a < m; ++a) {
        s.edge_ids.push_back({0, static_cast<int>(a)});
        for (std::size_t b = a + 1; b < m; ++b, ++k) s.values[a * m + b] = s.values[b * m + a] = (bits >> k & 1u) ? 1.0 : -1.0;
      }
      for (double threshold : {-1.0, 0.0}) {
        mismatches += greedy_pairs(s, {}, threshold) != oracle::greedy_reference(s, {}, threshold);
        ++exhaustive;
      }
    }
  }
  int not_matching = 0;
  for (int i = 0; i < kLargeInstances; ++i) {
    std::set<std::size_t> seen;
    for (auto [a, b] : greedy_pairs(oracle::random_symmetric(rng, 40), {}, -2.0))
      if (!seen.insert(a).second || !seen.insert(b).second) ++not_matching;
  }
  return {mismatches == 0 && not_matching == 0,
          fmt("%d random + %d sign-pattern instances, %d mismatches; %d M=40 instances, %d matching violations", kSmallInstances,
              exhaustive, mismatches, kLargeInstances, not_matching)};
}

nlohmann::json load_config(const std::string& name) { return nlohmann::json::parse(read_file(kConfigs / name)); }

/// gen + train from the named configs with all paths under the work directory.
struct Run {
  fs::path dataset, out;
  TrainResult result;
  double seconds = 0.0;
};

Run gen_and_train(const Context& ctx, const std::string& data_cfg, const std::string& train_cfg) {
  Run r;
  auto dc = load_config(data_cfg).get<DatasetConfig>();
  auto tc = load_config(train_cfg).get<TrainConfig>();
  r.dataset = ctx.work / tc.dataset;
  r.out = ctx.work / tc.out;
  fs::remove_all(r.dataset);
  fs::remove_all(r.out);
  const auto t0 = std::chrono::steady_clock::now();
  build_dataset(dc, r.dataset);
  tc.dataset = r.dataset;
  tc.out = r.out;
  r.result = train(tc, ctx.verbose ? &std::cerr : nullptr);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<double> logged_totals(const fs::path& log) {
  std::vector<double> out;
  std::istringstream in(read_file(log));
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("total")) out.push_back(j["total"].get<double>());
  }
  return out;
}

Outcome overfit(const Context& ctx) {
  const auto run = gen_and_train(ctx, "overfit_data.json", "overfit_train.json");
  const auto report = eval_checkpoint(run.result.checkpoint, run.dataset, "train", DecodeOptions{});
  const auto totals = logged_totals(run.result.log);
  if (totals.size() < 20) return {false, "training log too short"};
  auto mean = [](auto b, auto e) { return std::accumulate(b, e, 0.0) / static_cast<double>(e - b); };
  const double first = mean(totals.begin(), totals.begin() + 10);
  const double last = mean(totals.end() - 10, totals.end());
  const double limit = kOverfitPanelL2Baseline * kBaselineSlack;
  const bool ok = report.num_panel_acc == 1.0 && report.stitch_f1 == 1.0 && report.panel_l2 < limit &&
                  last < kLossRatio * first && run.seconds < kOverfitSeconds;
  return {ok, fmt("#panel acc %.3f, stitch F1 %.3f, panel L2 %.4f < %.4f, loss %.4f -> %.4f (ratio %.3f < %.2f), %.0f s",
                  report.num_panel_acc, report.stitch_f1, report.panel_l2, limit, first, last, last / first, kLossRatio,
                  run.seconds)};
}

Outcome generalization(const Context& ctx) {
  const auto run = gen_and_train(ctx, "generalization_data.json", "generalization_train.json");
  const auto report = eval_checkpoint(run.result.checkpoint, run.dataset, "test", DecodeOptions{});
  const bool ok = report.num_panel_acc >= kTestPanelAcc && report.stitch_f1 >= kTestStitchF1;
  return {ok, fmt("test #panel acc %.3f >= %.2f, test stitch F1 %.3f >= %.2f (panel L2 %.3f, %d patterns), %.0f s",
                  report.num_panel_acc, kTestPanelAcc, report.stitch_f1, kTestStitchF1, report.panel_l2, report.n_patterns,
                  run.seconds)};
}

SewingPattern round_trip_instance(std::uint64_t seed) {
  if (seed % 2 == 0) return oracle::random_pattern(seed);
  return sample_pattern(templates()[seed / 2 % templates().size()], seed);
}

Outcome round_trips(const Context&) {
  int file = 0, tensor = 0, ckpt = 0;
  for (int i = 0; i < kRoundTrips; ++i) {
    const auto seed = static_cast<std::uint64_t>(i);
    const auto p = round_trip_instance(seed);
    const auto bytes = serialize_pattern(p);
    file += serialize_pattern(parse_pattern(bytes)) == bytes;

    const auto t = to_tensor(p);
    auto back = from_tensor(t);
    back.stitches = p.stitches;
    back.metadata = p.metadata;
    const auto again = to_tensor(back);
    tensor += serialize_pattern(back) == bytes && again.edges == t.edges && again.rot == t.rot && again.trans == t.trans &&
              again.edge_mask == t.edge_mask && again.panel_mask == t.panel_mask;

    ModelConfig mc = toy_config();
    mc.num_classes = mc.channels = kDefaultClasses;
    mc.max_edges = kDefaultMaxEdges;
    const auto cb = model_checkpoint(init_params<float>(mc, seed), i);
    const auto loaded = load_model_checkpoint(cb);
    ckpt += model_checkpoint(loaded.model, loaded.step) == cb;
  }
  const bool ok = file == kRoundTrips && tensor == kRoundTrips && ckpt == kRoundTrips;
  return {ok, fmt("pattern file %d/%d, tensor %d/%d, checkpoint %d/%d byte-identical", file, kRoundTrips, tensor, kRoundTrips,
                  ckpt, kRoundTrips)};
}

Outcome loss_at_truth(const Context&) {
  double worst = 0.0;
  std::vector<SewingPattern> gts;
  for (int i = 0; i < kTruthPatterns; ++i) {
    const auto seed = static_cast<std::uint64_t>(1000 + i);
    const auto p = sample_pattern(templates()[static_cast<std::size_t>(i) % templates().size()], seed);
    gts.push_back(p);
    const auto theta = sample_pose(seed);
    const auto tg = make_targets(p, theta);
    const std::size_t K = kDefaultClasses, E = kDefaultMaxEdges;
    ad::Tape<double> tape;
    auto e = tape.constant({K, E, 4}, tg.gt.edges);
    auto rot = tape.constant({K, 4}, tg.gt.rot);
    auto tr = tape.constant({K, 3}, tg.gt.trans);
    std::vector<double> tags(K * E * 2, 0.0), logits(K * E, 0.0);
    for (std::size_t j = 0; j < tg.stitches.rows.size(); ++j) {
      tags[tg.stitches.rows[j] * 2] = 10.0 * static_cast<double>(j);
      logits[tg.stitches.rows[j]] = tg.stitches.free[j] ? 25.0 : -25.0;
    }
    for (auto [a, b] : tg.stitches.stitched) tags[tg.stitches.rows[b] * 2] = tags[tg.stitches.rows[a] * 2];
    auto th = tape.constant({72}, std::vector<double>(theta.theta.begin(), theta.theta.end()));
    for (double v : {shape_loss(tape, e, tg.gt).item(), shape_loss_nt(tape, e, tg.gt).item(), loop_loss(tape, e, tg.gt).item(),
                     rt_loss(tape, rot, tr, tg.gt).item(), padding_loss(tape, e, tg.gt).item(),
                     stitch_loss(tape, tape.constant({K * E, 2}, tags), tape.constant({K * E}, logits), tg.stitches, {}).item(),
                     pose_loss(tape, th, std::span<const double>(theta.theta)).item()})
      worst = std::max(worst, std::abs(v));
  }
  const auto report = evaluate(gts, gts);
  return {worst < kLossAtTruth && report.perfect(),
          fmt("%d patterns, max loss term %.2e < %.0e, ground-truth report %s", kTruthPatterns, worst, kLossAtTruth,
              report.perfect() ? "perfect" : "NOT perfect")};
}

int sewkit(const std::vector<std::string>& args) {
  std::string cmd = "\"" + kBinary.string() + "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " > /dev/null";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) return false;
  for (const auto& f : fa)
    if (read_file(a / f) != read_file(b / f)) return false;
  return true;
}

Outcome determinism(const Context& ctx) {
  const auto dir = ctx.work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto data_cfg = (kConfigs / "overfit_data.json").string();
  const bool gen_ok = sewkit({"gen", "--config", data_cfg, "--out", (dir / "ds_a").string()}) == 0 &&
                      sewkit({"gen", "--config", data_cfg, "--out", (dir / "ds_b").string(), "--workers", "3"}) == 0;
  const bool same_data = gen_ok && same_tree(dir / "ds_a", dir / "ds_b");

  auto tc = load_config("determinism_train.json");
  tc["dataset"] = (dir / "ds_a").string();
  write_file_atomic(dir / "train.json", tc.dump());
  const auto train_cfg = (dir / "train.json").string();
  const bool train_ok = sewkit({"train", "--config", train_cfg, "--out", (dir / "run_a").string(), "--quiet"}) == 0 &&
                        sewkit({"train", "--config", train_cfg, "--out", (dir / "run_b").string(), "--quiet"}) == 0;
  bool same_ckpt = train_ok;
  int files = 0;
  if (train_ok)
    for (const auto& e : fs::directory_iterator(dir / "run_a"))
      if (e.path().extension() == ".ckpt") {
        ++files;
        same_ckpt = same_ckpt && read_file(e.path()) == read_file(dir / "run_b" / e.path().filename());
      }
  same_ckpt = same_ckpt && files > 0;
  return {same_data && same_ckpt, fmt("gen twice (1 and 3 workers): %s; train twice in separate processes: %d checkpoints %s",
                                      same_data ? "identical" : "DIFFERENT", files, same_ckpt ? "identical" : "DIFFERENT")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  Context ctx;
  ctx.work = fs::temp_directory_path() / "sewkit_acceptance";
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--work", ctx.work, "Scratch directory");
  app.add_flag("--verbose", ctx.verbose, "Training progress on standard error");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(ctx.work);

  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", gradients},
      {2, "two-edge identity", two_edge_identity},
      {3, "square A/B discrimination", discrimination},
      {4, "stitch decoder oracle", stitch_oracle},
      {5, "overfit integration", overfit},
      {6, "generalization smoke", generalization},
      {7, "round-trips", round_trips},
      {8, "loss at truth", loss_at_truth},
      {9, "determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
