#pragma once

// Command-line front end. Exit codes: 0 success, 1 validation or check
// failure (and runtime errors), 2 usage or configuration error.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sewkit/datagen.hpp"
#include "sewkit/geometry.hpp"
#include "sewkit/metrics.hpp"
#include "sewkit/selfcheck.hpp"
#include "sewkit/trainer.hpp"

namespace sewkit::cli {

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

struct Options {
  std::string config, out, dataset, ckpt, split = "test", report, raster, svg, pose;
  std::vector<std::string> files;
  int workers = 1;
  int steps = -1;
  double threshold = kDefaultStitchThreshold;
  double eps_edge = kDefaultEpsEdge;
  double eps_loop = kDefaultEpsLoop;
  double scale = 200.0;
  bool pretty = false;
  bool full = false;
  bool quiet = false;
  bool ground_truth = false;
};

inline int gen(const Options& o, std::ostream& out) {
  auto cfg = read_json_file(o.config).get<DatasetConfig>();
  cfg.seed = seed_override(cfg.seed);
  const auto m = build_dataset(cfg, o.out, o.workers);
  out << nlohmann::json{{"out", o.out}, {"samples", m.samples.size()}, {"train", m.train.size()}, {"test", m.test.size()}}.dump()
      << "\n";
  return kOk;
}

inline int validate_files(const Options& o, std::ostream& out) {
  ValidationConfig vc;
  vc.eps_loop = o.eps_loop;
  vc.eps_edge = o.eps_edge;
  bool all = true;
  for (const auto& f : o.files) {
    std::vector<std::string> failures;
    try {
      failures = validate(parse_pattern(read_file(f)), vc).failures(vc);
    } catch (const Error& e) {
      failures = {e.what()};
    }
    all = all && failures.empty();
    if (o.pretty) {
      out << f << ": " << (failures.empty() ? "ok" : "FAILED") << "\n";
      for (const auto& msg : failures) out << "  " << msg << "\n";
    } else {
      out << nlohmann::json{{"file", f}, {"pass", failures.empty()}, {"failures", failures}}.dump() << "\n";
    }
  }
  return all ? kOk : kFailure;
}

inline int render(const Options& o, std::ostream& out) {
  if (o.svg.empty() && o.raster.empty()) throw CLI::ValidationError("render", "give --svg and/or --raster");
  const auto p = parse_pattern(read_file(o.files.at(0)));
  if (!o.svg.empty()) write_file_atomic(o.svg, render_svg(p, o.scale));
  if (!o.raster.empty()) {
    const PoseVector pose = o.pose.empty() ? PoseVector{} : decode_pose(read_file(o.pose));
    write_file_atomic(o.raster, encode_raster(render_raster(p, pose, RenderConfig{})));
  }
  out << nlohmann::json{{"svg", o.svg}, {"raster", o.raster}}.dump() << "\n";
  return kOk;
}

inline int train_cmd(const Options& o, std::ostream& out, std::ostream& err) {
  auto cfg = read_json_file(o.config).get<TrainConfig>();
  if (!o.dataset.empty()) cfg.dataset = o.dataset;
  if (!o.out.empty()) cfg.out = o.out;
  if (o.steps >= 0) cfg.steps = o.steps;
  if (o.workers > 1) cfg.workers = o.workers;
  cfg.seed = seed_override(cfg.seed);
  const auto r = train(cfg, o.quiet ? nullptr : &err);
  out << nlohmann::json{{"checkpoint", r.checkpoint.string()}, {"log", r.log.string()}, {"steps", r.steps}, {"total", r.last.total}}
             .dump()
      << "\n";
  return kOk;
}

inline int eval_cmd(const Options& o, std::ostream& out) {
  const DecodeOptions dec{o.eps_edge, o.threshold};
  const auto report = o.ground_truth ? eval_ground_truth(o.dataset, o.split) : eval_checkpoint(o.ckpt, o.dataset, o.split, dec);
  const nlohmann::json echo = {{"ckpt", o.ground_truth ? "ground-truth" : o.ckpt},
                               {"dataset", o.dataset},
                               {"split", o.split},
                               {"eps_edge", o.eps_edge},
                               {"stitch_threshold", o.threshold}};
  const auto json = report_json(report, echo);
  if (!o.report.empty()) write_file_atomic(o.report, json);
  out << (o.pretty ? report_table(report) : json);
  return kOk;
}

inline int infer(const Options& o, std::ostream& out) {
  const auto loaded = load_model_file(o.ckpt);
  const auto& c = loaded.model.config;
  const auto raster = decode_raster(read_file(o.raster));
  if (raster.channels != c.channels || raster.height != c.height || raster.width != c.width)
    throw ConfigError("raster shape does not match the checkpoint's model");
  const auto pred = run_model(loaded.model, raster.data);
  auto pattern = decode_prediction(pred, {o.eps_edge, o.threshold});
  write_file_atomic(o.out, serialize_pattern(pattern));
  if (!o.pose.empty()) write_file_atomic(o.pose, encode_pose(pred.theta));
  out << nlohmann::json{{"out", o.out}, {"panels", pattern.panels.size()}, {"stitches", pattern.stitches.size()}}.dump() << "\n";
  return kOk;
}

inline int gradcheck(const Options& o, std::ostream& out) {
  bool all = true;
  const auto results = run_gradchecks(o.full);
  for (const auto& r : results) {
    all = all && r.pass;
    if (o.pretty) {
      char line[160];
      std::snprintf(line, sizeof line, "%-14s max rel err %.3e (tol %.0e) %s\n", r.name.c_str(), r.max_rel_error, r.tolerance,
                    r.pass ? "ok" : "FAILED");
      out << line;
    } else {
      out << nlohmann::json{{"check", r.name}, {"max_rel_error", r.max_rel_error}, {"tolerance", r.tolerance},
                            {"coordinates", r.coordinates}, {"pass", r.pass}}
                 .dump()
          << "\n";
    }
  }
  return all ? kOk : kFailure;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sewing-pattern reconstruction toolkit: dataset generation, training, evaluation and inference.", "sewkit"};
  app.require_subcommand(1, 1);
  detail::Options o;
  auto existing = CLI::ExistingFile;

  auto* gen = app.add_subcommand("gen", "Generate a procedural dataset");
  gen->add_option("--config", o.config, "Dataset config (JSON)")->required()->check(existing);
  gen->add_option("--out", o.out, "Output dataset directory")->required();
  gen->add_option("--workers", o.workers, "Parallel writers")->check(CLI::Range(1, 64));

  auto* val = app.add_subcommand("validate", "Check pattern files for closure, edge counts and stitches");
  val->add_option("files", o.files, "Pattern files")->required();
  val->add_option("--eps-loop", o.eps_loop, "Loop residual tolerance");
  val->add_option("--eps-edge", o.eps_edge, "Minimum edge length");
  val->add_flag("--pretty", o.pretty, "Human-readable output");

  auto* ren = app.add_subcommand("render", "Draw a pattern as SVG and/or rasterize it");
  ren->add_option("file", o.files, "Pattern file")->required()->expected(1)->check(existing);
  ren->add_option("--svg", o.svg, "SVG output path");
  ren->add_option("--raster", o.raster, "Raster output path (.bin)");
  ren->add_option("--pose", o.pose, "Pose file applied before rasterizing")->check(existing);
  ren->add_option("--scale", o.scale, "SVG pixels per unit");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "Training config (JSON)")->required()->check(existing);
  tr->add_option("--dataset", o.dataset, "Override the dataset directory");
  tr->add_option("--out", o.out, "Override the run directory");
  tr->add_option("--steps", o.steps, "Override the step count")->check(CLI::NonNegativeNumber);
  tr->add_option("--workers", o.workers, "Per-sample gradient workers")->check(CLI::Range(1, 64));
  tr->add_flag("--quiet", o.quiet, "No progress on standard error");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  auto* ck = ev->add_option("--ckpt", o.ckpt, "Checkpoint")->check(existing);
  ev->add_option("--dataset", o.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", o.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--report", o.report, "Report output path (JSON)");
  ev->add_option("--threshold", o.threshold, "Stitch acceptance threshold");
  ev->add_option("--eps-edge", o.eps_edge, "Edge pruning length");
  ev->add_flag("--ground-truth", o.ground_truth, "Score ground truth against itself")->excludes(ck);
  ev->add_flag("--pretty", o.pretty, "Print a table instead of JSON");

  auto* inf = app.add_subcommand("infer", "Predict a pattern from a raster");
  inf->add_option("--ckpt", o.ckpt, "Checkpoint")->required()->check(existing);
  inf->add_option("--raster", o.raster, "Raster file (.bin)")->required()->check(existing);
  inf->add_option("--out", o.out, "Pattern output path")->required();
  inf->add_option("--pose", o.pose, "Also write the predicted pose vector here");
  inf->add_option("--threshold", o.threshold, "Stitch acceptance threshold");
  inf->add_option("--eps-edge", o.eps_edge, "Edge pruning length");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_flag("--full", o.full, "Check every model coordinate");
  gc->add_flag("--pretty", o.pretty, "Print a table instead of JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n\n";
    const CLI::App* ctx = &app;
    for (auto* sub : app.get_subcommands()) ctx = sub;
    err << ctx->help();
    return kUsage;
  }

  try {
    if (gen->parsed()) return detail::gen(o, out);
    if (val->parsed()) return detail::validate_files(o, out);
    if (ren->parsed()) return detail::render(o, out);
    if (tr->parsed()) return detail::train_cmd(o, out, err);
    if (ev->parsed()) {
      if (!o.ground_truth && o.ckpt.empty()) throw CLI::RequiredError("--ckpt");
      return detail::eval_cmd(o, out);
    }
    if (inf->parsed()) return detail::infer(o, out);
    if (gc->parsed()) return detail::gradcheck(o, out);
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace sewkit::cli
