#pragma once

// Finite-difference gradient checks over every tape primitive, the combined
// training loss and the small model, shared by the CLI and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "sewkit/gradcheck.hpp"
#include "sewkit/losses.hpp"
#include "sewkit/model.hpp"

namespace sewkit {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool pass = false;
};

namespace detail {

using CheckFn = std::function<ad::Var<double>(ad::Tape<double>&, std::span<const ad::Var<double>>)>;

struct PrimitiveCheck {
  const char* name;
  std::vector<ad::Shape> shapes;
  CheckFn f;
  double lo = -1.0;
  double hi = 1.0;
};

inline std::vector<PrimitiveCheck> primitive_checks() {
  using namespace ad;
  return {
      {"add", {{3, 4}, {4}}, [](auto&, auto x) { return add(x[0], x[1]); }},
      {"sub", {{4}, {2, 4}}, [](auto&, auto x) { return sub(x[0], x[1]); }},
      {"mul", {{2, 3, 4}, {3, 4}}, [](auto&, auto x) { return mul(x[0], x[1]); }},
      {"scale", {{5}}, [](auto&, auto x) { return scale(x[0], 2.5); }},
      {"matmul", {{3, 5}, {5, 2}}, [](auto&, auto x) { return matmul(x[0], x[1]); }},
      {"transpose", {{3, 5}}, [](auto&, auto x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, [](auto&, auto x) { return reshape(x[0], {2, 6}); }},
      {"concat", {{2, 3}, {1, 3}}, [](auto&, auto x) { return concat<double>({x[0], x[1]}, 0); }},
      {"slice", {{3, 6}}, [](auto&, auto x) { return slice(x[0], 1, 2, 3); }},
      {"sum", {{3, 4, 2}}, [](auto&, auto x) { return sum(x[0], 1); }},
      {"mean", {{3, 4}}, [](auto&, auto x) { return mean(x[0], 0); }},
      {"sqrt", {{6}}, [](auto&, auto x) { return sqrt(x[0]); }, 0.5, 2.0},
      {"exp", {{6}}, [](auto&, auto x) { return exp(x[0]); }},
      {"log", {{6}}, [](auto&, auto x) { return log(x[0]); }, 0.5, 2.0},
      {"relu", {{6}}, [](auto&, auto x) { return relu(x[0]); }, 0.1, 1.0},
      {"gelu", {{8}}, [](auto&, auto x) { return gelu(x[0]); }, -3.0, 3.0},
      {"softplus", {{8}}, [](auto&, auto x) { return softplus(x[0]); }, -5.0, 5.0},
      {"square", {{4}}, [](auto&, auto x) { return square(x[0]); }},
      {"softmax", {{3, 5}}, [](auto&, auto x) { return softmax(x[0]); }},
      {"layernorm", {{4, 6}, {6}, {6}}, [](auto&, auto x) { return layernorm(x[0], x[1], x[2]); }},
      {"gather_rows", {{5, 3}}, [](auto&, auto x) { return gather_rows(x[0], {4, 0, 4, 2}); }},
      {"l2_normalize", {{3, 4}}, [](auto&, auto x) { return l2_normalize(x[0]); }},
      {"minimum", {{7}, {7}}, [](auto&, auto x) { return minimum(x[0], x[1]); }},
  };
}

inline ad::Array<double> random_array(ad::Shape shape, Rng& rng, double lo, double hi) {
  ad::Array<double> a(std::move(shape));
  for (auto& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

/// sum(w * y) with fixed random weights so every output coordinate matters.
inline ad::Var<double> weighted_sum(ad::Tape<double>& t, const ad::Var<double>& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  std::vector<double> w(y.size());
  for (auto& v : w) v = rng.uniform(-1, 1);
  return ad::sum(ad::mul(y, t.constant(y.shape(), w)));
}

/// Two stitched triangles and a square, laid out for the small model.
inline SewingPattern check_pattern() {
  SewingPattern p;
  Panel a;
  a.class_id = 0;
  a.edges = {{0.6, 0, 0, 0.1}, {-0.3, 0.5, 0, 0}, {-0.3, -0.5, 0, 0}};
  a.translation = {0, 0.2, 0.1};
  Panel b = a;
  b.class_id = 1;
  b.rotation = {0, 0, 1, 0};
  b.translation = {0, 0.2, -0.1};
  Panel s;
  s.class_id = 3;
  s.edges = {{0.4, 0, 0, 0}, {0, 0.4, 0, 0}, {-0.4, 0, 0, 0}, {0, -0.4, 0, 0}};
  s.rotation = {0.6, 0, 0.8, 0};
  s.translation = {0.3, -0.2, 0};
  p.panels = {a, b, s};
  p.stitches = {Stitch::make({0, 1}, {1, 2}), Stitch::make({0, 2}, {1, 1})};
  p.canonicalize();
  return p;
}

inline GradCheckResult result(std::string name, const ad::CheckReport& r, double tol) {
  return {std::move(name), r.max_rel_error, tol, r.coordinates, r.passed(tol)};
}

}  // namespace detail

/// Every primitive over `seeds` random draws; the worst error is reported.
inline std::vector<GradCheckResult> primitive_gradchecks(int seeds = 10, double tol = 1e-5) {
  std::vector<GradCheckResult> out;
  for (const auto& c : detail::primitive_checks()) {
    GradCheckResult worst{c.name, 0.0, tol, 0, true};
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(static_cast<std::uint64_t>(seed) * 31 + 1);
      std::vector<ad::Array<double>> xs;
      for (const auto& s : c.shapes) xs.push_back(detail::random_array(s, rng, c.lo, c.hi));
      auto f = [&](ad::Tape<double>& t, std::span<const ad::Var<double>> x) {
        return detail::weighted_sum(t, c.f(t, x), static_cast<std::uint64_t>(seed));
      };
      const auto r = ad::grad_check(f, xs);
      worst.coordinates += r.coordinates;
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
      worst.pass = worst.pass && r.passed(tol);
    }
    out.push_back(worst);
  }
  return out;
}

/// Weighted total of all loss terms as a function of raw head outputs.
inline GradCheckResult loss_gradcheck(double tol = 1e-3) {
  const auto targets = make_targets(detail::check_pattern(), sample_pose(3), 4, 4);
  Rng rng(21);
  std::vector<ad::Array<double>> xs = {detail::random_array({4, 4, 4}, rng, -1, 1), detail::random_array({4, 4}, rng, -1, 1),
                                       detail::random_array({4, 3}, rng, -1, 1), detail::random_array({16, 3}, rng, -1, 1),
                                       detail::random_array({16}, rng, -1, 1), detail::random_array({72}, rng, -1, 1)};
  StitchLossConfig cfg;
  cfg.margin = 5.0;  // every sampled negative stays inside the hinge
  auto f = [&](ad::Tape<double>& t, std::span<const ad::Var<double>> v) {
    LossParts<double> parts;
    parts.shape = shape_loss(t, v[0], targets.gt);
    parts.loop = loop_loss(t, v[0], targets.gt);
    parts.rt = rt_loss(t, ad::l2_normalize(v[1]), v[2], targets.gt);
    parts.stitch = stitch_loss(t, v[3], v[4], targets.stitches, cfg);
    parts.pose = pose_loss(t, v[5], std::span<const double>(targets.theta.theta));
    parts.padding = padding_loss(t, v[0], targets.gt);
    return total_loss(parts, LossWeights{});
  };
  return detail::result("total_loss", ad::grad_check(f, xs), tol);
}

/// Total loss through a forward pass of the small model, with respect to
/// every parameter tensor (a seeded coordinate subset unless `full`).
inline GradCheckResult model_gradcheck(bool full = false, double tol = 1e-3) {
  const auto c = toy_config();
  const auto m = init_params<double>(c, 11);
  const auto tg = make_targets(detail::check_pattern(), sample_pose(5), c.max_edges, c.num_classes);
  Rng rng(13);
  std::vector<float> raster(static_cast<std::size_t>(c.channels * c.height * c.width));
  for (auto& v : raster) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
  std::vector<ad::Array<double>> xs;
  for (const auto& p : m.params) xs.push_back(p.value);
  auto f = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> vars) {
    Bound<double> P{std::vector<ad::Var<double>>(vars.begin(), vars.end())};
    auto out = forward(tape, m, P, raster);
    LossParts<double> parts;
    parts.shape = shape_loss(tape, out.edges, tg.gt);
    parts.loop = loop_loss(tape, out.edges, tg.gt);
    parts.rt = rt_loss(tape, out.rot, out.trans, tg.gt);
    parts.stitch = stitch_loss(tape, out.tags, out.free_logits, tg.stitches, StitchLossConfig{});
    parts.pose = pose_loss(tape, out.theta, std::span<const double>(tg.theta.theta));
    parts.padding = padding_loss(tape, out.edges, tg.gt);
    return total_loss(parts, LossWeights{});
  };
  ad::CheckOptions opt;
  if (!full) opt.max_coords_per_input = 8;
  return detail::result(full ? "model_full" : "model", ad::grad_check(f, xs, opt), tol);
}

inline std::vector<GradCheckResult> run_gradchecks(bool full = false) {
  auto out = primitive_gradchecks();
  out.push_back(loss_gradcheck());
  out.push_back(model_gradcheck(full));
  return out;
}

}  // namespace sewkit
