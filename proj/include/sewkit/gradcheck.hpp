#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "sewkit/autodiff.hpp"
#include "sewkit/io.hpp"

namespace sewkit::ad {

struct CheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tolerance) const { return std::isfinite(max_rel_error) && max_rel_error < tolerance; }
};

struct CheckOptions {
  double step = 1e-5;
  /// Denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Coordinates checked per input; a seeded subset is drawn when smaller
  /// than the input.
  std::size_t max_coords_per_input = std::numeric_limits<std::size_t>::max();
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// `f(tape, vars)` must build a scalar from the given leaves and be pure.
template <class F>
CheckReport grad_check(F&& f, const std::vector<Array<double>>& xs, const CheckOptions& opt = {}) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    Var<double> root = f(tape, std::span<const Var<double>>(vars));
    tape.backward(root);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<Array<double>>& inputs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, false));
    return f(tape, std::span<const Var<double>>(vars)).item();
  };

  CheckReport report;
  double total = 0.0;
  std::vector<Array<double>> work = xs;
  Rng rng(opt.seed);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<std::size_t> coords(xs[i].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.max_coords_per_input) {
      for (std::size_t k = 0; k < opt.max_coords_per_input; ++k)
        std::swap(coords[k], coords[k + rng.below(coords.size() - k)]);
      coords.resize(opt.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double orig = work[i].data[j];
      work[i].data[j] = orig + opt.step;
      const double up = evaluate(work);
      work[i].data[j] = orig - opt.step;
      const double down = evaluate(work);
      work[i].data[j] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[i][j], numeric, opt.floor);
      total += err;
      ++report.coordinates;
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = err;
        report.worst_input = i;
        report.worst_index = j;
        report.worst_analytic = analytic[i][j];
        report.worst_numeric = numeric;
      }
    }
  }
  report.mean_rel_error = report.coordinates ? total / static_cast<double>(report.coordinates) : 0.0;
  return report;
}

}  // namespace sewkit::ad
