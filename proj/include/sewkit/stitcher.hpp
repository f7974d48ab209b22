#pragma once

// Stitch decoding from per-edge tags: pairwise similarity, then greedy
// row/column elimination over the upper triangle.

#include <algorithm>
#include <cstdint>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "sewkit/errors.hpp"
#include "sewkit/pattern.hpp"

namespace sewkit {

/// Default acceptance threshold -(margin / 2)^2 for the default margin of 2.
inline constexpr double kDefaultStitchThreshold = -1.0;

struct SimilarityMatrix {
  std::size_t size = 0;
  std::vector<double> values;  // row-major [size, size]
  std::vector<EdgeRef> edge_ids;

  double at(std::size_t a, std::size_t b) const { return values[a * size + b]; }
};

/// values[a][b] = -|tag_a - tag_b|^2 for tags laid out row-major [M, dim].
inline SimilarityMatrix similarity_matrix(std::span<const double> tags, std::size_t dim, std::vector<EdgeRef> edge_ids) {
  const std::size_t m = edge_ids.size();
  if (tags.size() != m * dim) throw ShapeMismatch("similarity_matrix: tag count does not match edge ids");
  SimilarityMatrix s;
  s.size = m;
  s.edge_ids = std::move(edge_ids);
  s.values.assign(m * m, 0.0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = tags[a * dim + c] - tags[b * dim + c];
        d += diff * diff;
      }
      s.values[a * m + b] = s.values[b * m + a] = -d;
    }
  return s;
}

/// Index pairs (a < b) chosen by repeatedly taking the largest remaining
/// upper-triangle entry between non-free edges and eliminating both rows and
/// columns. Stops once the maximum falls below `threshold`; ties go to the
/// smallest (row, col).
inline std::vector<std::pair<std::size_t, std::size_t>> greedy_pairs(const SimilarityMatrix& sim,
                                                                      std::span<const std::uint8_t> free_mask,
                                                                      double threshold = kDefaultStitchThreshold) {
  const std::size_t m = sim.size;
  if (!free_mask.empty() && free_mask.size() != m) throw LengthMismatch("greedy_decode: free mask length differs from matrix");
  auto is_free = [&](std::size_t i) { return !free_mask.empty() && free_mask[i]; };
  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  for (std::size_t a = 0; a < m; ++a) {
    if (is_free(a)) continue;
    for (std::size_t b = a + 1; b < m; ++b)
      if (!is_free(b) && sim.at(a, b) >= threshold) cand.emplace_back(sim.at(a, b), a, b);
  }
  std::sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) {
    if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
    return std::tie(std::get<1>(x), std::get<2>(x)) < std::tie(std::get<1>(y), std::get<2>(y));
  });
  std::vector<std::uint8_t> used(m, 0);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [v, a, b] : cand) {
    if (used[a] || used[b]) continue;
    used[a] = used[b] = 1;
    out.emplace_back(a, b);
  }
  return out;
}

inline std::vector<Stitch> greedy_decode(const SimilarityMatrix& sim, std::span<const std::uint8_t> free_mask,
                                         double threshold = kDefaultStitchThreshold) {
  if (sim.edge_ids.size() != sim.size) throw LengthMismatch("greedy_decode: edge ids do not match matrix size");
  std::vector<Stitch> out;
  for (auto [a, b] : greedy_pairs(sim, free_mask, threshold)) out.push_back(Stitch::make(sim.edge_ids[a], sim.edge_ids[b]));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sewkit
