#pragma once

// Training objective. All terms are built on the tape so they differentiate
// through the model:
//
//   total = lambda1 * (shape + loop + rt) + lambda2 * stitch + lambda3 * pose
//           + padding_weight * padding
//
// `shape` compares support vectors (differences between every pair of panel
// vertices, vertices being edge endpoints and Bezier midpoints), which ties
// the edges of a panel together instead of scoring each edge in isolation.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "sewkit/autodiff.hpp"
#include "sewkit/errors.hpp"
#include "sewkit/geometry.hpp"
#include "sewkit/io.hpp"
#include "sewkit/pattern.hpp"
#include "sewkit/pose.hpp"

namespace sewkit {

struct LossWeights {
  double lambda1 = 10.0;  // panel
  double lambda2 = 0.5;   // stitch
  double lambda3 = 1.0;   // pose
  /// Pulls padded edge rows toward zero so inference-time pruning works.
  double padding = 10.0;
};

struct StitchLossConfig {
  double margin = 2.0;
  int neg_samples = 4;
  double bce_weight = 1.0;
  /// Seed for drawing negative pairs; vary it per step during training.
  std::uint64_t seed = 0;
  /// Keeps the push-term distance differentiable at coincident tags.
  double distance_eps = 1e-12;
};

/// Ground-truth stitch structure over the M valid edges, in slot order.
struct StitchTargets {
  std::vector<std::size_t> rows;                             // flat slot * E_max + row
  std::vector<std::pair<std::size_t, std::size_t>> stitched;  // indices into rows
  std::vector<std::uint8_t> free;                            // per valid edge
};

inline StitchTargets stitch_targets(const SewingPattern& gt, const PatternTensor& t) {
  StitchTargets out;
  std::map<EdgeRef, std::size_t> index;
  for (int k = 0; k < t.num_classes; ++k)
    for (int j = 0; j < t.max_edges; ++j)
      if (t.has_edge(k, j)) {
        index[{k, j}] = out.rows.size();
        out.rows.push_back(static_cast<std::size_t>(k * t.max_edges + j));
      }
  out.free.assign(out.rows.size(), 1);
  for (const auto& s : gt.stitches) {
    const auto a = index.at(s.first);
    const auto b = index.at(s.second);
    out.stitched.emplace_back(a, b);
    out.free[a] = 0;
    out.free[b] = 0;
  }
  return out;
}

struct LossTargets {
  PatternTensor gt;
  StitchTargets stitches;
  PoseVector theta;
};

inline LossTargets make_targets(const SewingPattern& gt, const PoseVector& theta, int max_edges = kDefaultMaxEdges,
                                int num_classes = kDefaultClasses) {
  LossTargets t;
  t.gt = to_tensor(gt, max_edges, num_classes);
  t.stitches = stitch_targets(gt, t.gt);
  t.theta = theta;
  return t;
}

namespace detail {

/// [P, 2n] matrix with -1 at column a and +1 at column b for each pair a < b.
inline std::vector<double> pair_difference_matrix(std::size_t n) {
  const std::size_t p = n * (n - 1) / 2;
  std::vector<double> m(p * n, 0.0);
  std::size_t row = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b, ++row) {
      m[row * n + a] = -1.0;
      m[row * n + b] = 1.0;
    }
  return m;
}

template <std::floating_point T>
std::vector<T> cast_vec(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

/// Panel vertices [2n, 2] ordered [end_0, mid_0, end_1, mid_1, ...] from edge
/// rows [n, 4], built from tape primitives.
template <std::floating_point T>
ad::Var<T> vertices_on_tape(ad::Tape<T>& t, const ad::Var<T>& rows) {
  const std::size_t n = rows.dim(0);
  std::vector<T> lower(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) lower[i * n + j] = T(1);
  auto chord = ad::slice(rows, 1, 0, 2);
  auto dx = ad::slice(rows, 1, 0, 1);
  auto dy = ad::slice(rows, 1, 1, 1);
  auto cx = ad::slice(rows, 1, 2, 1);
  auto cy = ad::slice(rows, 1, 3, 1);
  auto ends = ad::matmul(t.constant({n, n}, std::move(lower)), chord);
  auto starts = ad::sub(ends, chord);
  // control offset cx * d + cy * perp(d), perp(d) = (-dy, dx)
  auto off_x = ad::sub(ad::mul(cx, dx), ad::mul(cy, dy));
  auto off_y = ad::add(ad::mul(cx, dy), ad::mul(cy, dx));
  auto offset = ad::concat<T>({off_x, off_y}, 1);
  auto mids = ad::add(ad::add(starts, ad::scale(chord, T(0.25))), ad::scale(offset, T(0.5)));
  return ad::reshape(ad::concat<T>({ends, mids}, 1), {2 * n, 2});
}

inline std::vector<std::size_t> valid_slots(const PatternTensor& gt) {
  std::vector<std::size_t> out;
  for (int k = 0; k < gt.num_classes; ++k)
    if (gt.has_panel(k)) out.push_back(static_cast<std::size_t>(k));
  return out;
}

}  // namespace detail

/// Mean over valid panels of the mean squared L2 error between predicted and
/// ground-truth support vectors. Uses the first n_k rows of each slot, n_k
/// being the ground-truth edge count. `edges` is [K, E, 4].
template <std::floating_point T>
ad::Var<T> shape_loss(ad::Tape<T>& t, const ad::Var<T>& edges, const PatternTensor& gt) {
  const std::size_t K = static_cast<std::size_t>(gt.num_classes), E = static_cast<std::size_t>(gt.max_edges);
  if (edges.shape() != ad::Shape{K, E, 4}) throw ShapeMismatch("shape_loss: edges " + ad::to_string(edges.shape()));
  auto flat = ad::reshape(edges, {K * E, 4});
  std::vector<ad::Var<T>> per_panel;
  for (int k = 0; k < gt.num_classes; ++k) {
    if (!gt.has_panel(k)) continue;
    const std::size_t n = static_cast<std::size_t>(gt.edge_count(k));
    if (n == 0) continue;
    auto rows = ad::slice(flat, 0, static_cast<std::size_t>(k) * E, n);
    auto verts = detail::vertices_on_tape(t, rows);
    const std::size_t nv = 2 * n;
    const std::size_t pairs = nv * (nv - 1) / 2;
    auto diff = t.constant({pairs, nv}, detail::cast_vec<T>(detail::pair_difference_matrix(nv)));
    auto pred_sv = ad::matmul(diff, verts);

    std::vector<Edge> gt_edges;
    for (std::size_t j = 0; j < n; ++j) {
      const int r = static_cast<int>(j);
      gt_edges.push_back({gt.edge(k, r, 0), gt.edge(k, r, 1), gt.edge(k, r, 2), gt.edge(k, r, 3)});
    }
    const auto sv = support_vectors(panel_vertices(gt_edges));
    std::vector<T> target;
    target.reserve(2 * sv.size());
    for (const auto& v : sv) {
      target.push_back(static_cast<T>(v.x()));
      target.push_back(static_cast<T>(v.y()));
    }
    auto err = ad::sub(pred_sv, t.constant({pairs, 2}, std::move(target)));
    per_panel.push_back(ad::scale(ad::sum(ad::square(err)), T(1) / static_cast<T>(pairs)));
  }
  if (per_panel.empty()) return t.scalar(T(0));
  std::vector<ad::Var<T>> reshaped;
  for (auto& v : per_panel) reshaped.push_back(ad::reshape(v, {1}));
  return ad::mean(ad::concat<T>(reshaped, 0));
}

/// Per-edge baseline: mean over valid panels of the mean squared L2 error of
/// the (dx, dy, cx, cy) rows.
template <std::floating_point T>
ad::Var<T> shape_loss_nt(ad::Tape<T>& t, const ad::Var<T>& edges, const PatternTensor& gt) {
  const std::size_t K = static_cast<std::size_t>(gt.num_classes), E = static_cast<std::size_t>(gt.max_edges);
  if (edges.shape() != ad::Shape{K, E, 4}) throw ShapeMismatch("shape_loss_nt: edges " + ad::to_string(edges.shape()));
  std::vector<std::size_t> rows;
  std::vector<T> weights, target;
  std::size_t panels = 0;
  for (int k = 0; k < gt.num_classes; ++k) panels += gt.has_panel(k) && gt.edge_count(k) > 0;
  if (panels == 0) return t.scalar(T(0));
  for (int k = 0; k < gt.num_classes; ++k) {
    if (!gt.has_panel(k)) continue;
    const int n = gt.edge_count(k);
    for (int j = 0; j < n; ++j) {
      rows.push_back(static_cast<std::size_t>(k) * E + static_cast<std::size_t>(j));
      weights.push_back(T(1) / static_cast<T>(n * static_cast<int>(panels)));
      for (int c = 0; c < 4; ++c) target.push_back(static_cast<T>(gt.edge(k, j, c)));
    }
  }
  const std::size_t m = rows.size();
  auto pred = ad::gather_rows(ad::reshape(edges, {K * E, 4}), std::move(rows));
  auto sq = ad::sum(ad::square(ad::sub(pred, t.constant({m, 4}, std::move(target)))), 1);
  return ad::sum(ad::mul(sq, t.constant({m}, std::move(weights))));
}

/// Mean smoothed norm, sqrt(|row|^2 + d^2) - d, of every edge row the ground
/// truth leaves empty. It grows linearly away from zero so pads are pushed
/// all the way under the pruning length.
template <std::floating_point T>
ad::Var<T> padding_loss(ad::Tape<T>& t, const ad::Var<T>& edges, const PatternTensor& gt) {
  constexpr double d = 1.0 / 1024.0;  // d and d^2 are exact in float32
  const std::size_t K = static_cast<std::size_t>(gt.num_classes), E = static_cast<std::size_t>(gt.max_edges);
  std::vector<std::size_t> rows;
  for (int k = 0; k < gt.num_classes; ++k)
    for (int j = 0; j < gt.max_edges; ++j)
      if (!gt.has_edge(k, j)) rows.push_back(static_cast<std::size_t>(k) * E + static_cast<std::size_t>(j));
  if (rows.empty()) return t.scalar(T(0));
  const std::size_t m = rows.size();
  auto pred = ad::gather_rows(ad::reshape(edges, {K * E, 4}), std::move(rows));
  auto norms = ad::sqrt(ad::add(ad::sum(ad::square(pred), 1), t.constant({m}, std::vector<T>(m, static_cast<T>(d * d)))));
  auto excess = ad::sub(norms, t.constant({m}, std::vector<T>(m, static_cast<T>(d))));
  return ad::scale(ad::sum(excess), T(1) / static_cast<T>(m));
}

/// Mean over valid panels of |sum_j (dx_j, dy_j)|^2 over all E rows of the slot.
template <std::floating_point T>
ad::Var<T> loop_loss(ad::Tape<T>& t, const ad::Var<T>& edges, const PatternTensor& gt) {
  const auto slots = detail::valid_slots(gt);
  if (slots.empty()) return t.scalar(T(0));
  const std::size_t K = static_cast<std::size_t>(gt.num_classes), E = static_cast<std::size_t>(gt.max_edges);
  auto picked = ad::reshape(ad::gather_rows(ad::reshape(edges, {K, E * 4}), slots), {slots.size(), E, 4});
  auto sums = ad::sum(ad::slice(picked, 2, 0, 2), 1);  // [V, 2]
  return ad::scale(ad::sum(ad::square(sums)), T(1) / static_cast<T>(slots.size()));
}

/// Mean over valid panels of min(|q - q*|^2, |q + q*|^2) + |T - T*|^2.
template <std::floating_point T>
ad::Var<T> rt_loss(ad::Tape<T>& t, const ad::Var<T>& rot, const ad::Var<T>& trans, const PatternTensor& gt) {
  const auto slots = detail::valid_slots(gt);
  if (slots.empty()) return t.scalar(T(0));
  const std::size_t v = slots.size();
  std::vector<T> q, tr;
  for (auto k : slots) {
    for (std::size_t c = 0; c < 4; ++c) q.push_back(static_cast<T>(gt.rot[k * 4 + c]));
    for (std::size_t c = 0; c < 3; ++c) tr.push_back(static_cast<T>(gt.trans[k * 3 + c]));
  }
  auto pr = ad::gather_rows(rot, slots);
  auto pt = ad::gather_rows(trans, slots);
  auto gq = t.constant({v, 4}, std::move(q));
  auto minus = ad::sum(ad::square(ad::sub(pr, gq)), 1);
  auto plus = ad::sum(ad::square(ad::add(pr, gq)), 1);
  auto rot_term = ad::minimum(minus, plus);
  auto trans_term = ad::sum(ad::square(ad::sub(pt, t.constant({v, 3}, std::move(tr)))), 1);
  return ad::mean(ad::add(rot_term, trans_term));
}

/// Negative pairs (a < b over valid edges): both non-free, not stitched.
/// All candidates are used when there are at most neg_samples per positive,
/// otherwise a seeded subset of that size.
inline std::vector<std::pair<std::size_t, std::size_t>> negative_pairs(const StitchTargets& st, const StitchLossConfig& cfg) {
  std::set<std::pair<std::size_t, std::size_t>> positive;
  for (auto [a, b] : st.stitched) positive.insert({std::min(a, b), std::max(a, b)});
  std::vector<std::pair<std::size_t, std::size_t>> cand;
  const std::size_t m = st.rows.size();
  for (std::size_t a = 0; a < m; ++a) {
    if (st.free[a]) continue;
    for (std::size_t b = a + 1; b < m; ++b)
      if (!st.free[b] && !positive.count({a, b})) cand.push_back({a, b});
  }
  const std::size_t budget = static_cast<std::size_t>(cfg.neg_samples) * std::max<std::size_t>(1, st.stitched.size());
  if (cand.size() <= budget) return cand;
  Rng rng(cfg.seed);
  for (std::size_t k = 0; k < budget; ++k) std::swap(cand[k], cand[k + rng.below(cand.size() - k)]);
  cand.resize(budget);
  std::sort(cand.begin(), cand.end());
  return cand;
}

/// Pull stitched tags together, push sampled non-stitched pairs beyond the
/// margin, and classify free edges. `tags` is [K*E, d_tag], `free_logits` [K*E].
template <std::floating_point T>
ad::Var<T> stitch_loss(ad::Tape<T>& t, const ad::Var<T>& tags, const ad::Var<T>& free_logits, const StitchTargets& st,
                       const StitchLossConfig& cfg) {
  if (st.rows.empty()) return t.scalar(T(0));
  std::vector<ad::Var<T>> terms;
  auto pair_sqdist = [&](const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<std::size_t> ia, ib;
    for (auto [a, b] : pairs) {
      ia.push_back(st.rows[a]);
      ib.push_back(st.rows[b]);
    }
    return ad::sum(ad::square(ad::sub(ad::gather_rows(tags, std::move(ia)), ad::gather_rows(tags, std::move(ib)))), 1);
  };
  if (!st.stitched.empty()) terms.push_back(ad::mean(pair_sqdist(st.stitched)));
  const auto neg = negative_pairs(st, cfg);
  if (!neg.empty()) {
    auto d = ad::sqrt(ad::add_scalar(pair_sqdist(neg), static_cast<T>(cfg.distance_eps)));
    auto hinge = ad::relu(ad::add_scalar(ad::scale(d, T(-1)), static_cast<T>(cfg.margin)));
    terms.push_back(ad::mean(ad::square(hinge)));
  }
  const std::size_t m = st.rows.size();
  auto z = ad::reshape(ad::gather_rows(ad::reshape(free_logits, {free_logits.size(), 1}), st.rows), {m});
  std::vector<T> y(st.free.begin(), st.free.end());
  auto bce = ad::mean(ad::sub(ad::softplus(z), ad::mul(z, t.constant({m}, std::move(y)))));
  terms.push_back(ad::scale(bce, static_cast<T>(cfg.bce_weight)));
  ad::Var<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

template <std::floating_point T>
ad::Var<T> pose_loss(ad::Tape<T>& t, const ad::Var<T>& theta_pred, std::span<const double> theta_gt) {
  if (theta_pred.size() != theta_gt.size())
    throw ShapeMismatch("pose_loss: prediction " + ad::to_string(theta_pred.shape()) + " vs target of " +
                        std::to_string(theta_gt.size()));
  std::vector<T> gt(theta_gt.begin(), theta_gt.end());
  return ad::mean(ad::square(ad::sub(theta_pred, t.constant(theta_pred.shape(), std::move(gt)))));
}

template <std::floating_point T>
struct LossParts {
  ad::Var<T> shape, loop, rt, stitch, pose, padding;
};

template <std::floating_point T>
ad::Var<T> total_loss(const LossParts<T>& p, const LossWeights& w) {
  auto panel = ad::add(ad::add(p.shape, p.loop), p.rt);
  auto total = ad::add(ad::scale(panel, static_cast<T>(w.lambda1)), ad::scale(p.stitch, static_cast<T>(w.lambda2)));
  total = ad::add(total, ad::scale(p.pose, static_cast<T>(w.lambda3)));
  return ad::add(total, ad::scale(p.padding, static_cast<T>(w.padding)));
}

// ---------------------------------------------------------------------------
// Off-tape helpers

/// Sum over vertex pairs a < b of the unsquared L2 error between predicted and
/// ground-truth support vectors.
inline double unsquared_support_error(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  if (pred.size() != gt.size()) throw LengthMismatch("vertex lists differ in length");
  const auto sp = support_vectors(pred);
  const auto sg = support_vectors(gt);
  double s = 0.0;
  for (std::size_t i = 0; i < sp.size(); ++i) s += (sp[i] - sg[i]).norm();
  return s;
}

}  // namespace sewkit
