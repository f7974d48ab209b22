#pragma once

// Pattern-level evaluation: edge-parameter distance, placement errors,
// panel/edge count accuracy and stitch precision/recall/F1.

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sewkit/errors.hpp"
#include "sewkit/pattern.hpp"

namespace sewkit {

struct MetricsReport {
  double panel_l2 = 0.0;
  double rot_l2 = 0.0;
  double trans_l2 = 0.0;
  double num_panel_acc = 0.0;
  double num_edges_acc = 0.0;
  double stitch_precision = 0.0;
  double stitch_recall = 0.0;
  double stitch_f1 = 0.0;
  int n_patterns = 0;

  bool perfect() const {
    return panel_l2 == 0.0 && rot_l2 == 0.0 && trans_l2 == 0.0 && num_panel_acc == 1.0 && num_edges_acc == 1.0 &&
           stitch_precision == 1.0 && stitch_recall == 1.0 && stitch_f1 == 1.0;
  }
};

struct StitchScore {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
};

inline double harmonic_mean(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Set comparison of canonical stitches. An empty prediction has
/// precision 1 (0/0 taken as 1); an empty ground truth has recall 1.
inline StitchScore stitch_prf(std::span<const Stitch> pred, std::span<const Stitch> gt) {
  const std::set<Stitch> p(pred.begin(), pred.end()), g(gt.begin(), gt.end());
  std::size_t hit = 0;
  for (const auto& s : p) hit += g.contains(s);
  StitchScore out;
  out.precision = p.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(p.size());
  out.recall = g.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(g.size());
  out.f1 = harmonic_mean(out.precision, out.recall);
  return out;
}

namespace detail {

/// Unsquared distance between edge-parameter vectors, zero-padded to the
/// longer panel.
inline double edge_distance(const std::vector<Edge>& a, const std::vector<Edge>* b) {
  double s = 0.0;
  const std::size_t n = std::max(a.size(), b ? b->size() : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Edge ea = i < a.size() ? a[i] : Edge{};
    const Edge eb = b && i < b->size() ? (*b)[i] : Edge{};
    s += (ea.dx - eb.dx) * (ea.dx - eb.dx) + (ea.dy - eb.dy) * (ea.dy - eb.dy) + (ea.cx - eb.cx) * (ea.cx - eb.cx) +
         (ea.cy - eb.cy) * (ea.cy - eb.cy);
  }
  return std::sqrt(s);
}

inline double quaternion_distance(const Quaternion& q, const Quaternion& r) {
  double minus = 0.0, plus = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    minus += (q[c] - r[c]) * (q[c] - r[c]);
    plus += (q[c] + r[c]) * (q[c] + r[c]);
  }
  return std::sqrt(std::min(minus, plus));
}

struct PairScore {
  double panel_l2 = 0.0, rot_l2 = 0.0, trans_l2 = 0.0, num_panel = 0.0, num_edges = 0.0;
  StitchScore stitch;
};

/// A predicted panel missing from a GT slot is scored against zero edges,
/// the identity rotation and the origin.
inline PairScore score_pair(const SewingPattern& pred, const SewingPattern& gt) {
  PairScore s;
  std::set<int> pred_slots, gt_slots;
  for (const auto& p : pred.panels) pred_slots.insert(p.class_id);
  std::size_t common = 0, edges_match = 0;
  for (const auto& g : gt.panels) {
    gt_slots.insert(g.class_id);
    const Panel* p = pred.find_panel(g.class_id);
    const Panel fallback{};
    const Panel& q = p ? *p : fallback;
    s.panel_l2 += edge_distance(g.edges, p ? &p->edges : nullptr);
    s.rot_l2 += quaternion_distance(g.rotation, q.rotation);
    double t = 0.0;
    for (std::size_t c = 0; c < 3; ++c) t += (g.translation[c] - q.translation[c]) * (g.translation[c] - q.translation[c]);
    s.trans_l2 += std::sqrt(t);
    if (p) {
      ++common;
      edges_match += p->edges.size() == g.edges.size();
    }
  }
  if (!gt.panels.empty()) {
    const double n = static_cast<double>(gt.panels.size());
    s.panel_l2 /= n;
    s.rot_l2 /= n;
    s.trans_l2 /= n;
  }
  s.num_panel = pred_slots == gt_slots ? 1.0 : 0.0;
  if (common > 0) s.num_edges = static_cast<double>(edges_match) / static_cast<double>(common);
  else s.num_edges = gt.panels.empty() && pred.panels.empty() ? 1.0 : 0.0;
  s.stitch = stitch_prf(pred.stitches, gt.stitches);
  return s;
}

}  // namespace detail

/// Index-aligned comparison, averaged over pairs. F1 is the harmonic mean
/// of the averaged precision and recall.
inline MetricsReport evaluate(std::span<const SewingPattern> preds, std::span<const SewingPattern> gts) {
  if (preds.size() != gts.size())
    throw LengthMismatch("evaluate: " + std::to_string(preds.size()) + " predictions for " + std::to_string(gts.size()) +
                         " ground-truth patterns");
  std::vector<detail::PairScore> scores(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) scores[i] = detail::score_pair(preds[i], gts[i]);
  MetricsReport r;
  r.n_patterns = static_cast<int>(scores.size());
  if (scores.empty()) return r;
  for (const auto& s : scores) {
    r.panel_l2 += s.panel_l2;
    r.rot_l2 += s.rot_l2;
    r.trans_l2 += s.trans_l2;
    r.num_panel_acc += s.num_panel;
    r.num_edges_acc += s.num_edges;
    r.stitch_precision += s.stitch.precision;
    r.stitch_recall += s.stitch.recall;
  }
  const double n = static_cast<double>(scores.size());
  for (double* v : {&r.panel_l2, &r.rot_l2, &r.trans_l2, &r.num_panel_acc, &r.num_edges_acc, &r.stitch_precision,
                    &r.stitch_recall})
    *v /= n;
  r.stitch_f1 = harmonic_mean(r.stitch_precision, r.stitch_recall);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"panel_l2", r.panel_l2},
          {"rot_l2", r.rot_l2},
          {"trans_l2", r.trans_l2},
          {"num_panel_acc", r.num_panel_acc},
          {"num_edges_acc", r.num_edges_acc},
          {"stitch_precision", r.stitch_precision},
          {"stitch_recall", r.stitch_recall},
          {"stitch_f1", r.stitch_f1},
          {"n_patterns", r.n_patterns}};
}

inline std::string report_json(const MetricsReport& r, const nlohmann::json& config = nlohmann::json::object()) {
  nlohmann::json j = to_json(r);
  j["config"] = config;
  return j.dump(1) + "\n";
}

inline std::string report_table(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "patterns        %d\npanel L2        %.4f\nrotation L2     %.4f\ntranslation L2  %.4f\n"
                "#panels acc     %.1f%%\n#edges acc      %.1f%%\nstitch P/R/F1   %.1f%% / %.1f%% / %.1f%%\n",
                r.n_patterns, r.panel_l2, r.rot_l2, r.trans_l2, 100 * r.num_panel_acc, 100 * r.num_edges_acc,
                100 * r.stitch_precision, 100 * r.stitch_recall, 100 * r.stitch_f1);
  return buf;
}

}  // namespace sewkit
