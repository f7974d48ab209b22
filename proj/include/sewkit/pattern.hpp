#pragma once

// Sewing-pattern data model: panels of quadratic Bezier edges placed in 3D,
// plus the stitch set. Includes the canonical JSON file format and the
// class-slot aligned, zero-padded tensor view used by the model and losses.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sewkit/errors.hpp"
#include "sewkit/io.hpp"

namespace sewkit {

inline constexpr int kDefaultClasses = 24;
inline constexpr int kDefaultMaxEdges = 8;
inline constexpr double kDefaultEpsEdge = 1e-2;
inline constexpr double kDefaultEpsLoop = 1e-6;

/// One quadratic Bezier edge: chord (dx, dy) from start to end, and the
/// control point in the edge-local frame (cx along the chord, cy along its
/// 90 degree counterclockwise perpendicular). (cx, cy) = (0, 0) is straight.
struct Edge {
  double dx = 0.0;
  double dy = 0.0;
  double cx = 0.0;
  double cy = 0.0;

  double length() const noexcept { return std::hypot(dx, dy); }
  bool valid(double eps_edge = kDefaultEpsEdge) const noexcept { return length() > eps_edge; }
  bool operator==(const Edge&) const = default;
};

using Quaternion = std::array<double, 4>;  // (w, x, y, z)
using Vector3 = std::array<double, 3>;

inline double quaternion_norm(const Quaternion& q) {
  return std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
}

struct Panel {
  int class_id = 0;
  std::vector<Edge> edges;
  Quaternion rotation{1.0, 0.0, 0.0, 0.0};
  Vector3 translation{0.0, 0.0, 0.0};

  bool operator==(const Panel&) const = default;
};

/// Reference to edge `edge` of the panel occupying class slot `panel`.
struct EdgeRef {
  int panel = 0;
  int edge = 0;
  auto operator<=>(const EdgeRef&) const = default;
};

/// Unordered pair of edges, stored with first < second.
struct Stitch {
  EdgeRef first;
  EdgeRef second;

  static Stitch make(EdgeRef a, EdgeRef b) {
    if (b < a) std::swap(a, b);
    return {a, b};
  }
  auto operator<=>(const Stitch&) const = default;
};

struct SewingPattern {
  std::vector<Panel> panels;
  std::vector<Stitch> stitches;
  std::map<std::string, std::string> metadata;

  const Panel* find_panel(int class_id) const {
    for (const auto& p : panels)
      if (p.class_id == class_id) return &p;
    return nullptr;
  }

  /// Sorts panels by class slot and stitches into canonical order.
  void canonicalize() {
    std::sort(panels.begin(), panels.end(),
              [](const Panel& a, const Panel& b) { return a.class_id < b.class_id; });
    for (auto& s : stitches) s = Stitch::make(s.first, s.second);
    std::sort(stitches.begin(), stitches.end());
  }

  bool operator==(const SewingPattern&) const = default;
};

// ---------------------------------------------------------------------------
// File format

namespace detail {

inline std::string child(const std::string& path, std::string_view key) {
  return path + "/" + std::string(key);
}
inline std::string child(const std::string& path, std::size_t index) {
  return path + "/" + std::to_string(index);
}

inline const nlohmann::json& field(const nlohmann::json& obj, const std::string& path,
                                   const char* key) {
  if (!obj.is_object()) throw SchemaViolation(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaViolation(child(path, key), "missing field");
  return *it;
}

inline double number(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number()) throw SchemaViolation(path, "expected a number");
  double d = v.get<double>();
  if (!std::isfinite(d)) throw InvariantViolation(path, "value is not finite");
  return d;
}

inline int integer(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number_integer()) throw SchemaViolation(path, "expected an integer");
  return v.get<int>();
}

template <std::size_t N>
std::array<double, N> fixed_array(const nlohmann::json& v, const std::string& path) {
  if (!v.is_array() || v.size() != N)
    throw SchemaViolation(path, "expected an array of " + std::to_string(N) + " numbers");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = number(v[i], child(path, i));
  return out;
}

inline EdgeRef edge_ref(const nlohmann::json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2) throw SchemaViolation(path, "expected [panel, edge]");
  return {integer(v[0], child(path, 0)), integer(v[1], child(path, 1))};
}

inline void append_real_array(std::string& out, std::span<const double> values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_real(values[i]);
  }
  out += ']';
}

inline void append_json_string(std::string& out, const std::string& s) {
  out += nlohmann::json(s).dump();
}

}  // namespace detail

/// Parses the pattern file format. The result is canonicalized (panels by
/// class slot, stitches sorted). Loop closure, edge counts and quaternion
/// norms are left to validate().
inline SewingPattern parse_pattern(std::string_view bytes, int num_classes = kDefaultClasses) {
  using namespace detail;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedFile("", e.what());
  }
  const std::string root;
  if (!doc.is_object()) throw SchemaViolation(root, "document must be an object");
  const auto& version = field(doc, root, "version");
  if (integer(version, "/version") != 1) throw SchemaViolation("/version", "unsupported version");

  SewingPattern p;
  const auto& panels = field(doc, root, "panels");
  if (!panels.is_array()) throw SchemaViolation("/panels", "expected an array");
  std::set<int> seen_classes;
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const std::string path = child("/panels", i);
    const auto& jp = panels[i];
    Panel panel;
    panel.class_id = integer(field(jp, path, "class_id"), child(path, "class_id"));
    if (panel.class_id < 0 || panel.class_id >= num_classes)
      throw InvariantViolation(child(path, "class_id"), "class id out of range");
    if (!seen_classes.insert(panel.class_id).second)
      throw InvariantViolation(child(path, "class_id"), "duplicate class id");
    const std::string epath = child(path, "edges");
    const auto& edges = field(jp, path, "edges");
    if (!edges.is_array()) throw SchemaViolation(epath, "expected an array");
    for (std::size_t j = 0; j < edges.size(); ++j) {
      auto a = fixed_array<4>(edges[j], child(epath, j));
      panel.edges.push_back({a[0], a[1], a[2], a[3]});
    }
    panel.rotation = fixed_array<4>(field(jp, path, "rotation"), child(path, "rotation"));
    panel.translation = fixed_array<3>(field(jp, path, "translation"), child(path, "translation"));
    p.panels.push_back(std::move(panel));
  }

  const auto& stitches = field(doc, root, "stitches");
  if (!stitches.is_array()) throw SchemaViolation("/stitches", "expected an array");
  std::set<EdgeRef> used;
  for (std::size_t i = 0; i < stitches.size(); ++i) {
    const std::string path = child("/stitches", i);
    const auto& js = stitches[i];
    if (!js.is_array() || js.size() != 2) throw SchemaViolation(path, "expected a pair of edges");
    EdgeRef ends[2] = {edge_ref(js[0], child(path, 0)), edge_ref(js[1], child(path, 1))};
    for (int k = 0; k < 2; ++k) {
      const Panel* panel = p.find_panel(ends[k].panel);
      if (!panel) throw InvariantViolation(child(path, k), "references a missing panel");
      if (ends[k].edge < 0 || ends[k].edge >= static_cast<int>(panel->edges.size()))
        throw InvariantViolation(child(path, k), "edge " + std::to_string(ends[k].edge) +
                                                     " does not exist in panel " +
                                                     std::to_string(ends[k].panel));
    }
    if (ends[0] == ends[1]) throw InvariantViolation(path, "stitch joins an edge to itself");
    for (int k = 0; k < 2; ++k)
      if (!used.insert(ends[k]).second)
        throw InvariantViolation(child(path, k), "edge already used by another stitch");
    p.stitches.push_back(Stitch::make(ends[0], ends[1]));
  }

  if (auto it = doc.find("metadata"); it != doc.end()) {
    if (!it->is_object()) throw SchemaViolation("/metadata", "expected an object");
    for (const auto& [key, value] : it->items()) {
      if (!value.is_string()) throw SchemaViolation(child("/metadata", key), "expected a string");
      p.metadata[key] = value.get<std::string>();
    }
  }
  p.canonicalize();
  return p;
}

/// Canonical bytes: sorted keys, 9 significant digits, panels by class slot,
/// stitches sorted; one trailing newline.
inline std::string serialize_pattern(const SewingPattern& pattern) {
  SewingPattern p = pattern;
  p.canonicalize();
  std::string out = "{\"metadata\":{";
  bool first = true;
  for (const auto& [k, v] : p.metadata) {
    if (!first) out += ',';
    first = false;
    detail::append_json_string(out, k);
    out += ':';
    detail::append_json_string(out, v);
  }
  out += "},\"panels\":[";
  for (std::size_t i = 0; i < p.panels.size(); ++i) {
    const auto& panel = p.panels[i];
    if (i) out += ',';
    out += "{\"class_id\":" + std::to_string(panel.class_id) + ",\"edges\":[";
    for (std::size_t j = 0; j < panel.edges.size(); ++j) {
      const auto& e = panel.edges[j];
      if (j) out += ',';
      const double row[4] = {e.dx, e.dy, e.cx, e.cy};
      detail::append_real_array(out, row);
    }
    out += "],\"rotation\":";
    detail::append_real_array(out, panel.rotation);
    out += ",\"translation\":";
    detail::append_real_array(out, panel.translation);
    out += '}';
  }
  out += "],\"stitches\":[";
  for (std::size_t i = 0; i < p.stitches.size(); ++i) {
    const auto& s = p.stitches[i];
    if (i) out += ',';
    out += "[[" + std::to_string(s.first.panel) + ',' + std::to_string(s.first.edge) + "],[" +
           std::to_string(s.second.panel) + ',' + std::to_string(s.second.edge) + "]]";
  }
  out += "],\"version\":1}\n";
  return out;
}

/// Equality at file precision.
inline bool structurally_equal(const SewingPattern& a, const SewingPattern& b) {
  return serialize_pattern(a) == serialize_pattern(b);
}

// ---------------------------------------------------------------------------
// Tensor view

/// Zero-padded, class-slot aligned arrays. Row-major:
/// edges [K, E, 4], rot [K, 4], trans [K, 3], edge_mask [K, E].
struct PatternTensor {
  int num_classes = kDefaultClasses;
  int max_edges = kDefaultMaxEdges;
  std::vector<double> edges;
  std::vector<double> rot;
  std::vector<double> trans;
  std::vector<std::uint8_t> panel_mask;
  std::vector<std::uint8_t> edge_mask;

  PatternTensor() : PatternTensor(kDefaultClasses, kDefaultMaxEdges) {}
  PatternTensor(int k, int e)
      : num_classes(k),
        max_edges(e),
        edges(static_cast<std::size_t>(k * e * 4), 0.0),
        rot(static_cast<std::size_t>(k * 4), 0.0),
        trans(static_cast<std::size_t>(k * 3), 0.0),
        panel_mask(static_cast<std::size_t>(k), 0),
        edge_mask(static_cast<std::size_t>(k * e), 0) {}

  double& edge(int slot, int row, int col) { return edges[static_cast<std::size_t>((slot * max_edges + row) * 4 + col)]; }
  double edge(int slot, int row, int col) const { return edges[static_cast<std::size_t>((slot * max_edges + row) * 4 + col)]; }
  bool has_panel(int slot) const { return panel_mask[static_cast<std::size_t>(slot)] != 0; }
  bool has_edge(int slot, int row) const { return edge_mask[static_cast<std::size_t>(slot * max_edges + row)] != 0; }
  int edge_count(int slot) const {
    int n = 0;
    for (int j = 0; j < max_edges; ++j) n += has_edge(slot, j);
    return n;
  }

  bool operator==(const PatternTensor&) const = default;
};

inline PatternTensor to_tensor(const SewingPattern& p, int max_edges = kDefaultMaxEdges,
                               int num_classes = kDefaultClasses) {
  PatternTensor t(num_classes, max_edges);
  for (const auto& panel : p.panels) {
    if (panel.class_id < 0 || panel.class_id >= num_classes)
      throw CapacityExceeded("class id " + std::to_string(panel.class_id) + " outside " +
                             std::to_string(num_classes) + " slots");
    if (static_cast<int>(panel.edges.size()) > max_edges)
      throw CapacityExceeded("panel " + std::to_string(panel.class_id) + " has " +
                             std::to_string(panel.edges.size()) + " edges, capacity " +
                             std::to_string(max_edges));
    const int k = panel.class_id;
    t.panel_mask[static_cast<std::size_t>(k)] = 1;
    for (std::size_t j = 0; j < panel.edges.size(); ++j) {
      const auto& e = panel.edges[j];
      const int row = static_cast<int>(j);
      t.edge(k, row, 0) = e.dx;
      t.edge(k, row, 1) = e.dy;
      t.edge(k, row, 2) = e.cx;
      t.edge(k, row, 3) = e.cy;
      t.edge_mask[static_cast<std::size_t>(k * max_edges + row)] = 1;
    }
    for (int c = 0; c < 4; ++c) t.rot[static_cast<std::size_t>(k * 4 + c)] = panel.rotation[static_cast<std::size_t>(c)];
    for (int c = 0; c < 3; ++c) t.trans[static_cast<std::size_t>(k * 3 + c)] = panel.translation[static_cast<std::size_t>(c)];
  }
  return t;
}

/// Result of pruning a raw tensor: the pattern plus, for every surviving edge
/// in pattern order, the tensor row it came from.
struct PrunedPattern {
  SewingPattern pattern;
  std::vector<EdgeRef> source_rows;  // (slot, tensor row)
  std::vector<EdgeRef> kept_refs;    // (slot, index within the pruned panel)
};

/// Drops edges no longer than eps_edge and panels left with fewer than three
/// edges. Masks are ignored so this works on raw model output.
inline PrunedPattern prune_tensor(const PatternTensor& t, double eps_edge = kDefaultEpsEdge) {
  PrunedPattern out;
  for (int k = 0; k < t.num_classes; ++k) {
    Panel panel;
    panel.class_id = k;
    std::vector<int> rows;
    for (int j = 0; j < t.max_edges; ++j) {
      Edge e{t.edge(k, j, 0), t.edge(k, j, 1), t.edge(k, j, 2), t.edge(k, j, 3)};
      if (e.length() > eps_edge) {
        panel.edges.push_back(e);
        rows.push_back(j);
      }
    }
    if (panel.edges.size() < 3) continue;
    for (int c = 0; c < 4; ++c) panel.rotation[static_cast<std::size_t>(c)] = t.rot[static_cast<std::size_t>(k * 4 + c)];
    for (int c = 0; c < 3; ++c) panel.translation[static_cast<std::size_t>(c)] = t.trans[static_cast<std::size_t>(k * 3 + c)];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.source_rows.push_back({k, rows[i]});
      out.kept_refs.push_back({k, static_cast<int>(i)});
    }
    out.pattern.panels.push_back(std::move(panel));
  }
  return out;
}

inline SewingPattern from_tensor(const PatternTensor& t, double eps_edge = kDefaultEpsEdge) {
  return prune_tensor(t, eps_edge).pattern;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationConfig {
  double eps_loop = kDefaultEpsLoop;
  double eps_edge = kDefaultEpsEdge;
  double quaternion_tolerance = 1e-6;
  int min_edges = 3;
};

struct PanelReport {
  int class_id = 0;
  double loop_residual = 0.0;
  int valid_edges = 0;
  bool edge_count_ok = false;
  double quaternion_norm_error = 0.0;
  bool pass = false;
};

struct StitchIssue {
  std::size_t index = 0;
  std::string message;
};

struct ValidationReport {
  std::vector<PanelReport> panels;
  std::vector<StitchIssue> stitch_issues;
  bool pass = false;

  double max_loop_residual() const {
    double m = 0.0;
    for (const auto& p : panels) m = std::max(m, p.loop_residual);
    return m;
  }

  /// Human-readable failure lines, each naming the panel or stitch.
  std::vector<std::string> failures(const ValidationConfig& cfg = {}) const {
    std::vector<std::string> out;
    for (const auto& p : panels) {
      if (p.pass) continue;
      std::string msg = "panel " + std::to_string(p.class_id) + ":";
      if (p.loop_residual > cfg.eps_loop) msg += " loop residual " + format_real(p.loop_residual);
      if (!p.edge_count_ok) msg += " only " + std::to_string(p.valid_edges) + " valid edges";
      if (p.quaternion_norm_error > cfg.quaternion_tolerance)
        msg += " quaternion norm error " + format_real(p.quaternion_norm_error);
      out.push_back(msg);
    }
    for (const auto& s : stitch_issues) out.push_back("stitch " + std::to_string(s.index) + ": " + s.message);
    return out;
  }
};

inline ValidationReport validate(const SewingPattern& p, const ValidationConfig& cfg = {}) {
  ValidationReport report;
  report.pass = true;
  for (const auto& panel : p.panels) {
    PanelReport pr;
    pr.class_id = panel.class_id;
    double sx = 0.0, sy = 0.0;
    for (const auto& e : panel.edges) {
      sx += e.dx;
      sy += e.dy;
      pr.valid_edges += e.valid(cfg.eps_edge);
    }
    pr.loop_residual = std::hypot(sx, sy);
    pr.edge_count_ok = pr.valid_edges >= cfg.min_edges;
    pr.quaternion_norm_error = std::abs(quaternion_norm(panel.rotation) - 1.0);
    pr.pass = pr.loop_residual <= cfg.eps_loop && pr.edge_count_ok &&
              pr.quaternion_norm_error <= cfg.quaternion_tolerance;
    report.pass = report.pass && pr.pass;
    report.panels.push_back(pr);
  }
  std::map<EdgeRef, std::size_t> owner;
  for (std::size_t i = 0; i < p.stitches.size(); ++i) {
    const auto& s = p.stitches[i];
    if (s.first == s.second) report.stitch_issues.push_back({i, "joins an edge to itself"});
    for (const EdgeRef& end : {s.first, s.second}) {
      const Panel* panel = p.find_panel(end.panel);
      if (!panel || end.edge < 0 || end.edge >= static_cast<int>(panel->edges.size())) {
        report.stitch_issues.push_back({i, "references missing edge (" + std::to_string(end.panel) +
                                               "," + std::to_string(end.edge) + ")"});
        continue;
      }
      if (!panel->edges[static_cast<std::size_t>(end.edge)].valid(cfg.eps_edge))
        report.stitch_issues.push_back({i, "references degenerate edge (" +
                                               std::to_string(end.panel) + "," +
                                               std::to_string(end.edge) + ")"});
      auto [it, inserted] = owner.emplace(end, i);
      if (!inserted && it->second != i)
        report.stitch_issues.push_back({i, "edge (" + std::to_string(end.panel) + "," +
                                               std::to_string(end.edge) +
                                               ") already used by stitch " +
                                               std::to_string(it->second)});
    }
  }
  if (!report.stitch_issues.empty()) report.pass = false;
  return report;
}

}  // namespace sewkit
