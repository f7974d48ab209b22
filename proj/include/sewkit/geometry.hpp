#pragma once

// Edge geometry (absolute control points, Bezier evaluation), the vertex and
// support-vector sets used by the shape loss, 3D placement, and the two
// renderers: class-channel rasters for model input and SVG for inspection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "sewkit/errors.hpp"
#include "sewkit/io.hpp"
#include "sewkit/pattern.hpp"
#include "sewkit/pose.hpp"

namespace sewkit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

inline Vec2 perp(const Vec2& v) { return {-v.y(), v.x()}; }

/// start + cx * (end - start) + cy * perp(end - start).
inline Vec2 control_absolute(const Edge& e, const Vec2& start, const Vec2& end) {
  const Vec2 d = end - start;
  return start + e.cx * d + e.cy * perp(d);
}

inline Vec2 bezier_point(const Vec2& p0, const Vec2& c, const Vec2& p1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("bezier parameter " + format_real(t) + " outside [0, 1]");
  const double s = 1.0 - t;
  return s * s * p0 + 2.0 * t * s * c + t * t * p1;
}

/// Edge start points: start_0 = (0, 0), start_j = end_{j-1}.
inline std::vector<Vec2> edge_endpoints(std::span<const Edge> edges) {
  std::vector<Vec2> ends;
  ends.reserve(edges.size());
  Vec2 cur(0.0, 0.0);
  for (const auto& e : edges) {
    cur += Vec2(e.dx, e.dy);
    ends.push_back(cur);
  }
  return ends;
}

/// [end_0, mid_0, end_1, mid_1, ...]; midpoints are B(0.5) of each edge.
inline std::vector<Vec2> panel_vertices(std::span<const Edge> edges) {
  if (edges.empty()) throw EmptyPanel("panel has no edges");
  std::vector<Vec2> out;
  out.reserve(2 * edges.size());
  Vec2 start(0.0, 0.0);
  for (const auto& e : edges) {
    const Vec2 end = start + Vec2(e.dx, e.dy);
    out.push_back(end);
    out.push_back(bezier_point(start, control_absolute(e, start, end), end, 0.5));
    start = end;
  }
  return out;
}

/// vertices[b] - vertices[a] for every a < b, in (a, b) lexicographic order.
inline std::vector<Vec2> support_vectors(std::span<const Vec2> vertices) {
  std::vector<Vec2> out;
  const std::size_t n = vertices.size();
  out.reserve(n * (n - 1) / 2);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) out.push_back(vertices[b] - vertices[a]);
  return out;
}

inline Vec2 loop_residual(std::span<const Edge> edges) {
  Vec2 s(0.0, 0.0);
  for (const auto& e : edges) s += Vec2(e.dx, e.dy);
  return s;
}

inline Vec3 place_point(const Vec2& p, const Quaternion& rotation, const Vector3& translation) {
  const double norm = quaternion_norm(rotation);
  if (std::abs(norm - 1.0) > 1e-6) throw NonUnitQuaternion("quaternion norm " + format_real(norm));
  return to_eigen(rotation) * Vec3(p.x(), p.y(), 0.0) + Vec3(translation[0], translation[1], translation[2]);
}

/// Closed outline in the panel's local frame, `samples` points per edge.
inline std::vector<Vec2> sample_outline(std::span<const Edge> edges, int samples = 16) {
  std::vector<Vec2> pts;
  pts.reserve(edges.size() * static_cast<std::size_t>(samples) + 1);
  Vec2 start(0.0, 0.0);
  pts.push_back(start);
  for (const auto& e : edges) {
    const Vec2 end = start + Vec2(e.dx, e.dy);
    const Vec2 c = control_absolute(e, start, end);
    for (int s = 1; s <= samples; ++s) {
      pts.push_back(bezier_point(start, c, end, static_cast<double>(s) / samples));
    }
    start = end;
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Raster

struct ViewBox {
  double x0 = -1.25;
  double y0 = -1.25;
  double x1 = 1.25;
  double y1 = 1.25;
  bool operator==(const ViewBox&) const = default;
};

struct RenderConfig {
  int channels = kDefaultClasses;
  int height = 64;
  int width = 64;
  ViewBox view;
  int samples_per_edge = 16;
};

/// Row-major [C, H, W] occupancy in [0, 1].
struct Raster {
  int channels = 0;
  int height = 0;
  int width = 0;
  ViewBox view;
  std::vector<float> data;

  Raster() = default;
  Raster(int c, int h, int w)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double channel_sum(int c) const {
    double s = 0.0;
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (std::size_t i = 0; i < plane; ++i) s += data[static_cast<std::size_t>(c) * plane + i];
    return s;
  }
};

/// Even-odd scanline fill of a closed polygon given in pixel coordinates;
/// a pixel is set when its center lies inside.
inline void fill_polygon(Raster& r, int channel, std::span<const Vec2> poly) {
  std::vector<double> xs;
  const std::size_t n = poly.size();
  for (int row = 0; row < r.height; ++row) {
    const double y = row + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2& a = poly[i];
      const Vec2& b = poly[(i + 1) % n];
      if ((a.y() <= y && y < b.y()) || (b.y() <= y && y < a.y())) {
        xs.push_back(a.x() + (y - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
      const int c0 = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
      const int c1 = std::min(r.width - 1, static_cast<int>(std::ceil(xs[i + 1] - 0.5)) - 1);
      for (int col = c0; col <= c1; ++col) r.at(channel, row, col) = 1.0f;
    }
  }
}

/// Orthographic projection along +z of each placed panel into the channel of
/// its class. Placements are used as given.
inline Raster render_placed(const SewingPattern& p, const RenderConfig& cfg) {
  const ViewBox& v = cfg.view;
  if (!(v.x1 > v.x0) || !(v.y1 > v.y0) || cfg.height <= 0 || cfg.width <= 0)
    throw DegenerateViewBox("view box or resolution is empty");
  Raster r(cfg.channels, cfg.height, cfg.width);
  r.view = v;
  const double sx = cfg.width / (v.x1 - v.x0);
  const double sy = cfg.height / (v.y1 - v.y0);
  std::vector<Vec2> poly;
  for (const auto& panel : p.panels) {
    if (panel.class_id < 0 || panel.class_id >= cfg.channels) continue;
    const auto outline = sample_outline(panel.edges, cfg.samples_per_edge);
    poly.clear();
    for (std::size_t i = 0; i + 1 < outline.size(); ++i) {
      const Vec3 w = place_point(outline[i], panel.rotation, panel.translation);
      poly.emplace_back((w.x() - v.x0) * sx, (v.y1 - w.y()) * sy);
    }
    fill_polygon(r, panel.class_id, poly);
  }
  return r;
}

inline Raster render_raster(const SewingPattern& p, const PoseVector& pose, const RenderConfig& cfg) {
  return render_placed(apply_pose(p, pose), cfg);
}

// ---------------------------------------------------------------------------
// SVG

namespace detail {
inline constexpr const char* kStitchPalette[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231",
                                                 "#911eb4", "#42d4f4", "#f032e6", "#9a6324"};

inline std::string svg_num(double v) { return format_real(snap(v, 1e-4)); }
}  // namespace detail

/// One group per panel in local coordinates (laid out left to right), each
/// edge as a line or quadratic segment; stitched edges are overdrawn with a
/// per-stitch color shared by both ends.
inline std::string render_svg(const SewingPattern& pattern, double scale = 200.0) {
  using detail::svg_num;
  SewingPattern p = pattern;
  p.canonicalize();
  std::ostringstream body;
  double offset_x = 10.0;
  double max_h = 0.0;
  std::map<EdgeRef, std::size_t> stitch_of;
  for (std::size_t i = 0; i < p.stitches.size(); ++i) {
    stitch_of[p.stitches[i].first] = i;
    stitch_of[p.stitches[i].second] = i;
  }
  for (const auto& panel : p.panels) {
    if (panel.edges.empty()) continue;
    auto ends = edge_endpoints(panel.edges);
    double minx = 0.0, maxx = 0.0, miny = 0.0, maxy = 0.0;
    for (const auto& e : sample_outline(panel.edges, 8)) {
      minx = std::min(minx, e.x());
      maxx = std::max(maxx, e.x());
      miny = std::min(miny, e.y());
      maxy = std::max(maxy, e.y());
    }
    const double ox = offset_x - minx * scale;
    const double oy = 10.0 + maxy * scale;
    auto px = [&](const Vec2& q) { return svg_num(ox + q.x() * scale) + " " + svg_num(oy - q.y() * scale); };
    body << "  <g id=\"panel-" << panel.class_id << "\">\n";
    body << "    <path d=\"M " << px(Vec2(0, 0));
    Vec2 start(0.0, 0.0);
    std::ostringstream stitched;
    for (std::size_t j = 0; j < panel.edges.size(); ++j) {
      const auto& e = panel.edges[j];
      const Vec2 end = ends[j];
      std::string seg;
      if (e.cx == 0.0 && e.cy == 0.0) {
        seg = " L " + px(end);
      } else {
        seg = " Q " + px(control_absolute(e, start, end)) + " " + px(end);
      }
      body << seg;
      if (auto it = stitch_of.find({panel.class_id, static_cast<int>(j)}); it != stitch_of.end()) {
        const char* color = detail::kStitchPalette[it->second % std::size(detail::kStitchPalette)];
        stitched << "    <path class=\"stitch\" data-stitch=\"" << it->second << "\" d=\"M " << px(start)
                 << seg << "\" stroke=\"" << color << "\" stroke-width=\"3\" fill=\"none\"/>\n";
      }
      start = end;
    }
    body << " Z\" fill=\"#dddddd\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
    body << stitched.str();
    body << "    <text x=\"" << svg_num(offset_x) << "\" y=\"" << svg_num(oy + 14.0)
         << "\" font-size=\"10\">class " << panel.class_id << "</text>\n";
    body << "  </g>\n";
    offset_x += (maxx - minx) * scale + 20.0;
    max_h = std::max(max_h, (maxy - miny) * scale);
  }
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << svg_num(offset_x + 10.0)
      << "\" height=\"" << svg_num(max_h + 40.0) << "\">\n"
      << body.str() << "</svg>\n";
  return svg.str();
}

}  // namespace sewkit
