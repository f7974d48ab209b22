#pragma once

// Synthetic pose code: a 72-vector whose first entries drive a rigid
// perturbation of the panel placements (global yaw and xy shift, per-panel
// in-plane tilt). The remaining entries are carried along as regression
// targets only.

#include <array>
#include <cstdint>
#include <numbers>

#include <Eigen/Geometry>

#include "sewkit/io.hpp"
#include "sewkit/pattern.hpp"

namespace sewkit {

inline constexpr int kPoseDim = 72;

struct PoseVector {
  std::array<double, kPoseDim> theta{};
  bool operator==(const PoseVector&) const = default;
};

/// theta ~ iid uniform[-1, 1]^72.
inline PoseVector sample_pose(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x706f7365ULL));
  PoseVector p;
  for (auto& v : p.theta) v = rng.uniform(-1.0, 1.0);
  return p;
}

inline Eigen::Quaterniond to_eigen(const Quaternion& q) { return {q[0], q[1], q[2], q[3]}; }
inline Quaternion from_eigen(const Eigen::Quaterniond& q) { return {q.w(), q.x(), q.y(), q.z()}; }

inline double pose_yaw(const PoseVector& pose) { return std::numbers::pi / 4.0 * pose.theta[0]; }
inline Eigen::Vector2d pose_shift(const PoseVector& pose) { return {0.1 * pose.theta[1], 0.1 * pose.theta[2]}; }
inline double pose_tilt(const PoseVector& pose, int class_id) {
  return 0.2 * pose.theta[static_cast<std::size_t>(3 + class_id % 69)];
}

/// Placement after posing: R' = Ryaw * R * Rz(tilt), T' = Ryaw * T + shift.
inline SewingPattern apply_pose(const SewingPattern& p, const PoseVector& pose) {
  SewingPattern out = p;
  const Eigen::Quaterniond yaw(Eigen::AngleAxisd(pose_yaw(pose), Eigen::Vector3d::UnitY()));
  const Eigen::Vector2d shift = pose_shift(pose);
  for (auto& panel : out.panels) {
    const Eigen::Quaterniond tilt(Eigen::AngleAxisd(pose_tilt(pose, panel.class_id), Eigen::Vector3d::UnitZ()));
    panel.rotation = from_eigen(yaw * to_eigen(panel.rotation) * tilt);
    Eigen::Vector3d t(panel.translation[0], panel.translation[1], panel.translation[2]);
    t = yaw * t;
    panel.translation = {t.x() + shift.x(), t.y() + shift.y(), t.z()};
  }
  return out;
}

}  // namespace sewkit
