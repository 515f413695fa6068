#pragma once

#include "sdsgan/core.hpp"

#include <Eigen/Geometry>
#include <nlohmann/json_fwd.hpp>

#include <vector>

namespace sdsgan {

/// Orbit camera around `look_at`. Azimuth rotates about +y starting from +z,
/// elevation lifts toward +y. Camera space is right-handed: x right, y up,
/// looking down -z.
struct CameraPose {
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 3.0;
  double fov = 0.6981317007977318;  // 40 degrees
  Eigen::Vector3d look_at = Eigen::Vector3d::Zero();

  void validate() const;
  Eigen::Vector3d position() const;
  // Columns: right, up, backward (camera +z) in world coordinates.
  Eigen::Matrix3d rotation() const;
  Eigen::Isometry3d camera_to_world() const;
  // Unit world-space direction through the centre of pixel (px, py); row 0 is the top.
  Eigen::Vector3d ray_direction(double px, double py, int image_size) const;

  bool operator==(const CameraPose&) const = default;
};

/// Pose angles fed to the discriminator.
struct PoseAngles {
  double azimuth = 0.0;
  double elevation = 0.0;
};

inline PoseAngles angles_of(const CameraPose& pose) { return {pose.azimuth, pose.elevation}; }

struct PoseSet {
  std::vector<CameraPose> poses;
  int samples_per_view = 1;

  int n_views() const { return static_cast<int>(poses.size()); }
  int planned_images() const { return n_views() * samples_per_view; }
  void validate() const;
  bool operator==(const PoseSet&) const = default;
};

/// Evenly spaced azimuths (2*pi*k/n_views), elevations assigned round-robin
/// over `elevation_bands`. No randomness.
PoseSet uniform_pose_set(int n_views, int samples_per_view, const std::vector<double>& elevation_bands,
                         double radius, double fov);

/// Sampling ranges for training views. Every range is closed; min == max collapses it.
struct PoseDistribution {
  double azimuth_min = 0.0;
  double azimuth_max = 2.0 * M_PI;
  double elevation_min = -0.1745329251994330;  // -10 degrees
  double elevation_max = 0.7853981633974483;   // 45 degrees
  double radius_min = 3.0;
  double radius_max = 3.0;
  double fov = 0.6981317007977318;
  Eigen::Vector3d look_at = Eigen::Vector3d::Zero();

  void validate() const;
};

class PoseSampler {
 public:
  PoseSampler(std::uint64_t seed, PoseDistribution distribution);

  CameraPose next();
  Rng& rng() { return rng_; }
  const PoseDistribution& distribution() const { return distribution_; }

 private:
  PoseDistribution distribution_;
  Rng rng_;
};

void to_json(nlohmann::json& j, const CameraPose& pose);
void from_json(const nlohmann::json& j, CameraPose& pose);
void to_json(nlohmann::json& j, const PoseSet& set);
void from_json(const nlohmann::json& j, PoseSet& set);

}  // namespace sdsgan
