#include "sdsgan/camera.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace sdsgan {

void CameraPose::validate() const {
  require(radius > 0.0, "camera radius must be positive");
  require(fov > 0.0 && fov < M_PI, "camera fov must lie in (0, pi)");
  require(std::isfinite(azimuth) && std::isfinite(elevation), "camera angles must be finite");
  require(std::abs(elevation) < 0.5 * M_PI, "camera elevation must stay off the poles");
}

Eigen::Vector3d CameraPose::position() const {
  const double c = std::cos(elevation);
  return look_at + radius * Eigen::Vector3d(c * std::sin(azimuth), std::sin(elevation), c * std::cos(azimuth));
}

Eigen::Matrix3d CameraPose::rotation() const {
  const Eigen::Vector3d back = (position() - look_at).normalized();
  const Eigen::Vector3d right = Eigen::Vector3d::UnitY().cross(back).normalized();
  const Eigen::Vector3d up = back.cross(right);
  Eigen::Matrix3d r;
  r.col(0) = right;
  r.col(1) = up;
  r.col(2) = back;
  return r;
}

Eigen::Isometry3d CameraPose::camera_to_world() const {
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.linear() = rotation();
  t.translation() = position();
  return t;
}

Eigen::Vector3d CameraPose::ray_direction(double px, double py, int image_size) const {
  const double half = std::tan(0.5 * fov);
  const double u = (2.0 * (px + 0.5) / image_size - 1.0) * half;
  const double v = (1.0 - 2.0 * (py + 0.5) / image_size) * half;
  return (rotation() * Eigen::Vector3d(u, v, -1.0)).normalized();
}

void PoseSet::validate() const {
  require(!poses.empty(), "pose set is empty");
  require(samples_per_view >= 1, "samples_per_view must be >= 1");
  for (std::size_t i = 1; i < poses.size(); ++i)
    require(poses[i].azimuth > poses[i - 1].azimuth, "pose set azimuths must be strictly increasing");
  for (const auto& p : poses) p.validate();
}

PoseSet uniform_pose_set(int n_views, int samples_per_view, const std::vector<double>& elevation_bands,
                         double radius, double fov) {
  require(n_views >= 1, "n_views must be >= 1");
  require(samples_per_view >= 1, "samples_per_view must be >= 1");
  require(!elevation_bands.empty(), "elevation_bands must not be empty");
  PoseSet set;
  set.samples_per_view = samples_per_view;
  set.poses.reserve(n_views);
  for (int k = 0; k < n_views; ++k) {
    CameraPose pose;
    pose.azimuth = 2.0 * M_PI * k / n_views;
    pose.elevation = elevation_bands[k % elevation_bands.size()];
    pose.radius = radius;
    pose.fov = fov;
    set.poses.push_back(pose);
  }
  set.validate();
  return set;
}

void PoseDistribution::validate() const {
  require(azimuth_min <= azimuth_max, "empty azimuth range");
  require(elevation_min <= elevation_max, "empty elevation range");
  require(radius_min <= radius_max, "empty radius range");
  require(radius_min > 0.0, "radius range must be positive");
  require(fov > 0.0 && fov < M_PI, "fov must lie in (0, pi)");
  require(std::abs(elevation_min) < 0.5 * M_PI && std::abs(elevation_max) < 0.5 * M_PI,
          "elevation range must stay off the poles");
}

PoseSampler::PoseSampler(std::uint64_t seed, PoseDistribution distribution)
    : distribution_(std::move(distribution)), rng_(seed) {
  distribution_.validate();
}

CameraPose PoseSampler::next() {
  const auto& d = distribution_;
  CameraPose pose;
  pose.azimuth = rng_.uniform(d.azimuth_min, d.azimuth_max);
  if (d.azimuth_max - d.azimuth_min >= 2.0 * M_PI || pose.azimuth >= 2.0 * M_PI || pose.azimuth < 0.0)
    pose.azimuth = std::fmod(std::fmod(pose.azimuth, 2.0 * M_PI) + 2.0 * M_PI, 2.0 * M_PI);
  pose.elevation = rng_.uniform(d.elevation_min, d.elevation_max);
  pose.radius = rng_.uniform(d.radius_min, d.radius_max);
  pose.fov = d.fov;
  pose.look_at = d.look_at;
  return pose;
}

void to_json(nlohmann::json& j, const CameraPose& pose) {
  j = nlohmann::json{{"azimuth", pose.azimuth},
                     {"elevation", pose.elevation},
                     {"radius", pose.radius},
                     {"fov", pose.fov},
                     {"look_at", {pose.look_at.x(), pose.look_at.y(), pose.look_at.z()}}};
}

void from_json(const nlohmann::json& j, CameraPose& pose) {
  pose.azimuth = j.at("azimuth").get<double>();
  pose.elevation = j.at("elevation").get<double>();
  pose.radius = j.at("radius").get<double>();
  pose.fov = j.at("fov").get<double>();
  const auto& l = j.at("look_at");
  pose.look_at = Eigen::Vector3d(l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>());
}

void to_json(nlohmann::json& j, const PoseSet& set) {
  j = nlohmann::json{{"samples_per_view", set.samples_per_view}, {"poses", set.poses}};
}

void from_json(const nlohmann::json& j, PoseSet& set) {
  set.samples_per_view = j.at("samples_per_view").get<int>();
  set.poses = j.at("poses").get<std::vector<CameraPose>>();
}

}  // namespace sdsgan
