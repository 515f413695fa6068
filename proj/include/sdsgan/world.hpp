#pragma once

#include "sdsgan/camera.hpp"
#include "sdsgan/prior.hpp"
#include "sdsgan/scene.hpp"

#include <vector>

namespace sdsgan {

enum class PrimitiveKind { sphere, box, torus_shell };

/// sphere: size.x = radius; box: size = half extents; torus_shell: size.x =
/// major radius, size.y = tube radius (axis along +y).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Constant(0.3);
  Eigen::Vector3d color = Eigen::Vector3d(0.8, 0.2, 0.2);

  double signed_distance(const Eigen::Vector3d& p) const;
};

struct ToyScene {
  std::vector<Primitive> primitives;

  // Union SDF; `nearest` receives the index of the closest primitive.
  double signed_distance(const Eigen::Vector3d& p, int* nearest = nullptr) const;
};

/// 2-4 saturated primitives placed inside radius 0.55 of the origin.
ToyScene make_scene(std::uint64_t seed, int n_primitives = 0);

struct RasterizeConfig {
  int resolution = 32;
  double density = 25.0;     // plateau density inside surfaces
  double edge_width = 0.03;  // world units of the density sigmoid
  Fieldf::Box bbox{Eigen::Vector3f::Constant(-1.0f), Eigen::Vector3f::Constant(1.0f)};
};

Fieldf rasterize(const ToyScene& scene, const RasterizeConfig& config);

/// Degraded copy of a field: Gaussian blur (sigma in voxels) of the activated
/// density and colour lattices, then colours pulled toward their luminance by
/// `desaturate` in [0,1].
Fieldf make_coarse(const Fieldf& field, double blur_sigma_voxels, double desaturate);

/// Renders `count` views of `field` at poses drawn from `distribution`.
std::vector<LabeledImage> render_corpus(const Fieldf& field, int label, int count, const PoseDistribution& distribution,
                                        const RenderSettings& settings, std::uint64_t seed);

}  // namespace sdsgan
