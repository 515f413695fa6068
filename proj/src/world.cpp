#include "sdsgan/world.hpp"

#include <algorithm>
#include <cmath>

namespace sdsgan {

double Primitive::signed_distance(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d q = p - center;
  switch (kind) {
    case PrimitiveKind::sphere:
      return q.norm() - size.x();
    case PrimitiveKind::box: {
      const Eigen::Vector3d d = q.cwiseAbs() - size;
      return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
    }
    case PrimitiveKind::torus_shell: {
      const double ring = std::hypot(q.x(), q.z()) - size.x();
      return std::hypot(ring, q.y()) - size.y();
    }
  }
  return 1e9;
}

double ToyScene::signed_distance(const Eigen::Vector3d& p, int* nearest) const {
  double best = 1e9;
  int which = -1;
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const double d = primitives[i].signed_distance(p);
    if (d < best) {
      best = d;
      which = static_cast<int>(i);
    }
  }
  if (nearest) *nearest = which;
  return best;
}

ToyScene make_scene(std::uint64_t seed, int n_primitives) {
  static const Eigen::Vector3d palette[] = {{0.85, 0.15, 0.12}, {0.15, 0.35, 0.85}, {0.2, 0.75, 0.25},
                                            {0.9, 0.75, 0.1},   {0.6, 0.2, 0.75},   {0.1, 0.7, 0.75}};
  Rng rng(mix64(seed));
  if (n_primitives <= 0) n_primitives = 2 + static_cast<int>(rng.below(3));
  require(n_primitives >= 1, "scene needs at least one primitive");
  ToyScene scene;
  const std::size_t first_color = rng.below(std::size(palette));
  for (int i = 0; i < n_primitives; ++i) {
    Primitive prim;
    prim.kind = static_cast<PrimitiveKind>(rng.below(3));
    // place around a ring so the primitives overlap little
    const double angle = 2.0 * M_PI * (i + rng.uniform(-0.2, 0.2)) / n_primitives;
    const double r = n_primitives == 1 ? 0.0 : rng.uniform(0.2, 0.4);
    prim.center = Eigen::Vector3d(r * std::cos(angle), rng.uniform(-0.2, 0.2), r * std::sin(angle));
    switch (prim.kind) {
      case PrimitiveKind::sphere:
        prim.size = Eigen::Vector3d::Constant(rng.uniform(0.18, 0.3));
        break;
      case PrimitiveKind::box:
        prim.size = Eigen::Vector3d(rng.uniform(0.12, 0.25), rng.uniform(0.12, 0.25), rng.uniform(0.12, 0.25));
        break;
      case PrimitiveKind::torus_shell:
        prim.size = Eigen::Vector3d(rng.uniform(0.16, 0.24), rng.uniform(0.06, 0.1), 0.0);
        break;
    }
    prim.color = palette[(first_color + i) % std::size(palette)];
    scene.primitives.push_back(prim);
  }
  return scene;
}

Fieldf rasterize(const ToyScene& scene, const RasterizeConfig& config) {
  require(!scene.primitives.empty(), "rasterize: empty scene");
  require(config.resolution >= 8, "rasterize: resolution must be >= 8");
  require(config.density > 0.0 && config.edge_width > 0.0, "rasterize: density and edge width must be positive");
  Fieldf field(config.resolution, config.bbox);
  auto density = field.density();
  auto color = field.color();
  for (int z = 0; z < config.resolution; ++z)
    for (int y = 0; y < config.resolution; ++y)
      for (int x = 0; x < config.resolution; ++x) {
        const Index i = field.node_index(x, y, z);
        const Eigen::Vector3d p = field.node_position(x, y, z).cast<double>();
        int nearest = 0;
        const double sdf = scene.signed_distance(p, &nearest);
        const double post = std::max(config.density * sigmoid(-sdf / config.edge_width), 1e-6);
        density[i] = static_cast<float>(inverse_softplus(post));
        const Eigen::Vector3d c = scene.primitives[nearest].color.cwiseMax(0.02).cwiseMin(0.98);
        for (int k = 0; k < 3; ++k) color(i, k) = static_cast<float>(logit(c[k]));
      }
  field.validate();
  return field;
}

namespace {

// Separable Gaussian blur of a scalar lattice with clamped borders.
VectorX<double> blur_lattice(const VectorX<double>& values, int n, double sigma) {
  if (sigma <= 0.0) return values;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) sum += kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& k : kernel) k /= sum;
  VectorX<double> cur = values, next(values.size());
  const Index stride[3] = {1, n, Index(n) * n};
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < n; ++z)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const int coord[3] = {x, y, z};
          const Index base = (Index(z) * n + y) * n + x - coord[axis] * stride[axis];
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            const int c = std::clamp(coord[axis] + k, 0, n - 1);
            acc += kernel[k + radius] * cur[base + c * stride[axis]];
          }
          next[(Index(z) * n + y) * n + x] = acc;
        }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace

Fieldf make_coarse(const Fieldf& field, double blur_sigma_voxels, double desaturate) {
  field.validate();
  require(blur_sigma_voxels >= 0.0, "make_coarse: blur sigma must be >= 0");
  require(desaturate >= 0.0 && desaturate <= 1.0, "make_coarse: desaturate must lie in [0,1]");
  const int n = field.resolution;
  const Index nodes = field.nodes();
  VectorX<double> density(nodes);
  Eigen::MatrixXd color(nodes, 3);
  for (Index i = 0; i < nodes; ++i) {
    density[i] = softplus(double(field.density()[i]));
    for (int c = 0; c < 3; ++c) color(i, c) = sigmoid(double(field.color()(i, c)));
  }
  density = blur_lattice(density, n, blur_sigma_voxels);
  for (int c = 0; c < 3; ++c) color.col(c) = blur_lattice(color.col(c), n, blur_sigma_voxels);
  Fieldf out = field;
  auto out_density = out.density();
  auto out_color = out.color();
  for (Index i = 0; i < nodes; ++i) {
    out_density[i] = static_cast<float>(inverse_softplus(std::max(density[i], 1e-6)));
    const double lum = 0.299 * color(i, 0) + 0.587 * color(i, 1) + 0.114 * color(i, 2);
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(lum + (1.0 - desaturate) * (color(i, c) - lum), 0.01, 0.99);
      out_color(i, c) = static_cast<float>(logit(v));
    }
  }
  return out;
}

std::vector<LabeledImage> render_corpus(const Fieldf& field, int label, int count, const PoseDistribution& distribution,
                                        const RenderSettings& settings, std::uint64_t seed) {
  PoseSampler sampler(seed, distribution);
  std::vector<CameraPose> poses(count);
  for (auto& p : poses) p = sampler.next();
  std::vector<LabeledImage> out(count);
  parallel_for(count, [&](Index i) { out[i] = {render(field, poses[i], settings).rgb, label}; });
  return out;
}

}  // namespace sdsgan
