#pragma once

#include "sdsgan/camera.hpp"
#include "sdsgan/core.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace sdsgan {

/// Dense voxel radiance field. Nodes sit at cell centres of an N^3 lattice
/// spanning `bbox`; activations are applied per node and the activated values
/// are trilinearly interpolated, so post-activation density is >= 0 and colour
/// stays in [0,1] everywhere.
///
/// All trainable values live in one flat vector:
///   params = [ density (N^3) | colour (N^3 x 3, row-major) ]
/// with node index (z * N + y) * N + x.
template <typename Scalar>
struct RadianceField {
  using Vector = VectorX<Scalar>;
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
  using ColorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
  using Box = Eigen::AlignedBox<Scalar, 3>;

  int resolution = 0;
  Box bbox{Vector3::Constant(Scalar(-1)), Vector3::Constant(Scalar(1))};
  std::string density_activation = "softplus";
  std::string color_activation = "sigmoid";
  Vector params;

  RadianceField() = default;
  RadianceField(int n, const Box& box) : resolution(n), bbox(box), params(Vector::Zero(4 * Index(n) * n * n)) {}

  Index nodes() const { return Index(resolution) * resolution * resolution; }
  Index parameter_count() const { return 4 * nodes(); }

  auto density() { return params.head(nodes()); }
  auto density() const { return params.head(nodes()); }
  Eigen::Map<ColorMatrix> color() { return {params.data() + nodes(), nodes(), 3}; }
  Eigen::Map<const ColorMatrix> color() const { return {params.data() + nodes(), nodes(), 3}; }

  Index node_index(int x, int y, int z) const { return (Index(z) * resolution + y) * resolution + x; }
  Vector3 cell_size() const { return bbox.sizes() / Scalar(resolution); }
  Vector3 node_position(int x, int y, int z) const {
    return bbox.min() + (Vector3(Scalar(x), Scalar(y), Scalar(z)).array() + Scalar(0.5)).matrix().cwiseProduct(cell_size());
  }

  void validate() const {
    require(resolution >= 2, "field resolution must be >= 2");
    require(params.size() == parameter_count(), "field parameter vector has the wrong size");
    require((bbox.max().array() > bbox.min().array()).all(), "field bbox is empty");
    require(density_activation == "softplus" || density_activation == "exp", "unknown density activation '" + density_activation + "'");
    require(color_activation == "sigmoid", "unknown color activation '" + color_activation + "'");
  }

  template <typename Other>
  RadianceField<Other> cast() const {
    RadianceField<Other> out;
    out.resolution = resolution;
    out.bbox = bbox.template cast<Other>();
    out.density_activation = density_activation;
    out.color_activation = color_activation;
    out.params = params.template cast<Other>();
    return out;
  }

  bool operator==(const RadianceField& o) const {
    return resolution == o.resolution && bbox.min() == o.bbox.min() && bbox.max() == o.bbox.max() &&
           density_activation == o.density_activation && color_activation == o.color_activation &&
           params.size() == o.params.size() && params == o.params;
  }
};

using Fieldf = RadianceField<float>;
using Fieldd = RadianceField<double>;

/// Post-activation density of the soft-sphere initialisation.
struct InitBlob {
  double density = 2.0;       // plateau density inside the blob (world^-1)
  double radius_fraction = 0.35;  // blob radius relative to half the bbox extent
  double edge_width_fraction = 0.05;
  double color_noise = 0.1;   // std of pre-activation colour noise
};

template <typename Scalar>
Scalar init_blob_density(const RadianceField<Scalar>& field, const Eigen::Matrix<Scalar, 3, 1>& p, const InitBlob& blob) {
  const Scalar half = Scalar(0.5) * field.bbox.sizes().minCoeff();
  const Scalar r = (p - field.bbox.center()).norm();
  const Scalar radius = Scalar(blob.radius_fraction) * half;
  const Scalar width = Scalar(blob.edge_width_fraction) * half;
  return Scalar(blob.density) * sigmoid((radius - r) / width);
}

/// Deterministic soft-sphere initialisation: constant-density blob at the
/// bbox centre, grey colour with small seeded noise.
template <typename Scalar>
RadianceField<Scalar> init_field(int resolution, const typename RadianceField<Scalar>::Box& bbox, std::uint64_t seed,
                                 const InitBlob& blob = {}) {
  if (resolution < 8) throw ConfigError("init_field: resolution must be >= 8, got " + std::to_string(resolution));
  RadianceField<Scalar> field(resolution, bbox);
  Rng rng(seed);
  auto density = field.density();
  auto color = field.color();
  for (int z = 0; z < resolution; ++z)
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x) {
        const Index i = field.node_index(x, y, z);
        const Scalar post = std::max(init_blob_density(field, field.node_position(x, y, z), blob), Scalar(1e-6));
        density[i] = inverse_softplus(post);
        for (int c = 0; c < 3; ++c) color(i, c) = Scalar(blob.color_noise * rng.normal());
      }
  field.validate();
  return field;
}

struct RenderSettings {
  int image_size = 64;
  int samples_per_ray = 64;
  double near = 1.2;
  double far = 4.8;
  Eigen::Vector3d background = Eigen::Vector3d::Ones();
  bool compute_depth = true;
  bool compute_normal = false;

  void validate() const {
    require(samples_per_ray >= 2, "samples_per_ray must be >= 2");
    require(near < far, "near must be < far");
    require(near >= 0.0, "near must be >= 0");
    require(image_size >= 8, "image_size must be >= 8");
    require((background.array() >= 0.0).all() && (background.array() <= 1.0).all(), "background must lie in [0,1]^3");
  }
};

template <typename Scalar>
struct RenderedView {
  Image<Scalar> rgb;            // 3 x HW
  VectorX<Scalar> alpha;        // HW
  VectorX<Scalar> depth;        // HW, expected termination distance
  VectorX<Scalar> orientation;  // HW, only with compute_normal
  CameraPose pose;
  RenderSettings settings;

  int size() const { return rgb.height; }
};

/// Upstream gradients for render_backward; empty members are treated as zero.
template <typename Scalar>
struct ViewGradient {
  MatrixR<Scalar> rgb;
  VectorX<Scalar> alpha;
  VectorX<Scalar> depth;
  VectorX<Scalar> orientation;

  ViewGradient& operator+=(const ViewGradient& o) {
    accumulate(rgb, o.rgb);
    accumulate(alpha, o.alpha);
    accumulate(depth, o.depth);
    accumulate(orientation, o.orientation);
    return *this;
  }

 private:
  template <typename M>
  static void accumulate(M& into, const M& from) {
    if (from.size() == 0) return;
    if (into.size() == 0)
      into = from;
    else
      into += from;
  }
};

namespace detail {

template <typename Scalar>
struct ActivatedGrid {
  VectorX<Scalar> density;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor> color;
};

template <typename Scalar>
Scalar activate_density(const std::string& name, Scalar pre) {
  using std::exp;
  return name == "exp" ? exp(pre) : softplus(pre);
}

template <typename Scalar>
Scalar activate_density_derivative(const std::string& name, Scalar pre) {
  using std::exp;
  return name == "exp" ? exp(pre) : sigmoid(pre);
}

template <typename Scalar>
ActivatedGrid<Scalar> activate(const RadianceField<Scalar>& field) {
  ActivatedGrid<Scalar> g;
  const auto pre_density = field.density();
  g.density.resize(field.nodes());
  for (Index i = 0; i < field.nodes(); ++i) g.density[i] = activate_density(field.density_activation, pre_density[i]);
  g.color = field.color().unaryExpr([](Scalar v) { return sigmoid(v); });
  return g;
}

template <typename Scalar>
struct Trilinear {
  Index index[8];
  Scalar weight[8];
  Scalar frac[3];
  Index base[3];
};

// Returns false when p lies outside the bbox.
template <typename Scalar>
bool trilinear(const RadianceField<Scalar>& field, const Eigen::Matrix<Scalar, 3, 1>& p, Trilinear<Scalar>& out) {
  if (!field.bbox.contains(p)) return false;
  const int n = field.resolution;
  const auto h = field.cell_size();
  for (int a = 0; a < 3; ++a) {
    Scalar u = (p[a] - field.bbox.min()[a]) / h[a] - Scalar(0.5);
    u = std::clamp(u, Scalar(0), Scalar(n - 1));
    Index i0 = std::min<Index>(static_cast<Index>(std::floor(u)), n - 2);
    out.base[a] = i0;
    out.frac[a] = u - Scalar(i0);
  }
  int k = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++k) {
        out.index[k] = field.node_index(int(out.base[0] + dx), int(out.base[1] + dy), int(out.base[2] + dz));
        out.weight[k] = (dx ? out.frac[0] : Scalar(1) - out.frac[0]) * (dy ? out.frac[1] : Scalar(1) - out.frac[1]) *
                        (dz ? out.frac[2] : Scalar(1) - out.frac[2]);
      }
  return true;
}

// Spatial gradient of the interpolated density.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> density_gradient(const RadianceField<Scalar>& field, const ActivatedGrid<Scalar>& grid,
                                             const Trilinear<Scalar>& tri) {
  Eigen::Matrix<Scalar, 3, 1> g = Eigen::Matrix<Scalar, 3, 1>::Zero();
  const auto h = field.cell_size();
  const Scalar* f = tri.frac;
  int k = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++k) {
        const Scalar v = grid.density[tri.index[k]];
        const Scalar wx = dx ? f[0] : Scalar(1) - f[0];
        const Scalar wy = dy ? f[1] : Scalar(1) - f[1];
        const Scalar wz = dz ? f[2] : Scalar(1) - f[2];
        g[0] += v * (dx ? Scalar(1) : Scalar(-1)) * wy * wz;
        g[1] += v * wx * (dy ? Scalar(1) : Scalar(-1)) * wz;
        g[2] += v * wx * wy * (dz ? Scalar(1) : Scalar(-1));
      }
  return g.cwiseQuotient(h);
}

template <typename Scalar>
struct RaySample {
  Trilinear<Scalar> tri;
  Scalar sigma;
  Eigen::Matrix<Scalar, 3, 1> color;
  Scalar t;
  Scalar orient;  // max(0, n . d)^2
};

template <typename Scalar>
struct RayMarch {
  std::vector<RaySample<Scalar>> samples;
  Scalar delta = Scalar(0);
  bool hit = false;
};

// Slab intersection clipped to [near, far].
inline bool clip_ray(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                     double near, double far, double& t0, double& t1) {
  t0 = near;
  t1 = far;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

template <typename Scalar>
void march(const RadianceField<Scalar>& field, const ActivatedGrid<Scalar>& grid, const Eigen::Vector3d& origin,
           const Eigen::Vector3d& dir, const RenderSettings& settings, RayMarch<Scalar>& out) {
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  out.samples.clear();
  double t0 = 0, t1 = 0;
  const Eigen::Vector3d lo = field.bbox.min().template cast<double>();
  const Eigen::Vector3d hi = field.bbox.max().template cast<double>();
  out.hit = clip_ray(origin, dir, lo, hi, settings.near, settings.far, t0, t1);
  if (!out.hit) return;
  const int k = settings.samples_per_ray;
  const double delta = (t1 - t0) / k;
  out.delta = Scalar(delta);
  out.samples.reserve(k);
  for (int i = 0; i < k; ++i) {
    const double t = t0 + (i + 0.5) * delta;
    RaySample<Scalar> s;
    const Vec3 p = (origin + t * dir).template cast<Scalar>();
    if (!trilinear(field, p, s.tri)) continue;
    s.t = Scalar(t);
    s.sigma = Scalar(0);
    s.color.setZero();
    for (int c = 0; c < 8; ++c) {
      s.sigma += s.tri.weight[c] * grid.density[s.tri.index[c]];
      s.color += s.tri.weight[c] * grid.color.row(s.tri.index[c]).transpose();
    }
    s.orient = Scalar(0);
    if (settings.compute_normal) {
      const Vec3 g = density_gradient(field, grid, s.tri);
      const Scalar norm = g.norm();
      if (norm > Scalar(1e-8)) {
        const Scalar cosine = -(g / norm).dot(dir.template cast<Scalar>());
        if (cosine > Scalar(0)) s.orient = cosine * cosine;
      }
    }
    out.samples.push_back(s);
  }
}

constexpr double kDepthFloor = 1e-6;

}  // namespace detail

/// Emission-absorption volume rendering with K midpoint samples per ray over
/// the intersection of the ray with the bbox and [near, far]. The result is
/// composited over settings.background. Depth is the compositing-weighted mean
/// distance normalised by max(alpha, 1e-6); rays with alpha below that floor
/// put the missing mass at `far` so depth stays inside [near, far].
template <typename Scalar>
RenderedView<Scalar> render(const RadianceField<Scalar>& field, const CameraPose& pose, const RenderSettings& settings) {
  settings.validate();
  pose.validate();
  field.validate();
  const int size = settings.image_size;
  const auto grid = detail::activate(field);
  const Eigen::Vector3d origin = pose.position();
  const Eigen::Matrix<Scalar, 3, 1> bg = settings.background.template cast<Scalar>();

  RenderedView<Scalar> view;
  view.pose = pose;
  view.settings = settings;
  view.rgb = Image<Scalar>(3, size, size);
  view.alpha = VectorX<Scalar>::Zero(view.rgb.pixels());
  view.depth = VectorX<Scalar>::Constant(view.rgb.pixels(), Scalar(settings.far));
  if (settings.compute_normal) view.orientation = VectorX<Scalar>::Zero(view.rgb.pixels());

  detail::RayMarch<Scalar> ray;
  for (int py = 0; py < size; ++py)
    for (int px = 0; px < size; ++px) {
      const Index pix = Index(py) * size + px;
      detail::march(field, grid, origin, pose.ray_direction(px, py, size), settings, ray);
      Scalar log_transmittance = Scalar(0);
      Eigen::Matrix<Scalar, 3, 1> rgb = Eigen::Matrix<Scalar, 3, 1>::Zero();
      Scalar acc = Scalar(0), depth_sum = Scalar(0), orient = Scalar(0);
      for (const auto& s : ray.samples) {
        const Scalar tau = s.sigma * ray.delta;
        const Scalar w = std::exp(log_transmittance) * -std::expm1(-tau);
        log_transmittance -= tau;
        rgb += w * s.color;
        acc += w;
        depth_sum += w * s.t;
        orient += w * s.orient;
      }
      view.rgb.planes.col(pix) = rgb + (Scalar(1) - acc) * bg;
      view.alpha[pix] = acc;
      if (settings.compute_depth) {
        const Scalar floor = Scalar(detail::kDepthFloor);
        view.depth[pix] = acc >= floor ? depth_sum / acc : (depth_sum + (floor - acc) * Scalar(settings.far)) / floor;
      }
      if (settings.compute_normal) view.orientation[pix] = orient;
    }
  return view;
}

/// Reverse-mode pass through `render`: returns dL/dparams for the upstream
/// gradients in `upstream`. Orientation factors are treated as constants.
template <typename Scalar>
VectorX<Scalar> render_backward(const RadianceField<Scalar>& field, const CameraPose& pose, const RenderSettings& settings,
                                const ViewGradient<Scalar>& upstream) {
  settings.validate();
  field.validate();
  const int size = settings.image_size;
  const Index pixels = Index(size) * size;
  const bool has_rgb = upstream.rgb.size() > 0;
  const bool has_alpha = upstream.alpha.size() > 0;
  const bool has_depth = upstream.depth.size() > 0 && settings.compute_depth;
  const bool has_orient = upstream.orientation.size() > 0 && settings.compute_normal;
  if ((has_rgb && upstream.rgb.cols() != pixels) || (has_alpha && upstream.alpha.size() != pixels) ||
      (has_depth && upstream.depth.size() != pixels) || (has_orient && upstream.orientation.size() != pixels))
    throw ShapeError("render_backward: upstream gradient does not match the image size");

  const auto grid = detail::activate(field);
  const Eigen::Vector3d origin = pose.position();
  const Eigen::Matrix<Scalar, 3, 1> bg = settings.background.template cast<Scalar>();
  const Index n = field.nodes();
  VectorX<Scalar> post_density_grad = VectorX<Scalar>::Zero(n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor> post_color_grad =
      Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>::Zero(n, 3);

  detail::RayMarch<Scalar> ray;
  std::vector<Scalar> weights, transmit_after, dw;
  for (int py = 0; py < size; ++py)
    for (int px = 0; px < size; ++px) {
      const Index pix = Index(py) * size + px;
      detail::march(field, grid, origin, pose.ray_direction(px, py, size), settings, ray);
      const std::size_t k = ray.samples.size();
      if (k == 0) continue;
      weights.assign(k, Scalar(0));
      transmit_after.assign(k, Scalar(0));
      Scalar log_transmittance = Scalar(0), acc = Scalar(0), depth_sum = Scalar(0);
      for (std::size_t i = 0; i < k; ++i) {
        const Scalar tau = ray.samples[i].sigma * ray.delta;
        weights[i] = std::exp(log_transmittance) * -std::expm1(-tau);
        log_transmittance -= tau;
        transmit_after[i] = std::exp(log_transmittance);
        acc += weights[i];
        depth_sum += weights[i] * ray.samples[i].t;
      }
      const Eigen::Matrix<Scalar, 3, 1> g_rgb =
          has_rgb ? Eigen::Matrix<Scalar, 3, 1>(upstream.rgb.col(pix)) : Eigen::Matrix<Scalar, 3, 1>::Zero();
      const Scalar g_alpha = has_alpha ? upstream.alpha[pix] : Scalar(0);
      const Scalar g_depth = has_depth ? upstream.depth[pix] : Scalar(0);
      const Scalar g_orient = has_orient ? upstream.orientation[pix] : Scalar(0);
      const Scalar floor = Scalar(detail::kDepthFloor);
      const Scalar depth = acc >= floor ? depth_sum / acc : Scalar(0);

      dw.assign(k, Scalar(0));
      for (std::size_t i = 0; i < k; ++i) {
        const auto& s = ray.samples[i];
        Scalar g = g_rgb.dot(s.color - bg) + g_alpha + g_orient * s.orient;
        if (g_depth != Scalar(0))
          g += acc >= floor ? g_depth * (s.t - depth) / acc : g_depth * (s.t - Scalar(settings.far)) / floor;
        dw[i] = g;
        if (has_rgb) {
          const Eigen::Matrix<Scalar, 3, 1> gc = weights[i] * g_rgb;
          for (int c = 0; c < 8; ++c) post_color_grad.row(s.tri.index[c]) += s.tri.weight[c] * gc.transpose();
        }
      }
      // dL/dtau_i = dw_i * T_{i+1} - sum_{j>i} dw_j * w_j
      Scalar suffix = Scalar(0);
      for (std::size_t ii = k; ii-- > 0;) {
        const Scalar g_tau = dw[ii] * transmit_after[ii] - suffix;
        suffix += dw[ii] * weights[ii];
        const Scalar g_sigma = g_tau * ray.delta;
        if (g_sigma == Scalar(0)) continue;
        const auto& tri = ray.samples[ii].tri;
        for (int c = 0; c < 8; ++c) post_density_grad[tri.index[c]] += tri.weight[c] * g_sigma;
      }
    }

  VectorX<Scalar> grad(field.parameter_count());
  const auto pre_density = field.density();
  const auto pre_color = field.color();
  for (Index i = 0; i < n; ++i)
    grad[i] = post_density_grad[i] * detail::activate_density_derivative(field.density_activation, pre_density[i]);
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>> color_grad(grad.data() + n, n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const Scalar s = sigmoid(pre_color(i, c));
      color_grad(i, c) = post_color_grad(i, c) * s * (Scalar(1) - s);
    }
  return grad;
}

struct RegularizerReport {
  double total = 0.0;
  std::map<std::string, double> terms;
};

inline const std::vector<std::string>& regularizer_names() {
  static const std::vector<std::string> names{"opacity_entropy", "orientation"};
  return names;
}

/// Weighted sum of named regularisers on a rendered view:
///   opacity_entropy  mean binary entropy of alpha (0 ln 0 = 0)
///   orientation      mean over pixels of sum_i w_i max(0, n_i . d)^2 (needs compute_normal)
/// When `grad` is given, the gradient of the weighted total w.r.t. the view is added to it.
template <typename Scalar>
RegularizerReport regularization_losses(const RenderedView<Scalar>& view, const std::map<std::string, double>& weights,
                                        ViewGradient<Scalar>* grad = nullptr) {
  RegularizerReport report;
  const Index pixels = view.alpha.size();
  for (const auto& [name, weight] : weights) {
    if (std::find(regularizer_names().begin(), regularizer_names().end(), name) == regularizer_names().end())
      throw ConfigError("unknown regularizer '" + name + "'");
    require(std::isfinite(weight) && weight >= 0.0, "regularizer weight for '" + name + "' must be finite and >= 0");
    double term = 0.0;
    if (name == "opacity_entropy") {
      VectorX<Scalar> g(grad ? pixels : 0);
      for (Index i = 0; i < pixels; ++i) {
        const double a = std::clamp(double(view.alpha[i]), 0.0, 1.0);
        const double xlx = a > 0.0 ? a * std::log(a) : 0.0;
        const double ylx = a < 1.0 ? (1.0 - a) * std::log(1.0 - a) : 0.0;
        term -= xlx + ylx;
        if (grad) {
          const double ac = std::clamp(a, 1e-6, 1.0 - 1e-6);
          g[i] = Scalar(weight * std::log((1.0 - ac) / ac) / double(pixels));
        }
      }
      term /= double(pixels);
      if (grad && weight != 0.0) {
        if (grad->alpha.size() == 0) grad->alpha = VectorX<Scalar>::Zero(pixels);
        grad->alpha += g;
      }
    } else if (name == "orientation") {
      if (view.orientation.size() != pixels) throw ConfigError("orientation regularizer needs compute_normal renders");
      term = double(view.orientation.template cast<double>().mean());
      if (grad && weight != 0.0) {
        if (grad->orientation.size() == 0) grad->orientation = VectorX<Scalar>::Zero(pixels);
        grad->orientation.array() += Scalar(weight / double(pixels));
      }
    }
    report.terms[name] = term;
    report.total += weight * term;
  }
  return report;
}

/// Mean of the RGB channels as a scalar loss gradient helper: d mean(rgb) / d rgb.
template <typename Scalar>
ViewGradient<Scalar> mean_rgb_gradient(const RenderedView<Scalar>& view) {
  ViewGradient<Scalar> g;
  g.rgb = MatrixR<Scalar>::Constant(3, view.rgb.pixels(), Scalar(1) / Scalar(3 * view.rgb.pixels()));
  return g;
}

}  // namespace sdsgan
