#include "helpers.hpp"

#include "sdsgan/field_io.hpp"
#include "sdsgan/scene.hpp"

#include <fstream>

using namespace sdsgan;
using testing::TempDir;

namespace {

const Fieldf::Box kUnitBox{Eigen::Vector3f::Constant(-1), Eigen::Vector3f::Constant(1)};

// Post-activation density d at every node, stored as softplus pre-activations.
template <typename Scalar, typename F>
void set_density(RadianceField<Scalar>& field, F&& post) {
  for (int z = 0; z < field.resolution; ++z)
    for (int y = 0; y < field.resolution; ++y)
      for (int x = 0; x < field.resolution; ++x)
        field.params[field.node_index(x, y, z)] = inverse_softplus(std::max(Scalar(1e-12), Scalar(post(field.node_position(x, y, z)))));
}

CameraPose front_pose() {
  CameraPose p;
  p.azimuth = 0.0;
  p.elevation = 0.0;
  p.radius = 3.0;
  return p;
}

}  // namespace

TEST_CASE("init_field is deterministic and validates resolution") {
  const Fieldf a = init_field<float>(32, kUnitBox, 7);
  const Fieldf b = init_field<float>(32, kUnitBox, 7);
  CHECK(a == b);
  const Fieldf small = init_field<float>(8, kUnitBox, 1);
  CHECK(small.resolution == 8);
  CHECK(small.params.size() == 4 * 8 * 8 * 8);
  CHECK_THROWS_AS(init_field<float>(7, kUnitBox, 1), ConfigError);
}

TEST_CASE("initial centre-ray alpha matches the blob's analytic transmittance") {
  const Fieldd field = init_field<double>(64, {Eigen::Vector3d::Constant(-1), Eigen::Vector3d::Constant(1)}, 0);
  RenderSettings s;
  s.image_size = 9;
  s.samples_per_ray = 512;
  const auto view = render(field, front_pose(), s);
  const double alpha = view.alpha[4 * 9 + 4];
  // optical depth of 2 sigmoid((0.35 - |z|) / 0.05) over z in [-1, 1]
  double tau = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = -1.0 + (i + 0.5) * 2.0 / n;
    tau += 2.0 / (1.0 + std::exp(-(0.35 - std::abs(z)) / 0.05)) * 2.0 / n;
  }
  const double expected = 1.0 - std::exp(-tau);
  CHECK(alpha > 0.0);
  CHECK(alpha < 1.0);
  CHECK(alpha == doctest::Approx(expected).epsilon(5e-3));
}

TEST_CASE("zero-density field renders the background with zero alpha") {
  Fieldf field(8, kUnitBox);
  field.density().setConstant(-60.0f);
  RenderSettings s;
  s.image_size = 8;
  s.background = Eigen::Vector3d(0.2, 0.4, 0.6);
  const auto view = render(field, front_pose(), s);
  CHECK(view.alpha.cwiseAbs().maxCoeff() < 1e-12);
  for (Index p = 0; p < view.rgb.pixels(); ++p)
    for (int c = 0; c < 3; ++c) CHECK(view.rgb.planes(c, p) == doctest::Approx(s.background[c]).epsilon(1e-6));
}

TEST_CASE("homogeneous sphere alpha follows exp transmittance") {
  // density 1 inside radius 0.5, with a linear ramp one cell wide centred on the
  // surface so the interpolated profile integrates to the exact chord
  const int n = 201;
  Fieldd field(n, {Eigen::Vector3d::Constant(-1), Eigen::Vector3d::Constant(1)});
  const double h = 2.0 / n;
  set_density(field, [&](const Eigen::Vector3d& p) { return std::clamp((0.5 - p.norm()) / h + 0.5, 0.0, 1.0); });
  RenderSettings s;
  s.image_size = 9;
  s.samples_per_ray = 2048;
  const auto view = render(field, front_pose(), s);
  CHECK(std::abs(view.alpha[4 * 9 + 4] - (1.0 - std::exp(-1.0))) < 1e-3);
}

TEST_CASE("opaque red box filling the view renders red") {
  Fieldf field(8, kUnitBox);
  field.density().setConstant(inverse_softplus(100.0f));
  field.color().col(0).setConstant(20.0f);
  field.color().col(1).setConstant(-20.0f);
  field.color().col(2).setConstant(-20.0f);
  RenderSettings s;
  s.image_size = 16;
  const auto view = render(field, front_pose(), s);
  CHECK(view.alpha.minCoeff() > 1.0f - 1e-4f);
  CHECK(view.rgb.planes.row(0).minCoeff() > 1.0f - 1e-4f);
  CHECK(view.rgb.planes.bottomRows(2).maxCoeff() < 1e-4f);
}

TEST_CASE("rendered views keep alpha in [0,1] and depth inside [near, far]") {
  const Fieldf field = testing::random_field<float>(12, 3, 0.5);
  RenderSettings s;
  s.image_size = 16;
  for (double az : {0.0, 1.0, 2.5}) {
    CameraPose pose = front_pose();
    pose.azimuth = az;
    const auto view = render(field, pose, s);
    CHECK(view.rgb.planes.allFinite());
    CHECK(view.alpha.minCoeff() >= 0.0f);
    CHECK(view.alpha.maxCoeff() <= 1.0f);
    for (Index p = 0; p < view.alpha.size(); ++p)
      if (view.alpha[p] > 0.0f) {
        CHECK(view.depth[p] >= float(s.near) - 1e-4f);
        CHECK(view.depth[p] <= float(s.far) + 1e-4f);
      }
  }
}

TEST_CASE("compositing weights sum to alpha") {
  // white emitters over a black background: every rgb channel is sum_i w_i
  Fieldd field = testing::random_field<double>(10, 5, 0.0, 1.5);
  field.color().setConstant(60.0);
  RenderSettings s;
  s.image_size = 12;
  s.background = Eigen::Vector3d::Zero();
  const auto view = render(field, front_pose(), s);
  for (Index p = 0; p < view.alpha.size(); ++p) {
    CHECK(view.alpha[p] <= 1.0);
    CHECK(std::abs(view.rgb.planes(0, p) - view.alpha[p]) < 1e-12);
  }
}

TEST_CASE("background changes rgb by (1 - alpha) times the background change") {
  const Fieldd field = testing::random_field<double>(10, 9);
  RenderSettings a;
  a.image_size = 12;
  RenderSettings b = a;
  a.background = Eigen::Vector3d(1, 1, 1);
  b.background = Eigen::Vector3d(0.25, 0.5, 0.0);
  const auto va = render(field, front_pose(), a);
  const auto vb = render(field, front_pose(), b);
  CHECK(va.alpha == vb.alpha);
  for (Index p = 0; p < va.alpha.size(); ++p)
    for (int c = 0; c < 3; ++c)
      CHECK(vb.rgb.planes(c, p) - va.rgb.planes(c, p) ==
            doctest::Approx((1.0 - va.alpha[p]) * (b.background[c] - a.background[c])).epsilon(1e-9));
}

TEST_CASE("render is pure in single-threaded mode") {
  set_single_threaded(true);
  const Fieldf field = testing::random_field<float>(12, 4);
  RenderSettings s;
  s.image_size = 16;
  const auto a = render(field, front_pose(), s);
  const auto b = render(field, front_pose(), s);
  CHECK(a.rgb.planes == b.rgb.planes);
  CHECK(a.alpha == b.alpha);
  CHECK(a.depth == b.depth);
  set_single_threaded(false);
}

TEST_CASE("render_backward matches central differences on an 8^3 field") {
  const Fieldd field = testing::random_field<double>(8, 21);
  RenderSettings s;
  s.image_size = 8;
  s.samples_per_ray = 24;
  CameraPose pose = front_pose();
  pose.azimuth = 0.4;
  pose.elevation = 0.3;

  SUBCASE("mean rgb") {
    const auto grad = render_backward(field, pose, s, mean_rgb_gradient(render(field, pose, s)));
    Fieldd probe = field;
    const Eigen::VectorXd fd = testing::central_differences(field.params, [&](const Eigen::VectorXd& p) {
      probe.params = p;
      return render(probe, pose, s).rgb.planes.mean();
    }, 1e-3);
    CHECK(testing::relative_error(grad, fd) < 1e-3);
  }
  SUBCASE("weighted rgb, alpha and depth") {
    Rng rng(5);
    ViewGradient<double> up;
    up.rgb = MatrixR<double>(3, 64);
    for (Index i = 0; i < up.rgb.size(); ++i) up.rgb.data()[i] = rng.normal();
    up.alpha = Eigen::VectorXd(64);
    up.depth = Eigen::VectorXd(64);
    for (Index i = 0; i < 64; ++i) {
      up.alpha[i] = rng.normal();
      up.depth[i] = 0.1 * rng.normal();
    }
    const auto grad = render_backward(field, pose, s, up);
    Fieldd probe = field;
    const Eigen::VectorXd fd = testing::central_differences(field.params, [&](const Eigen::VectorXd& p) {
      probe.params = p;
      const auto v = render(probe, pose, s);
      return (v.rgb.planes.array() * up.rgb.array()).sum() + v.alpha.dot(up.alpha) + v.depth.dot(up.depth);
    }, 1e-3);
    CHECK(testing::relative_error(grad, fd) < 1e-3);
  }
}

TEST_CASE("regularization losses") {
  RenderedView<float> view;
  view.alpha = VectorX<float>::Zero(16);
  CHECK(regularization_losses(view, {{"opacity_entropy", 1.0}}).terms.at("opacity_entropy") == 0.0);
  view.alpha.setConstant(0.5f);
  const auto half = regularization_losses(view, {{"opacity_entropy", 2.0}});
  CHECK(half.terms.at("opacity_entropy") == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(half.total == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
  view.orientation = VectorX<float>::Constant(16, 0.3f);
  CHECK(regularization_losses(view, {{"opacity_entropy", 0.0}, {"orientation", 0.0}}).total == 0.0);
  CHECK_THROWS_AS(regularization_losses(view, {{"sparsity", 1.0}}), ConfigError);
  view.orientation.resize(0);
  CHECK_THROWS_AS(regularization_losses(view, {{"orientation", 1.0}}), ConfigError);
}

TEST_CASE("regularizer gradients flow through the renderer") {
  const Fieldd field = testing::random_field<double>(8, 17);
  RenderSettings s;
  s.image_size = 8;
  s.samples_per_ray = 16;
  s.compute_normal = true;
  const CameraPose pose = front_pose();
  const std::map<std::string, double> weights{{"opacity_entropy", 1.0}};
  ViewGradient<double> up;
  regularization_losses(render(field, pose, s), weights, &up);
  const auto grad = render_backward(field, pose, s, up);
  Fieldd probe = field;
  const Eigen::VectorXd fd = testing::central_differences(field.params, [&](const Eigen::VectorXd& p) {
    probe.params = p;
    return regularization_losses(render(probe, pose, s), weights).total;
  }, 1e-4);
  CHECK(testing::relative_error(grad, fd) < 1e-3);
}

TEST_CASE("field checkpoints round-trip bit-exactly and reject damage") {
  TempDir dir("field");
  const Fieldf field = testing::random_field<float>(9, 2);
  save_field(dir / "f.ckpt", field);
  CHECK(load_field(dir / "f.ckpt") == field);

  auto bytes = io::read_file(dir / "f.ckpt");
  SUBCASE("truncated") {
    bytes.resize(bytes.size() / 2);
    io::write_file_atomic(dir / "f.ckpt", bytes);
    CHECK_THROWS_AS(load_field(dir / "f.ckpt"), CorruptionError);
  }
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() / 2] ^= 0x40;
    io::write_file_atomic(dir / "f.ckpt", bytes);
    CHECK_THROWS_AS(load_field(dir / "f.ckpt"), CorruptionError);
  }
  SUBCASE("newer version") {
    bytes[4] = static_cast<std::uint8_t>(kFieldFormatVersion + 1);
    io::write_file_atomic(dir / "f.ckpt", bytes);
    try {
      load_field(dir / "f.ckpt");
      FAIL("expected a version error");
    } catch (const VersionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(std::to_string(kFieldFormatVersion + 1)) != std::string::npos);
      CHECK(msg.find(std::to_string(kFieldFormatVersion)) != std::string::npos);
    }
  }
}
