#include "helpers.hpp"

#include "sdsgan/gan.hpp"

#include <limits>

using namespace sdsgan;

namespace {

DiscriminatorConfig small_disc() {
  DiscriminatorConfig c;
  c.image_size = 16;
  c.base_channels = 4;
  c.n_blocks = 2;
  return c;
}

template <typename Scalar>
Image<Scalar> random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  return gaussian_like<Scalar>(3, size, size, rng);
}

/// D(x) = <w, x>: gradient w everywhere.
struct LinearProbe {
  Image<double> w;
  Image<double> input_gradient(const Image<double>&, const PoseAngles&) const { return w; }
};

}  // namespace

TEST_CASE("logistic losses at zero logits") {
  const std::vector<double> zero{0.0, 0.0};
  const GanLosses l = gan_losses(zero, zero);
  CHECK(l.d_loss == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
  CHECK(l.g_loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("logistic losses match the direct formula") {
  const std::vector<double> real{1.5, -0.3, 2.0}, fake{-1.0, 0.7};
  auto sp = [](double x) { return std::log(1.0 + std::exp(x)); };
  const double d = (sp(-1.5) + sp(0.3) + sp(-2.0)) / 3.0 + (sp(-1.0) + sp(0.7)) / 2.0;
  const double g = (sp(1.0) + sp(-0.7)) / 2.0;
  const GanLosses l = gan_losses(real, fake);
  CHECK(l.d_loss == doctest::Approx(d).epsilon(1e-14));
  CHECK(l.g_loss == doctest::Approx(g).epsilon(1e-14));
}

TEST_CASE("logistic losses are stable for extreme logits") {
  const std::vector<double> big{800.0}, small{-800.0};
  const GanLosses good = gan_losses(big, small);
  CHECK(good.d_loss == doctest::Approx(0.0));
  CHECK(good.g_loss == doctest::Approx(800.0));
  const GanLosses bad = gan_losses(small, big);
  CHECK(std::isfinite(bad.d_loss));
  CHECK(bad.d_loss == doctest::Approx(1600.0));
}

TEST_CASE("swapping and negating real and fake logits preserves the critic loss") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> r(3), f(3), nr(3), nf(3);
    for (int k = 0; k < 3; ++k) {
      r[k] = 4.0 * rng.normal();
      f[k] = 4.0 * rng.normal();
      nr[k] = -r[k];
      nf[k] = -f[k];
    }
    CHECK(gan_losses(nf, nr).d_loss == doctest::Approx(gan_losses(r, f).d_loss).epsilon(1e-13));
  }
}

TEST_CASE("logit gradients match finite differences") {
  for (double x : {-5.0, -0.5, 0.0, 0.3, 4.0}) {
    const double h = 1e-6;
    const double real_fd = (stable_softplus(-(x + h)) - stable_softplus(-(x - h))) / (2 * h);
    const double fake_fd = (stable_softplus(x + h) - stable_softplus(x - h)) / (2 * h);
    CHECK(real_logit_grad(x) == doctest::Approx(real_fd).epsilon(1e-8));
    CHECK(fake_logit_grad(x) == doctest::Approx(fake_fd).epsilon(1e-8));
  }
}

TEST_CASE("R1 of a linear probe is gamma/2 ||w||^2") {
  LinearProbe probe{random_image<double>(8, 3)};
  std::vector<GanSample<double>> batch(4);
  for (int i = 0; i < 4; ++i) batch[i].image = random_image<double>(8, 10 + i);
  const double gamma = 0.7;
  CHECK(r1_penalty(probe, std::span<const GanSample<double>>(batch), gamma) ==
        doctest::Approx(0.5 * gamma * probe.w.planes.squaredNorm()).epsilon(1e-14));
  CHECK(r1_penalty(probe, std::span<const GanSample<double>>(batch), 0.0) == 0.0);
  CHECK_THROWS_AS(r1_penalty(probe, std::span<const GanSample<double>>(), gamma), ConfigError);
}

TEST_CASE("discriminator parameter gradient matches central differences") {
  const Discriminator<double> d(small_disc(), 5);
  const Image<double> x = random_image<double>(16, 1);
  const PoseAngles pose{0.8, 0.2};
  Discriminator<double>::Tape tape;
  d.forward(x, pose, &tape);
  Eigen::VectorXd grad;
  d.backward(tape, 1.0, &grad, false);
  Discriminator<double> probe = d;
  const Eigen::VectorXd fd = testing::central_differences(d.params, [&](const Eigen::VectorXd& p) {
    probe.params = p;
    return probe.forward(x, pose);
  }, 1e-6);
  CHECK(testing::relative_error(grad, fd) < 1e-6);
}

TEST_CASE("discriminator input gradient matches central differences") {
  const Discriminator<double> d(small_disc(), 6);
  const Image<double> x = random_image<double>(16, 2);
  const PoseAngles pose{2.0, -0.1};
  const Image<double> g = d.input_gradient(x, pose);
  Image<double> probe = x;
  const Eigen::VectorXd fd = testing::central_differences(
      Eigen::Map<const Eigen::VectorXd>(x.planes.data(), x.planes.size()).eval(),
      [&](const Eigen::VectorXd& v) {
        probe.planes = Eigen::Map<const MatrixR<double>>(v.data(), 3, 256);
        return d.forward(probe, pose);
      },
      1e-6);
  CHECK(testing::relative_error(Eigen::Map<const Eigen::VectorXd>(g.planes.data(), g.planes.size()), fd) < 1e-6);
}

TEST_CASE("R1 parameter gradient matches central differences") {
  const Discriminator<double> d(small_disc(), 7);
  const Image<double> x = random_image<double>(16, 3);
  const PoseAngles pose{1.0, 0.3};
  Discriminator<double>::Tape tape;
  d.forward(x, pose, &tape);
  const Image<double> gx = d.backward(tape, 1.0, nullptr, true);
  Eigen::VectorXd grad;
  d.r1_param_gradient(tape, gx, 1.0, grad);
  Discriminator<double> probe = d;
  const Eigen::VectorXd fd = testing::central_differences(d.params, [&](const Eigen::VectorXd& p) {
    probe.params = p;
    return 0.5 * probe.input_gradient(x, pose).planes.squaredNorm();
  }, 1e-6);
  CHECK(grad.norm() > 0.0);
  CHECK(testing::relative_error(grad, fd) < 1e-5);
}

TEST_CASE("pose conditioning") {
  DiscriminatorConfig c = small_disc();
  const Image<float> x = random_image<float>(16, 4);
  const Discriminatorf with(c, 1);
  CHECK(with.forward(x, {0.0, 0.0}) != with.forward(x, {1.0, 0.4}));
  c.pose_conditioning = false;
  const Discriminatorf without(c, 1);
  CHECK(without.forward(x, {0.0, 0.0}) == without.forward(x, {1.0, 0.4}));
}

TEST_CASE("discriminator validation") {
  const Discriminatorf d(small_disc(), 1);
  CHECK_THROWS_AS(d.forward(random_image<float>(8, 1), {}), ShapeError);
  DiscriminatorConfig c = small_disc();
  c.n_blocks = 5;
  CHECK_THROWS_AS(Discriminatorf(c, 1), ConfigError);
  c = small_disc();
  c.r1_gamma = -1.0;
  CHECK_THROWS_AS(Discriminatorf(c, 1), ConfigError);
  CHECK(Discriminatorf(small_disc(), 3).params == Discriminatorf(small_disc(), 3).params);
  CHECK(GanBatch<float>{}.items.empty());
  CHECK_THROWS_AS(GanBatch<float>{}.validate(), ConfigError);
}
