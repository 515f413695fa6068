#pragma once

#include "sdsgan/camera.hpp"
#include "sdsgan/core.hpp"
#include "sdsgan/nn.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace sdsgan {

struct DiscriminatorConfig {
  int image_size = 64;
  int base_channels = 64;
  int n_blocks = 4;
  bool pose_conditioning = true;
  double r1_gamma = 1.0;
  int r1_interval = 4;  // lazy R1: every k-th discriminator step
  double leak = 0.2;

  void validate() const {
    require(image_size >= 8, "discriminator image_size must be >= 8");
    require(n_blocks >= 1, "discriminator needs at least one block");
    require(image_size % (1 << n_blocks) == 0, "discriminator image_size must be divisible by 2^n_blocks");
    require(base_channels >= 1, "discriminator base_channels must be >= 1");
    require(r1_gamma >= 0.0, "r1_gamma must be >= 0");
    require(r1_interval >= 1, "r1_interval must be >= 1");
  }
  bool operator==(const DiscriminatorConfig&) const = default;
};

/// Convolutional critic, EG3D-like trunk without the super-resolution branch:
/// 1x1 fromRGB, n_blocks x (conv3x3, lrelu, conv3x3, lrelu, avgpool), then a
/// two-layer head to one logit. Pose (sin/cos of azimuth and elevation) is
/// projected to a per-channel bias added at the input of block n_blocks/2.
///
/// All activations are leaky ReLU, so the input gradient is piecewise linear in
/// the input; the R1 parameter gradient below is exact under that property.
template <typename Scalar>
class Discriminator {
 public:
  struct Tape {
    std::vector<MatrixR<Scalar>> cols;      // conv im2col inputs, call order
    std::vector<FeatureMap<Scalar>> pre;    // conv pre-activations, call order
    VectorX<Scalar> flat, head_pre, head_act;
    VectorX<Scalar> pose_features;
    // backward signals dD/dz at every linear layer output (filled by backward)
    std::vector<FeatureMap<Scalar>> conv_signal;
    VectorX<Scalar> head_signal;
  };

  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build_layout();
    params = VectorX<Scalar>::Zero(layout_size_);
    Rng rng(seed);
    from_rgb_.init(params, rng);
    for (const auto& c : convs_) c.init(params, rng);
    pose_proj_.init(params, rng, 0.5);
    fc_.init(params, rng, std::sqrt(2.0));
    out_.init(params, rng);
  }

  const DiscriminatorConfig& config() const { return config_; }
  Index parameter_count() const { return layout_size_; }
  int final_size() const { return config_.image_size >> config_.n_blocks; }

  Scalar forward(const Image<Scalar>& image, const PoseAngles& pose, Tape* tape = nullptr) const {
    if (image.channels() != 3 || image.height != config_.image_size || image.width != config_.image_size)
      throw ShapeError("discriminator expects 3x" + std::to_string(config_.image_size) + "x" +
                       std::to_string(config_.image_size) + " images, got " + std::to_string(image.channels()) + "x" +
                       std::to_string(image.height) + "x" + std::to_string(image.width));
    Tape local;
    Tape& tp = tape ? *tape : local;
    tp = Tape{};
    const Scalar leak = Scalar(config_.leak);
    tp.pose_features = pose_features(pose);

    auto conv_act = [&](const nn::Conv2d& conv, const FeatureMap<Scalar>& in) {
      tp.cols.emplace_back();
      tp.pre.push_back(nn::conv_forward(conv, params, in, tp.cols.back()));
      return nn::leaky_relu(tp.pre.back(), leak);
    };

    FeatureMap<Scalar> a = conv_act(from_rgb_, image);
    for (int b = 0; b < config_.n_blocks; ++b) {
      if (b == pose_block() && config_.pose_conditioning) a.planes.colwise() += pose_bias(tp.pose_features);
      a = conv_act(convs_[2 * b], a);
      a = conv_act(convs_[2 * b + 1], a);
      a = nn::avg_pool2(a);
    }
    tp.flat = Eigen::Map<const VectorX<Scalar>>(a.planes.data(), a.planes.size());
    tp.head_pre = nn::view(params, fc_.weight) * tp.flat + nn::view(params, fc_.bias).col(0);
    tp.head_act = tp.head_pre.unaryExpr([leak](Scalar v) { return v > Scalar(0) ? v : leak * v; });
    return (nn::view(params, out_.weight) * tp.head_act)(0, 0) + nn::view(params, out_.bias)(0, 0);
  }

  /// Backpropagates `upstream` * dD. Accumulates parameter gradients into
  /// `param_grad` (when non-null), records the per-layer backward signals in the
  /// tape and returns dD/dimage scaled by `upstream` (when wanted).
  Image<Scalar> backward(Tape& tp, Scalar upstream, VectorX<Scalar>* param_grad, bool want_input_grad = true) const {
    if (param_grad && param_grad->size() != params.size()) *param_grad = VectorX<Scalar>::Zero(params.size());
    const Scalar leak = Scalar(config_.leak);
    const int c = config_.base_channels, s = final_size();
    if (param_grad) {
      nn::view(*param_grad, out_.weight).row(0) += upstream * tp.head_act.transpose();
      nn::view(*param_grad, out_.bias)(0, 0) += upstream;
    }
    VectorX<Scalar> g = upstream * nn::view(params, out_.weight).row(0).transpose();
    g = g.binaryExpr(tp.head_pre, [leak](Scalar gv, Scalar z) { return z > Scalar(0) ? gv : leak * gv; });
    tp.head_signal = g;
    if (param_grad) {
      nn::view(*param_grad, fc_.weight).noalias() += g * tp.flat.transpose();
      nn::view(*param_grad, fc_.bias).col(0) += g;
    }
    const VectorX<Scalar> g_flat = nn::view(params, fc_.weight).transpose() * g;
    FeatureMap<Scalar> ga(c, s, s);
    ga.planes = Eigen::Map<const MatrixR<Scalar>>(g_flat.data(), c, Index(s) * s);

    tp.conv_signal.assign(tp.pre.size(), {});
    std::size_t i = tp.pre.size();
    auto conv_back = [&](const nn::Conv2d& conv, const FeatureMap<Scalar>& g_act, bool want_input) {
      --i;
      FeatureMap<Scalar> gz = nn::leaky_relu_backward(tp.pre[i], g_act, leak);
      tp.conv_signal[i] = gz;
      return nn::conv_backward(conv, params, tp.cols[i], gz, param_grad, want_input);
    };
    for (int b = config_.n_blocks - 1; b >= 0; --b) {
      ga = nn::avg_pool2_backward(ga);
      ga = conv_back(convs_[2 * b + 1], ga, true);
      ga = conv_back(convs_[2 * b], ga, true);
      if (b == pose_block() && config_.pose_conditioning && param_grad) {
        const VectorX<Scalar> g_bias = ga.planes.rowwise().sum();
        nn::view(*param_grad, pose_proj_.weight).noalias() += g_bias * tp.pose_features.transpose();
        nn::view(*param_grad, pose_proj_.bias).col(0) += g_bias;
      }
    }
    return conv_back(from_rgb_, ga, want_input_grad);
  }

  Image<Scalar> input_gradient(const Image<Scalar>& image, const PoseAngles& pose) const {
    Tape tp;
    forward(image, pose, &tp);
    return backward(tp, Scalar(1), nullptr, true);
  }

  /// Adds scale * d/dparams (1/2 ||dD/dx||^2) using a tape on which backward
  /// (upstream 1) has run and `input_grad` = dD/dx. The tangent of the
  /// linearised network along dD/dx meets the recorded backward signals at
  /// every weight; biases and the pose projection only move activation masks
  /// and receive no gradient.
  void r1_param_gradient(const Tape& tp, const Image<Scalar>& input_grad, Scalar scale, VectorX<Scalar>& grad) const {
    if (grad.size() != params.size()) grad = VectorX<Scalar>::Zero(params.size());
    const Scalar leak = Scalar(config_.leak);
    std::size_t i = 0;
    auto tangent = [&](const nn::Conv2d& conv, const FeatureMap<Scalar>& a) {
      const MatrixR<Scalar> cols = nn::im2col(a, conv.kernel);
      nn::view(grad, conv.weight).noalias() += scale * tp.conv_signal[i].planes * cols.transpose();
      FeatureMap<Scalar> z;
      z.height = a.height;
      z.width = a.width;
      z.planes.noalias() = nn::view(params, conv.weight) * cols;
      z.planes = z.planes.binaryExpr(tp.pre[i].planes, [leak](Scalar v, Scalar pre) { return pre > Scalar(0) ? v : leak * v; });
      ++i;
      return z;
    };
    FeatureMap<Scalar> a = tangent(from_rgb_, input_grad);
    for (int b = 0; b < config_.n_blocks; ++b) {
      a = tangent(convs_[2 * b], a);
      a = tangent(convs_[2 * b + 1], a);
      a = nn::avg_pool2(a);
    }
    const Eigen::Map<const VectorX<Scalar>> flat(a.planes.data(), a.planes.size());
    nn::view(grad, fc_.weight).noalias() += scale * tp.head_signal * flat.transpose();
    VectorX<Scalar> h = nn::view(params, fc_.weight) * flat;
    h = h.binaryExpr(tp.head_pre, [leak](Scalar v, Scalar pre) { return pre > Scalar(0) ? v : leak * v; });
    nn::view(grad, out_.weight).row(0) += scale * h.transpose();
  }

  VectorX<Scalar> params;

 private:
  int pose_block() const { return config_.n_blocks / 2; }

  static VectorX<Scalar> pose_features(const PoseAngles& pose) {
    VectorX<Scalar> f(4);
    f << Scalar(std::sin(pose.azimuth)), Scalar(std::cos(pose.azimuth)), Scalar(std::sin(pose.elevation)),
        Scalar(std::cos(pose.elevation));
    return f;
  }

  VectorX<Scalar> pose_bias(const VectorX<Scalar>& features) const {
    return nn::view(params, pose_proj_.weight) * features + nn::view(params, pose_proj_.bias).col(0);
  }

  void build_layout() {
    nn::Layout layout;
    const int c = config_.base_channels;
    from_rgb_ = nn::Conv2d::make(layout, 3, c, 1);
    for (int b = 0; b < config_.n_blocks; ++b) {
      convs_.push_back(nn::Conv2d::make(layout, c, c, 3));
      convs_.push_back(nn::Conv2d::make(layout, c, c, 3));
    }
    pose_proj_ = nn::Linear::make(layout, 4, c);
    const int s = final_size();
    fc_ = nn::Linear::make(layout, c * s * s, c);
    out_ = nn::Linear::make(layout, c, 1);
    layout_size_ = layout.size;
  }

  DiscriminatorConfig config_;
  Index layout_size_ = 0;
  nn::Conv2d from_rgb_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear pose_proj_, fc_, out_;
};

using Discriminatorf = Discriminator<float>;

template <typename Scalar>
struct GanSample {
  Image<Scalar> image;
  PoseAngles pose;
  bool is_real = true;
};

/// Batch of discriminator inputs; B >= 1.
template <typename Scalar>
struct GanBatch {
  std::vector<GanSample<Scalar>> items;
  void validate() const { require(!items.empty(), "GAN batch must hold at least one image"); }
};

struct GanLosses {
  double d_loss = 0.0;
  double g_loss = 0.0;
};

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Non-saturating logistic losses:
///   d_loss = mean softplus(-real) + mean softplus(fake),  g_loss = mean softplus(-fake).
inline GanLosses gan_losses(std::span<const double> real_logits, std::span<const double> fake_logits) {
  GanLosses out;
  for (double r : real_logits) out.d_loss += stable_softplus(-r) / double(real_logits.size());
  for (double f : fake_logits) {
    out.d_loss += stable_softplus(f) / double(fake_logits.size());
    out.g_loss += stable_softplus(-f) / double(fake_logits.size());
  }
  return out;
}

// d softplus(-x)/dx and d softplus(x)/dx
inline double real_logit_grad(double x) { return -sigmoid(-x); }
inline double fake_logit_grad(double x) { return sigmoid(x); }

/// (gamma / 2) * mean over the batch of ||d logit / d image||^2. `Critic` needs
/// `input_gradient(image, pose)`.
template <typename Critic, typename Scalar>
double r1_penalty(const Critic& critic, std::span<const GanSample<Scalar>> real_batch, double gamma) {
  require(!real_batch.empty(), "r1_penalty: real batch is empty");
  if (gamma == 0.0) return 0.0;
  double total = 0.0;
  for (const auto& sample : real_batch) total += double(critic.input_gradient(sample.image, sample.pose).planes.squaredNorm());
  return 0.5 * gamma * total / double(real_batch.size());
}

}  // namespace sdsgan
