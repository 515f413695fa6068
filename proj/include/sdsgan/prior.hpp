#pragma once

#include "sdsgan/core.hpp"
#include "sdsgan/nn.hpp"
#include "sdsgan/scene.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace sdsgan {

/// Discrete DDPM schedule. Index t runs over [1, T]; alpha_bar(0) = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;       // betas[t-1]
  std::vector<double> alphas_cum;  // alphas_cum[t-1] = prod_{s<=t} (1 - beta_s)

  double beta(int t) const { return betas.at(t - 1); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alphas_cum.at(t - 1); }
  void validate() const;
  bool operator==(const NoiseSchedule&) const = default;
};

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, const std::string& shape = "linear");

/// Prior space maps [0,1] images to [-1,1].
template <typename Scalar>
Image<Scalar> to_prior_space(const Image<Scalar>& x) {
  Image<Scalar> out = x;
  out.planes = (Scalar(2) * x.planes.array() - Scalar(1)).matrix();
  return out;
}

template <typename Scalar>
Image<Scalar> from_prior_space(const Image<Scalar>& x) {
  Image<Scalar> out = x;
  out.planes = ((x.planes.array() + Scalar(1)) / Scalar(2)).matrix();
  return out;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for t in [0, T].
template <typename Scalar>
Image<Scalar> add_noise(const Image<Scalar>& x0, int t, const Image<Scalar>& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "add_noise");
  if (t < 0 || t > schedule.steps) throw ConfigError("add_noise: t out of range");
  const double ab = schedule.alpha_bar(t);
  Image<Scalar> out = x0;
  out.planes = Scalar(std::sqrt(ab)) * x0.planes + Scalar(std::sqrt(1.0 - ab)) * eps.planes;
  return out;
}

struct DenoiserConfig {
  int image_size = 32;
  int base_channels = 16;
  int levels = 2;
  int embed_dim = 32;
  int n_labels = 2;

  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Label + text-surrogate conditioning vector.
template <typename Scalar>
struct PromptEmbedding {
  int label_id = 0;
  VectorX<Scalar> vector;
};

/// Small U-Net noise predictor eps_phi(x_t; y, t): SiLU conv blocks with
/// average-pool downsampling, nearest upsampling and skip concatenation. The
/// timestep (sinusoidal) and the label embedding are merged into one vector
/// that is projected into a per-channel bias at every block. The output head
/// starts at zero, so an untrained model predicts eps_hat = 0.
template <typename Scalar>
class Denoiser {
 public:
  struct Tape {
    VectorX<Scalar> time_features, emb_pre, emb;
    std::vector<MatrixR<Scalar>> cols;            // per conv, in call order
    std::vector<FeatureMap<Scalar>> pre;          // pre-activation per silu block
    std::vector<FeatureMap<Scalar>> skips;
    int label = 0;
  };

  Denoiser() = default;
  Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build_layout();
    params = VectorX<Scalar>::Zero(layout_size_);
    Rng rng(seed);
    time_proj_.init(params, rng);
    auto table = nn::view(params, label_table_);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = Scalar(rng.normal());
    conv_in_.init(params, rng);
    for (const auto& c : enc_) c.init(params, rng);
    mid_.init(params, rng);
    for (const auto& c : dec_) c.init(params, rng);
    for (const auto& p : proj_) p.init(params, rng, 0.5);
    // zero output head
    nn::view(params, conv_out_.weight).setZero();
    nn::view(params, conv_out_.bias).setZero();
  }

  const DenoiserConfig& config() const { return config_; }
  int null_label() const { return config_.n_labels; }
  Index parameter_count() const { return layout_size_; }

  void check_label(int label) const {
    if (label < 0 || label > config_.n_labels)
      throw ConfigError("unknown label_id " + std::to_string(label) + " (prior has " + std::to_string(config_.n_labels) + " labels)");
  }

  PromptEmbedding<Scalar> prompt(int label) const {
    check_label(label);
    return {label, nn::view(params, label_table_).row(label).transpose()};
  }

  Image<Scalar> predict(const Image<Scalar>& x_t, int t, int label, Tape* tape = nullptr) const {
    check_label(label);
    if (x_t.channels() != 3 || x_t.height != config_.image_size || x_t.width != config_.image_size)
      throw ShapeError("denoiser expects 3x" + std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size));
    Tape local;
    Tape& tp = tape ? *tape : local;
    tp = Tape{};
    tp.label = label;
    tp.time_features = nn::sinusoidal_embedding<Scalar>(double(t), config_.embed_dim);
    tp.emb_pre = nn::view(params, time_proj_.weight) * tp.time_features + nn::view(params, time_proj_.bias).col(0) +
                 nn::view(params, label_table_).row(label).transpose();
    tp.emb = nn::silu(tp.emb_pre);

    std::size_t p = 0;
    auto block = [&](const nn::Conv2d& conv, const FeatureMap<Scalar>& in) {
      tp.cols.emplace_back();
      FeatureMap<Scalar> z = nn::conv_forward(conv, params, in, tp.cols.back());
      const auto& pr = proj_[p++];
      const VectorX<Scalar> bias = nn::view(params, pr.weight) * tp.emb + nn::view(params, pr.bias).col(0);
      z.planes.colwise() += bias;
      tp.pre.push_back(z);
      return nn::silu(z);
    };

    FeatureMap<Scalar> a = block(conv_in_, x_t);
    for (int l = 0; l < config_.levels; ++l) {
      a = block(enc_[l], a);
      tp.skips.push_back(a);
      a = nn::avg_pool2(a);
    }
    a = block(mid_, a);
    for (int l = config_.levels - 1; l >= 0; --l) {
      a = nn::concat_channels(nn::upsample2(a), tp.skips[l]);
      a = block(dec_[config_.levels - 1 - l], a);
    }
    tp.cols.emplace_back();
    return nn::conv_forward(conv_out_, params, a, tp.cols.back());
  }

  /// Accumulates d(<g_out, eps_hat>)/dparams into `grad`.
  void backward(const Tape& tp, const Image<Scalar>& g_out, VectorX<Scalar>& grad) const {
    if (grad.size() != params.size()) grad = VectorX<Scalar>::Zero(params.size());
    VectorX<Scalar> g_emb = VectorX<Scalar>::Zero(config_.embed_dim);
    std::size_t conv_i = tp.cols.size() - 1;
    std::size_t block_i = tp.pre.size();

    FeatureMap<Scalar> g = nn::conv_backward(conv_out_, params, tp.cols[conv_i--], g_out, &grad, true);
    auto block_back = [&](const nn::Conv2d& conv, const FeatureMap<Scalar>& g_act, bool want_input) {
      --block_i;
      FeatureMap<Scalar> gz = nn::silu_backward(tp.pre[block_i], g_act);
      const auto& pr = proj_[block_i];
      const VectorX<Scalar> g_bias = gz.planes.rowwise().sum();
      nn::view(grad, pr.weight).noalias() += g_bias * tp.emb.transpose();
      nn::view(grad, pr.bias).col(0) += g_bias;
      g_emb.noalias() += nn::view(params, pr.weight).transpose() * g_bias;
      return nn::conv_backward(conv, params, tp.cols[conv_i--], gz, &grad, want_input);
    };

    std::vector<FeatureMap<Scalar>> g_skips(config_.levels);
    for (int l = 0; l < config_.levels; ++l) {
      const auto& conv = dec_[config_.levels - 1 - l];
      FeatureMap<Scalar> g_cat = block_back(conv, g, true);
      const int up_channels = g_cat.channels() - tp.skips[l].channels();
      g_skips[l] = nn::take_channels(g_cat, up_channels, tp.skips[l].channels());
      g = nn::upsample2_backward(nn::take_channels(g_cat, 0, up_channels));
    }
    g = block_back(mid_, g, true);
    for (int l = config_.levels - 1; l >= 0; --l) {
      g = nn::avg_pool2_backward(g);
      g.planes += g_skips[l].planes;
      g = block_back(enc_[l], g, true);
    }
    block_back(conv_in_, g, false);

    const VectorX<Scalar> g_pre = nn::silu_backward(tp.emb_pre, g_emb);
    nn::view(grad, time_proj_.weight).noalias() += g_pre * tp.time_features.transpose();
    nn::view(grad, time_proj_.bias).col(0) += g_pre;
    nn::view(grad, label_table_).row(tp.label) += g_pre.transpose();
  }

  nn::Slice label_table_slice() const { return label_table_; }

  VectorX<Scalar> params;

 private:
  void build_layout() {
    nn::Layout layout;
    const int e = config_.embed_dim, b = config_.base_channels, levels = config_.levels;
    time_proj_ = nn::Linear::make(layout, e, e);
    label_table_ = layout.add(config_.n_labels + 1, e);
    std::vector<int> ch(levels + 1);
    for (int l = 0; l <= levels; ++l) ch[l] = b << l;
    conv_in_ = nn::Conv2d::make(layout, 3, b);
    proj_.push_back(nn::Linear::make(layout, e, b));
    for (int l = 0; l < levels; ++l) {
      enc_.push_back(nn::Conv2d::make(layout, l == 0 ? b : ch[l - 1], ch[l]));
      proj_.push_back(nn::Linear::make(layout, e, ch[l]));
    }
    mid_ = nn::Conv2d::make(layout, ch[levels - 1], ch[levels]);
    proj_.push_back(nn::Linear::make(layout, e, ch[levels]));
    for (int l = levels - 1; l >= 0; --l) {
      dec_.push_back(nn::Conv2d::make(layout, ch[l + 1] + ch[l], ch[l]));
      proj_.push_back(nn::Linear::make(layout, e, ch[l]));
    }
    conv_out_ = nn::Conv2d::make(layout, b, 3);
    layout_size_ = layout.size;
  }

  DenoiserConfig config_;
  Index layout_size_ = 0;
  nn::Linear time_proj_;
  nn::Slice label_table_;
  nn::Conv2d conv_in_, mid_, conv_out_;
  std::vector<nn::Conv2d> enc_, dec_;
  std::vector<nn::Linear> proj_;  // in block call order
};

using Denoiserf = Denoiser<float>;

/// Noise prediction with optional classifier-free guidance against the null label.
template <typename Scalar>
Image<Scalar> predict_noise(const Denoiser<Scalar>& prior, const Image<Scalar>& x_t, int t, int label, double guidance = 1.0) {
  Image<Scalar> eps_hat = prior.predict(x_t, t, label);
  if (guidance != 1.0) {
    const Image<Scalar> uncond = prior.predict(x_t, t, prior.null_label());
    eps_hat.planes = uncond.planes + Scalar(guidance) * (eps_hat.planes - uncond.planes);
  }
  return eps_hat;
}

struct SdsConfig {
  enum class Weighting { uniform, sigma_sq };
  Weighting weighting = Weighting::sigma_sq;
  int t_min = 2;
  int t_max = 98;
  double guidance = 1.0;

  void validate(const NoiseSchedule& schedule) const;
  double weight(const NoiseSchedule& schedule, int t) const {
    return weighting == Weighting::uniform ? 1.0 : 1.0 - schedule.alpha_bar(t);
  }
};

/// Default t range: [0.02 T, 0.98 T].
SdsConfig default_sds_config(const NoiseSchedule& schedule);

/// w(t) (eps_hat - eps) in prior space; eps_hat is a constant (no denoiser Jacobian).
template <typename Scalar>
Image<Scalar> sds_residual(const Denoiser<Scalar>& prior, const NoiseSchedule& schedule, const Image<Scalar>& rgb, int label,
                           int t, const Image<Scalar>& eps, const SdsConfig& cfg, Image<Scalar>* eps_hat_out = nullptr) {
  cfg.validate(schedule);
  if (t < cfg.t_min || t > cfg.t_max)
    throw ConfigError("sds: t=" + std::to_string(t) + " outside [" + std::to_string(cfg.t_min) + ", " + std::to_string(cfg.t_max) + "]");
  const Image<Scalar> x_t = add_noise(to_prior_space(rgb), t, eps, schedule);
  Image<Scalar> eps_hat = predict_noise(prior, x_t, t, label, cfg.guidance);
  Image<Scalar> r = eps_hat;
  r.planes = Scalar(cfg.weight(schedule, t)) * (eps_hat.planes - eps.planes);
  if (eps_hat_out) *eps_hat_out = std::move(eps_hat);
  return r;
}

/// Image-space SDS gradient: d<r, 2x - 1>/dx = 2 r.
template <typename Scalar>
ViewGradient<Scalar> sds_view_gradient(const Image<Scalar>& residual, Scalar scale = Scalar(1)) {
  ViewGradient<Scalar> g;
  g.rgb = (Scalar(2) * scale) * residual.planes;
  return g;
}

/// Field gradient of the surrogate <stop(r), 2 render(theta) - 1>.
template <typename Scalar>
VectorX<Scalar> sds_gradient_from_residual(const RadianceField<Scalar>& field, const CameraPose& pose,
                                           const RenderSettings& settings, const Image<Scalar>& residual) {
  if (residual.height != settings.image_size || residual.width != settings.image_size || residual.channels() != 3)
    throw ShapeError("sds: residual does not match render size");
  return render_backward(field, pose, settings, sds_view_gradient(residual));
}

/// Score distillation gradient w(t) (eps_hat - eps) dx/dtheta for one noise draw.
template <typename Scalar>
VectorX<Scalar> sds_gradient(const Denoiser<Scalar>& prior, const NoiseSchedule& schedule, const RadianceField<Scalar>& field,
                             const RenderedView<Scalar>& view, int label, int t, const Image<Scalar>& eps, const SdsConfig& cfg) {
  const Image<Scalar> r = sds_residual(prior, schedule, view.rgb, label, t, eps, cfg);
  return sds_gradient_from_residual(field, view.pose, view.settings, r);
}

/// Noise to t* = round(strength T), then run the ancestral reverse chain to 0
/// (x0 prediction clipped to [-1,1]). strength = 0 returns the input unchanged.
template <typename Scalar>
Image<Scalar> i2i_enhance(const Denoiser<Scalar>& prior, const Image<Scalar>& image, double strength, int label,
                          std::uint64_t seed, const NoiseSchedule& schedule, double guidance = 1.0) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("i2i strength must lie in [0,1]");
  prior.check_label(label);
  const int t_start = static_cast<int>(std::lround(strength * schedule.steps));
  if (t_start == 0) return image;
  Rng rng(seed);
  const Image<Scalar> eps = gaussian_like<Scalar>(3, image.height, image.width, rng);
  Image<Scalar> x = add_noise(to_prior_space(image), t_start, eps, schedule);
  for (int t = t_start; t >= 1; --t) {
    const Image<Scalar> eps_hat = predict_noise(prior, x, t, label, guidance);
    const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t - 1), beta = schedule.beta(t);
    MatrixR<Scalar> x0 = (x.planes - Scalar(std::sqrt(1.0 - ab)) * eps_hat.planes) / Scalar(std::sqrt(ab));
    x0 = x0.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    x.planes = Scalar(c0) * x0 + Scalar(ct) * x.planes;
    if (t > 1) {
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      for (Index i = 0; i < x.planes.size(); ++i) x.planes.data()[i] += Scalar(sigma * rng.normal());
    }
  }
  Image<Scalar> out = from_prior_space(x);
  out.planes = out.planes.cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
  return out;
}

struct LabeledImage {
  Image<float> image;
  int label = 0;
};

struct PriorTrainConfig {
  DenoiserConfig net;
  int steps = 4000;
  int batch_size = 8;
  double lr = 2e-3;
  double label_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct PriorTrainResult {
  Denoiserf denoiser;
  std::vector<double> loss_trace;  // per step, mean squared noise error
};

PriorTrainResult train_toy_prior(const std::vector<LabeledImage>& corpus, const NoiseSchedule& schedule,
                                 const PriorTrainConfig& config);

/// Mean ||eps - eps_hat||^2 / n over `draws` noise draws per image, t ~ U[1, T].
double denoising_loss(const Denoiserf& prior, const NoiseSchedule& schedule, const std::vector<LabeledImage>& images,
                      std::uint64_t seed, int draws = 1);

struct PriorBundle {
  Denoiserf denoiser;
  NoiseSchedule schedule;
};

void save_prior(const std::filesystem::path& path, const Denoiserf& denoiser, const NoiseSchedule& schedule);
PriorBundle load_prior(const std::filesystem::path& path);

}  // namespace sdsgan
