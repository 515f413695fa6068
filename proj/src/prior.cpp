#include "sdsgan/prior.hpp"

#include "sdsgan/io.hpp"

#include <cmath>

namespace sdsgan {

namespace {
constexpr std::uint32_t kPriorFormatVersion = 1;
}

void NoiseSchedule::validate() const {
  require(steps >= 1, "schedule needs at least one step");
  require(betas.size() == std::size_t(steps) && alphas_cum.size() == std::size_t(steps), "schedule arrays have the wrong length");
  for (int t = 1; t <= steps; ++t) {
    require(beta(t) > 0.0 && beta(t) < 1.0, "schedule betas must lie in (0,1)");
    if (t > 1) require(alpha_bar(t) < alpha_bar(t - 1), "alpha_bar must be strictly decreasing");
  }
}

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, const std::string& shape) {
  require(steps >= 1, "schedule steps must be >= 1");
  require(shape == "linear", "unknown schedule shape '" + shape + "'");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, "schedule needs 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(steps);
  s.alphas_cum.resize(steps);
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    s.betas[i] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / (steps - 1);
    prod *= 1.0 - s.betas[i];
    s.alphas_cum[i] = prod;
  }
  s.validate();
  return s;
}

void DenoiserConfig::validate() const {
  require(base_channels >= 1, "denoiser base_channels must be >= 1");
  require(levels >= 1, "denoiser levels must be >= 1");
  require(embed_dim >= 2, "denoiser embed_dim must be >= 2");
  require(n_labels >= 1, "denoiser needs at least one label");
  require(image_size >= 8 && image_size % (1 << levels) == 0, "denoiser image_size must be divisible by 2^levels");
}

void SdsConfig::validate(const NoiseSchedule& schedule) const {
  require(t_min < t_max, "sds: t_min must be < t_max");
  require(t_min >= 1 && t_max <= schedule.steps, "sds: t range must lie inside [1, T]");
  require(guidance >= 1.0, "sds: guidance must be >= 1");
}

SdsConfig default_sds_config(const NoiseSchedule& schedule) {
  SdsConfig cfg;
  cfg.t_min = std::max(1, static_cast<int>(std::lround(0.02 * schedule.steps)));
  cfg.t_max = std::min(schedule.steps, static_cast<int>(std::lround(0.98 * schedule.steps)));
  if (cfg.t_max <= cfg.t_min) cfg.t_max = std::min(schedule.steps, cfg.t_min + 1);
  return cfg;
}

PriorTrainResult train_toy_prior(const std::vector<LabeledImage>& corpus, const NoiseSchedule& schedule,
                                 const PriorTrainConfig& config) {
  if (corpus.empty()) throw ConfigError("train_toy_prior: corpus is empty");
  require(config.batch_size >= 1, "prior batch_size must be >= 1");
  require(config.steps >= 0, "prior steps must be >= 0");
  schedule.validate();
  PriorTrainResult result{Denoiserf(config.net, config.seed), {}};
  Denoiserf& net = result.denoiser;
  for (const auto& item : corpus) {
    net.check_label(item.label);
    if (item.image.height != config.net.image_size || item.image.width != config.net.image_size)
      throw ShapeError("train_toy_prior: corpus image size does not match the denoiser");
  }

  Rng rng(mix64(config.seed ^ 0x5eedULL));
  nn::Adam<float> adam;
  adam.lr = config.lr;
  adam.reset(net.params.size());
  VectorX<float> grad(net.params.size());
  Denoiserf::Tape tape;
  const float pixel_norm = 1.0f / float(3 * config.net.image_size * config.net.image_size);
  result.loss_trace.reserve(config.steps);

  for (int step = 0; step < config.steps; ++step) {
    grad.setZero();
    double loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& item = corpus[rng.below(corpus.size())];
      const int t = 1 + static_cast<int>(rng.below(schedule.steps));
      const int label = rng.uniform() < config.label_dropout ? net.null_label() : item.label;
      const Image<float> eps = gaussian_like<float>(3, item.image.height, item.image.width, rng);
      const Image<float> x_t = add_noise(to_prior_space(item.image), t, eps, schedule);
      const Image<float> eps_hat = net.predict(x_t, t, label, &tape);
      Image<float> g = eps_hat;
      g.planes = eps_hat.planes - eps.planes;
      loss += double(g.planes.squaredNorm()) * pixel_norm;
      g.planes *= 2.0f * pixel_norm / float(config.batch_size);
      net.backward(tape, g, grad);
    }
    loss /= config.batch_size;
    if (!std::isfinite(loss)) throw DivergenceError("train_toy_prior: non-finite loss at step " + std::to_string(step));
    result.loss_trace.push_back(loss);
    adam.update(net.params, grad);
  }
  return result;
}

double denoising_loss(const Denoiserf& prior, const NoiseSchedule& schedule, const std::vector<LabeledImage>& images,
                      std::uint64_t seed, int draws) {
  if (images.empty()) throw ConfigError("denoising_loss: no images");
  Rng rng(seed);
  double total = 0.0;
  Index count = 0;
  for (const auto& item : images)
    for (int d = 0; d < draws; ++d) {
      const int t = 1 + static_cast<int>(rng.below(schedule.steps));
      const Image<float> eps = gaussian_like<float>(3, item.image.height, item.image.width, rng);
      const Image<float> eps_hat = prior.predict(add_noise(to_prior_space(item.image), t, eps, schedule), t, item.label);
      total += double((eps_hat.planes - eps.planes).squaredNorm());
      count += eps.planes.size();
    }
  return total / double(count);
}

void save_prior(const std::filesystem::path& path, const Denoiserf& denoiser, const NoiseSchedule& schedule) {
  io::Writer w;
  const auto& c = denoiser.config();
  w.put<std::int32_t>(c.image_size);
  w.put<std::int32_t>(c.base_channels);
  w.put<std::int32_t>(c.levels);
  w.put<std::int32_t>(c.embed_dim);
  w.put<std::int32_t>(c.n_labels);
  w.put<std::int32_t>(schedule.steps);
  w.put_array(schedule.betas.data(), schedule.betas.size());
  w.put_array(denoiser.params.data(), static_cast<std::size_t>(denoiser.params.size()));
  io::write_container(path, "prior", kPriorFormatVersion, w.bytes());
}

PriorBundle load_prior(const std::filesystem::path& path) {
  io::Reader r(io::read_container(path, "prior", kPriorFormatVersion));
  DenoiserConfig c;
  c.image_size = r.get<std::int32_t>();
  c.base_channels = r.get<std::int32_t>();
  c.levels = r.get<std::int32_t>();
  c.embed_dim = r.get<std::int32_t>();
  c.n_labels = r.get<std::int32_t>();
  const int steps = r.get<std::int32_t>();
  const auto betas = r.get_array<double>();
  const auto params = r.get_array<float>();
  r.expect_end();
  if (betas.size() != std::size_t(steps)) throw CorruptionError("prior checkpoint: schedule length mismatch");
  PriorBundle bundle;
  bundle.schedule.steps = steps;
  bundle.schedule.betas = betas;
  double prod = 1.0;
  for (double b : betas) bundle.schedule.alphas_cum.push_back(prod *= 1.0 - b);
  bundle.denoiser = Denoiserf(c, 0);
  if (params.size() != std::size_t(bundle.denoiser.params.size())) throw CorruptionError("prior checkpoint: parameter count mismatch");
  std::copy(params.begin(), params.end(), bundle.denoiser.params.data());
  return bundle;
}

}  // namespace sdsgan
