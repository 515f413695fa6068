#include "sdsgan/trainer.hpp"

#include "sdsgan/field_io.hpp"
#include "sdsgan/io.hpp"

#include <cstdio>
#include <sstream>

namespace sdsgan {

namespace fs = std::filesystem;

void LossWeights::validate() const {
  require(std::isfinite(sds) && sds >= 0.0, "loss weight sds must be >= 0");
  require(std::isfinite(gan0) && gan0 >= 0.0, "loss weight gan0 must be >= 0");
  require(std::isfinite(l2) && l2 >= 0.0, "loss weight l2 must be >= 0");
  require(decay == "linear", "unknown decay '" + decay + "'");
  for (const auto& [name, w] : reg) {
    if (std::find(regularizer_names().begin(), regularizer_names().end(), name) == regularizer_names().end())
      throw ConfigError("unknown regularizer '" + name + "'");
    require(std::isfinite(w) && w >= 0.0, "regularizer weight '" + name + "' must be >= 0");
  }
}

double loss_weight_schedule(int step, int total_steps, double lambda0, const std::string& decay) {
  require(decay == "linear", "unknown decay '" + decay + "'");
  require(total_steps >= 1, "schedule needs total_steps >= 1");
  if (step < 0 || step > total_steps)
    throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  if (step == total_steps) return 0.0;
  return lambda0 * (1.0 - double(step) / double(total_steps));
}

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::L2_ONLY:
      return "L2_ONLY";
    case AblationMode::GAN_ONLY:
      return "GAN_ONLY";
    case AblationMode::SDS_L2:
      return "SDS_L2";
    case AblationMode::SDS_GAN:
      return "SDS_GAN";
  }
  return "SDS_GAN";
}

AblationMode parse_ablation_mode(const std::string& name) {
  for (auto m : {AblationMode::L2_ONLY, AblationMode::GAN_ONLY, AblationMode::SDS_L2, AblationMode::SDS_GAN})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown ablation mode '" + name + "' (expected L2_ONLY, GAN_ONLY, SDS_L2 or SDS_GAN)");
}

LossWeights apply_ablation(LossWeights w, AblationMode mode) {
  switch (mode) {
    case AblationMode::L2_ONLY:
      w.sds = 0.0;
      w.gan0 = 0.0;
      break;
    case AblationMode::GAN_ONLY:
      w.sds = 0.0;
      w.l2 = 0.0;
      break;
    case AblationMode::SDS_L2:
      w.gan0 = 0.0;
      break;
    case AblationMode::SDS_GAN:
      w.l2 = 0.0;
      break;
  }
  return w;
}

void CoarseConfig::validate(const NoiseSchedule& schedule) const {
  require(steps >= 0, "coarse steps must be >= 0");
  require(lr > 0.0, "coarse lr must be positive");
  require(field_resolution >= 8, "field resolution must be >= 8");
  settings.validate();
  sds.validate(schedule);
  poses.validate();
}

void RefineConfig::validate(const NoiseSchedule& schedule) const {
  require(total_steps >= 0, "total_steps must be >= 0");
  require(disc_steps_per_gen_step >= 0, "disc_steps_per_gen_step must be >= 0");
  require(field_lr > 0.0 && disc_lr > 0.0, "learning rates must be positive");
  require(batch_size >= 1, "batch_size must be >= 1");
  settings.validate();
  sds.validate(schedule);
  sds_poses.validate();
  disc.validate();
  require(disc.image_size == settings.image_size, "discriminator image_size must equal the render size");
}

std::vector<std::string> loss_columns() {
  std::vector<std::string> cols{"step", "sds", "g_loss", "d_loss", "r1", "lambda", "l2"};
  for (const auto& n : regularizer_names()) cols.push_back(n);
  cols.push_back("total");
  return cols;
}

std::string loss_csv_row(const LossRecord& r) {
  std::ostringstream os;
  auto num = [&](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    os << buf;
  };
  os << r.step;
  for (double v : {r.sds, r.g_loss, r.d_loss, r.r1, r.lambda, r.l2}) num(v);
  for (const auto& n : regularizer_names()) {
    const auto it = r.reg.find(n);
    num(it == r.reg.end() ? 0.0 : it->second);
  }
  num(r.total);
  return os.str();
}

namespace {

constexpr std::uint64_t kSdsPoseStream = 0x5d5a0001, kSdsNoiseStream = 0x5d5a0002, kGenStream = 0x6e6a0003,
                        kDiscStream = 0xd15c0004, kDiscInit = 0xd15c0005;

std::string fresh_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(mix64(seed ^ stream)).state(); }

bool any_positive(const std::map<std::string, double>& weights) {
  return std::any_of(weights.begin(), weights.end(), [](const auto& kv) { return kv.second > 0.0; });
}

RenderSettings view_settings(RenderSettings s, const std::map<std::string, double>& reg) {
  const auto it = reg.find("orientation");
  s.compute_normal = it != reg.end() && it->second > 0.0;
  return s;
}

bool finite_vector(const VectorX<float>& v) { return v.allFinite(); }

[[noreturn]] void diverged(const std::string& where, int step, const std::vector<LossRecord>& trace, const LossRecord& now) {
  std::string msg = where + ": non-finite loss or gradient at step " + std::to_string(step) + "\n";
  std::string header;
  for (const auto& c : loss_columns()) header += (header.empty() ? "" : ",") + c;
  msg += header + "\n";
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  for (std::size_t i = from; i < trace.size(); ++i) msg += loss_csv_row(trace[i]) + "\n";
  msg += loss_csv_row(now);
  throw DivergenceError(msg);
}

// One SDS draw on a sampled pose: adds the weighted SDS image gradient (and the
// regularisers on the same view) into `vg` and returns the rendered view.
RenderedView<float> sds_view(const Fieldf& field, PoseSampler& sampler, Rng& noise, const Denoiserf& prior,
                             const NoiseSchedule& schedule, const SdsConfig& sds, const RenderSettings& settings, int label,
                             const LossWeights& weights, bool add_sds, bool add_reg, LossRecord& record,
                             ViewGradient<float>& vg) {
  const CameraPose pose = sampler.next();
  RenderedView<float> view = render(field, pose, view_settings(settings, weights.reg));
  const int t = sds.t_min + static_cast<int>(noise.below(std::uint64_t(sds.t_max - sds.t_min + 1)));
  const Image<float> eps = gaussian_like<float>(3, view.rgb.height, view.rgb.width, noise);
  const Image<float> r = sds_residual(prior, schedule, view.rgb, label, t, eps, sds);
  record.sds = double(r.planes.squaredNorm()) / double(r.planes.size());
  if (add_sds) vg += sds_view_gradient(r, float(weights.sds));
  if (!weights.reg.empty()) {
    ViewGradient<float> reg_grad;
    const auto report = regularization_losses(view, weights.reg, &reg_grad);
    record.reg = report.terms;
    record.total += report.total;
    if (add_reg) vg += reg_grad;
  }
  return view;
}

}  // namespace

Fieldf train_coarse(const Denoiserf& prior, const NoiseSchedule& schedule, const CoarseConfig& config,
                    const LossWeights& weights, Fieldf init, std::vector<LossRecord>* trace) {
  config.validate(schedule);
  weights.validate();
  prior.check_label(config.prompt_label);
  require(config.settings.image_size == prior.config().image_size, "coarse render size must equal the prior image size");
  init.validate();
  PoseSampler sampler(mix64(config.seed ^ kSdsPoseStream), config.poses);
  Rng noise(mix64(config.seed ^ kSdsNoiseStream));
  nn::Adam<float> opt;
  opt.lr = config.lr;
  opt.reset(init.parameter_count());
  std::vector<LossRecord> local;
  std::vector<LossRecord>& records = trace ? *trace : local;
  for (int step = 0; step < config.steps; ++step) {
    LossRecord rec;
    rec.step = step;
    ViewGradient<float> vg;
    VectorX<float> grad = VectorX<float>::Zero(init.parameter_count());
    if (weights.sds > 0.0 || any_positive(weights.reg)) {
      const auto view = sds_view(init, sampler, noise, prior, schedule, config.sds, config.settings, config.prompt_label,
                                 weights, weights.sds > 0.0, true, rec, vg);
      grad = render_backward(init, view.pose, view.settings, vg);
    }
    if (!finite_vector(grad) || !std::isfinite(rec.total) || !std::isfinite(rec.sds)) diverged("train_coarse", step, records, rec);
    opt.update(init.params, grad);
    records.push_back(rec);
  }
  return init;
}

Fieldf train_coarse(const Denoiserf& prior, const NoiseSchedule& schedule, const CoarseConfig& config,
                    const LossWeights& weights, std::vector<LossRecord>* trace) {
  config.validate(schedule);
  return train_coarse(prior, schedule, config, weights,
                      init_field<float>(config.field_resolution, Fieldf::Box(Eigen::Vector3f::Constant(-1.0f), Eigen::Vector3f::Constant(1.0f)),
                                        config.seed, config.init),
                      trace);
}

bool TrainState::operator==(const TrainState& o) const {
  return step == o.step && disc_updates == o.disc_updates && field == o.field && disc.config() == o.disc.config() &&
         disc.params.size() == o.disc.params.size() && disc.params == o.disc.params && field_opt == o.field_opt &&
         disc_opt == o.disc_opt && sds_pose_rng == o.sds_pose_rng && sds_noise_rng == o.sds_noise_rng &&
         gen_rng == o.gen_rng && disc_rng == o.disc_rng && losses == o.losses;
}

TrainState make_train_state(const Fieldf& field, const RefineConfig& config) {
  field.validate();
  config.disc.validate();
  TrainState s;
  s.field = field;
  s.disc = Discriminatorf(config.disc, mix64(config.seed ^ kDiscInit));
  s.field_opt.lr = config.field_lr;
  s.field_opt.reset(field.parameter_count());
  s.disc_opt.lr = config.disc_lr;
  s.disc_opt.reset(s.disc.parameter_count());
  s.sds_pose_rng = fresh_rng(config.seed, kSdsPoseStream);
  s.sds_noise_rng = fresh_rng(config.seed, kSdsNoiseStream);
  s.gen_rng = fresh_rng(config.seed, kGenStream);
  s.disc_rng = fresh_rng(config.seed, kDiscStream);
  return s;
}

namespace {

void check_dataset(const PosedDataset& dataset, const RenderSettings& settings) {
  if (dataset.entries.empty()) throw ConfigError("dataset is empty");
  if (dataset.images.size() != dataset.entries.size()) throw ConfigError("dataset images are not loaded");
  dataset.validate();
  const auto& im = dataset.images.front();
  if (im.height != settings.image_size || im.width != settings.image_size)
    throw ShapeError("dataset images are " + std::to_string(im.width) + "x" + std::to_string(im.height) +
                     ", render size is " + std::to_string(settings.image_size));
}

}  // namespace

DiscBatchPlan plan_disc_batch(Rng& rng, const PosedDataset& dataset, int batch) {
  DiscBatchPlan plan;
  for (int b = 0; b < batch; ++b) plan.real_entries.push_back(static_cast<std::size_t>(rng.below(dataset.entries.size())));
  for (int b = 0; b < batch; ++b) plan.fake_views.push_back(static_cast<int>(rng.below(dataset.rig.poses.size())));
  return plan;
}

void discriminator_update(TrainState& state, const PosedDataset& dataset, const RefineConfig& config, LossRecord& record) {
  Rng rng;
  rng.set_state(state.disc_rng);
  const int batch = config.batch_size;
  const auto& dc = state.disc.config();
  const bool do_r1 = dc.r1_gamma > 0.0 && state.disc_updates % dc.r1_interval == 0;
  VectorX<float> grad = VectorX<float>::Zero(state.disc.parameter_count());
  VectorX<float> unit_grad;
  Discriminatorf::Tape tape;
  std::vector<double> real_logits, fake_logits;
  double r1 = 0.0;
  const DiscBatchPlan plan = plan_disc_batch(rng, dataset, batch);
  for (int b = 0; b < batch; ++b) {
    const std::size_t idx = plan.real_entries[b];
    const auto& entry = dataset.entries[idx];
    const PoseAngles angles = angles_of(dataset.rig.poses.at(entry.view_id));
    const double logit = state.disc.forward(dataset.images[idx], angles, &tape);
    real_logits.push_back(logit);
    unit_grad.setZero(state.disc.parameter_count());
    const Image<float> input_grad = state.disc.backward(tape, 1.0f, &unit_grad, do_r1);
    grad += float(real_logit_grad(logit) / batch) * unit_grad;
    if (do_r1) {
      r1 += 0.5 * dc.r1_gamma * double(input_grad.planes.squaredNorm()) / batch;
      state.disc.r1_param_gradient(tape, input_grad, float(dc.r1_gamma * dc.r1_interval / batch), grad);
    }
  }
  RenderSettings settings = config.settings;
  settings.compute_depth = false;
  settings.compute_normal = false;
  for (int b = 0; b < batch; ++b) {
    const CameraPose& pose = dataset.rig.poses[plan.fake_views[b]];
    const auto view = render(state.field, pose, settings);
    const double logit = state.disc.forward(view.rgb, angles_of(pose), &tape);
    fake_logits.push_back(logit);
    state.disc.backward(tape, float(fake_logit_grad(logit) / batch), &grad, false);
  }
  const GanLosses losses = gan_losses(real_logits, fake_logits);
  if (!std::isfinite(losses.d_loss) || !grad.allFinite()) {
    record.d_loss = losses.d_loss;
    diverged("discriminator_update", state.step, state.losses, record);
  }
  record.d_loss += losses.d_loss / std::max(1, config.disc_steps_per_gen_step);
  if (do_r1) record.r1 = r1;
  state.disc_opt.update(state.disc.params, grad);
  ++state.disc_updates;
  state.disc_rng = rng.state();
}

VectorX<float> generator_gradient(TrainState& state, const PosedDataset& dataset, const Denoiserf& prior,
                                  const NoiseSchedule& schedule, const RefineConfig& config, const LossWeights& weights,
                                  LossRecord& record, TermMask mask) {
  const double lambda = config.total_steps > 0 ? loss_weight_schedule(state.step, config.total_steps, weights.gan0, weights.decay) : 0.0;
  record.lambda = lambda;
  VectorX<float> grad = VectorX<float>::Zero(state.field.parameter_count());
  const bool regs = any_positive(weights.reg);

  if (weights.sds > 0.0) {
    PoseSampler sampler(0, config.sds_poses);
    sampler.rng().set_state(state.sds_pose_rng);
    Rng noise;
    noise.set_state(state.sds_noise_rng);
    ViewGradient<float> vg;
    const auto view = sds_view(state.field, sampler, noise, prior, schedule, config.sds, config.settings,
                               config.prompt_label, weights, mask.sds, mask.reg, record, vg);
    if (vg.rgb.size() || vg.alpha.size() || vg.orientation.size()) grad += render_backward(state.field, view.pose, view.settings, vg);
    state.sds_pose_rng = sampler.rng().state();
    state.sds_noise_rng = noise.state();
  }

  const bool reg_on_rig = regs && weights.sds <= 0.0;
  if (lambda > 0.0 || weights.l2 > 0.0 || reg_on_rig) {
    Rng rng;
    rng.set_state(state.gen_rng);
    const int v = static_cast<int>(rng.below(dataset.rig.poses.size()));
    state.gen_rng = rng.state();
    const CameraPose& pose = dataset.rig.poses[v];
    const auto view = render(state.field, pose, view_settings(config.settings, weights.reg));
    ViewGradient<float> vg;
    if (lambda > 0.0) {
      Discriminatorf::Tape tape;
      const double logit = state.disc.forward(view.rgb, angles_of(pose), &tape);
      record.g_loss = stable_softplus(-logit);
      record.total += lambda * record.g_loss;
      if (mask.gan) {
        const float upstream = float(lambda * -sigmoid(-logit));
        vg.rgb = state.disc.backward(tape, upstream, nullptr, true).planes;
      }
    }
    if (weights.l2 > 0.0) {
      const Image<float> mean = view_mean(dataset, v);
      const MatrixR<float> diff = view.rgb.planes - mean.planes;
      const double n = double(diff.size());
      record.l2 = double(diff.squaredNorm()) / n;
      record.total += weights.l2 * record.l2;
      if (mask.l2) {
        ViewGradient<float> g;
        g.rgb = float(2.0 * weights.l2 / n) * diff;
        vg += g;
      }
    }
    if (reg_on_rig) {
      ViewGradient<float> reg_grad;
      const auto report = regularization_losses(view, weights.reg, &reg_grad);
      record.reg = report.terms;
      record.total += report.total;
      if (mask.reg) vg += reg_grad;
    }
    if (vg.rgb.size() || vg.alpha.size() || vg.orientation.size()) grad += render_backward(state.field, pose, view.settings, vg);
  }
  return grad;
}

namespace {

void write_losses(const fs::path& run_dir, const std::vector<LossRecord>& losses) {
  std::string text;
  for (const auto& c : loss_columns()) text += (text.empty() ? "" : ",") + c;
  text += "\n";
  for (const auto& r : losses) text += loss_csv_row(r) + "\n";
  io::write_text_atomic(run_dir / "losses.csv", text);
}

void write_turntable(const fs::path& run_dir, const Fieldf& field, const RenderSettings& settings, int step) {
  io::write_png(run_dir / "renders" / ("step_" + std::to_string(step) + ".png"), turntable(field, settings));
}

}  // namespace

TrainState refine(TrainState state, const PosedDataset& dataset, const Denoiserf& prior, const NoiseSchedule& schedule,
                  const RefineConfig& config, const LossWeights& raw_weights, const RefineRun& run) {
  config.validate(schedule);
  raw_weights.validate();
  check_dataset(dataset, config.settings);
  const LossWeights weights = apply_ablation(raw_weights, config.ablation_mode);
  if (weights.sds > 0.0) {
    prior.check_label(config.prompt_label);
    require(prior.config().image_size == config.settings.image_size, "prior image size must equal the render size");
  }
  require(state.field.parameter_count() > 0, "refine needs an initialised field");
  const bool train_disc = weights.gan0 > 0.0;
  if (train_disc && !(state.disc.config() == config.disc)) throw ConfigError("train state discriminator does not match config");

  while (state.step < config.total_steps && (run.stop_after < 0 || state.step < run.stop_after)) {
    LossRecord rec;
    rec.step = state.step;
    if (train_disc)
      for (int k = 0; k < config.disc_steps_per_gen_step; ++k) discriminator_update(state, dataset, config, rec);
    const VectorX<float> grad = generator_gradient(state, dataset, prior, schedule, config, weights, rec);
    if (!grad.allFinite() || !std::isfinite(rec.total) || !std::isfinite(rec.sds)) diverged("refine", state.step, state.losses, rec);
    state.field_opt.update(state.field.params, grad);
    state.losses.push_back(rec);
    ++state.step;
    if (!run.run_dir.empty()) {
      if (run.checkpoint_every > 0 && state.step % run.checkpoint_every == 0) {
        save_state(run.run_dir / "state.ckpt", state);
        write_losses(run.run_dir, state.losses);
      }
      if (run.render_every > 0 && state.step % run.render_every == 0) write_turntable(run.run_dir, state.field, config.settings, state.step);
    }
  }
  if (!run.run_dir.empty()) {
    fs::create_directories(run.run_dir / "renders");
    save_state(run.run_dir / "state.ckpt", state);
    write_losses(run.run_dir, state.losses);
    write_turntable(run.run_dir, state.field, config.settings, state.step);
  }
  return state;
}

Image<float> view_mean(const PosedDataset& dataset, int view_id) {
  if (dataset.images.size() != dataset.entries.size()) throw ConfigError("view_mean: dataset images are not loaded");
  Image<float> sum;
  int count = 0;
  for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
    if (dataset.entries[i].view_id != view_id) continue;
    if (count == 0)
      sum = dataset.images[i];
    else {
      require_same_shape(sum, dataset.images[i], "view_mean");
      sum.planes += dataset.images[i].planes;
    }
    ++count;
  }
  if (count == 0) throw ConfigError("view_mean: view " + std::to_string(view_id) + " is not in the dataset");
  if (count > 1) sum.planes /= float(count);
  return sum;
}

Fieldf l2_fit(Fieldf field, const PosedDataset& dataset, int steps, double lr, const RenderSettings& settings,
              std::vector<double>* loss_trace) {
  check_dataset(dataset, settings);
  require(steps >= 0, "l2_fit: steps must be >= 0");
  require(lr > 0.0, "l2_fit: lr must be positive");
  const int n_views = dataset.rig.n_views();
  std::vector<Image<float>> means(n_views);
  for (int v = 0; v < n_views; ++v) means[v] = view_mean(dataset, v);
  nn::Adam<float> opt;
  opt.lr = lr;
  opt.reset(field.parameter_count());
  RenderSettings s = settings;
  s.compute_normal = false;
  for (int step = 0; step < steps; ++step) {
    const int v = step % n_views;
    const CameraPose& pose = dataset.rig.poses[v];
    const auto view = render(field, pose, s);
    const MatrixR<float> diff = view.rgb.planes - means[v].planes;
    const double n = double(diff.size());
    if (loss_trace) {
      double loss = 0.0;
      for (int i : dataset.entries_of_view(v)) loss += double((view.rgb.planes - dataset.images[i].planes).squaredNorm()) / n;
      loss_trace->push_back(loss / double(dataset.entries_of_view(v).size()));
    }
    ViewGradient<float> g;
    g.rgb = float(2.0 / n) * diff;
    const VectorX<float> grad = render_backward(field, pose, s, g);
    if (!grad.allFinite()) throw DivergenceError("l2_fit: non-finite gradient at step " + std::to_string(step));
    opt.update(field.params, grad);
  }
  return field;
}

Image<float> turntable(const Fieldf& field, const RenderSettings& settings, double elevation, int views, double radius) {
  require(views >= 1, "turntable needs at least one view");
  RenderSettings s = settings;
  s.compute_depth = false;
  s.compute_normal = false;
  std::vector<Image<float>> frames(views);
  parallel_for(views, [&](Index k) {
    CameraPose pose;
    pose.azimuth = 2.0 * M_PI * double(k) / views;
    pose.elevation = elevation;
    pose.radius = radius;
    frames[k] = render(field, pose, s).rgb;
  });
  return io::hstack(frames);
}

namespace {

void put_adam(io::Writer& w, const nn::Adam<float>& a) {
  w.put<double>(a.lr);
  w.put<double>(a.beta1);
  w.put<double>(a.beta2);
  w.put<double>(a.eps);
  w.put<std::int64_t>(a.step);
  w.put_array(a.m.data(), std::size_t(a.m.size()));
  w.put_array(a.v.data(), std::size_t(a.v.size()));
}

nn::Adam<float> get_adam(io::Reader& r) {
  nn::Adam<float> a;
  a.lr = r.get<double>();
  a.beta1 = r.get<double>();
  a.beta2 = r.get<double>();
  a.eps = r.get<double>();
  a.step = r.get<std::int64_t>();
  const auto m = r.get_array<float>();
  const auto v = r.get_array<float>();
  if (m.size() != v.size()) throw CorruptionError("state checkpoint: optimizer moment sizes differ");
  a.m = Eigen::Map<const VectorX<float>>(m.data(), Index(m.size()));
  a.v = Eigen::Map<const VectorX<float>>(v.data(), Index(v.size()));
  return a;
}

}  // namespace

void save_state(const fs::path& path, const TrainState& state) {
  io::Writer w;
  w.put<std::int32_t>(state.step);
  w.put<std::int32_t>(state.disc_updates);
  write_field(w, state.field);
  const auto& dc = state.disc.config();
  w.put<std::int32_t>(dc.image_size);
  w.put<std::int32_t>(dc.base_channels);
  w.put<std::int32_t>(dc.n_blocks);
  w.put<std::uint8_t>(dc.pose_conditioning ? 1 : 0);
  w.put<double>(dc.r1_gamma);
  w.put<std::int32_t>(dc.r1_interval);
  w.put<double>(dc.leak);
  w.put_array(state.disc.params.data(), std::size_t(state.disc.params.size()));
  put_adam(w, state.field_opt);
  put_adam(w, state.disc_opt);
  for (const auto* s : {&state.sds_pose_rng, &state.sds_noise_rng, &state.gen_rng, &state.disc_rng}) w.put_string(*s);
  w.put<std::uint64_t>(state.losses.size());
  for (const auto& r : state.losses) {
    w.put<std::int32_t>(r.step);
    for (double v : {r.sds, r.g_loss, r.d_loss, r.r1, r.lambda, r.l2, r.total}) w.put<double>(v);
    w.put<std::uint32_t>(std::uint32_t(r.reg.size()));
    for (const auto& [name, v] : r.reg) {
      w.put_string(name);
      w.put<double>(v);
    }
  }
  io::write_container(path, "train_state", kStateFormatVersion, w.bytes());
}

TrainState load_state(const fs::path& path) {
  io::Reader r(io::read_container(path, "train_state", kStateFormatVersion));
  TrainState s;
  s.step = r.get<std::int32_t>();
  s.disc_updates = r.get<std::int32_t>();
  s.field = read_field(r);
  DiscriminatorConfig dc;
  dc.image_size = r.get<std::int32_t>();
  dc.base_channels = r.get<std::int32_t>();
  dc.n_blocks = r.get<std::int32_t>();
  dc.pose_conditioning = r.get<std::uint8_t>() != 0;
  dc.r1_gamma = r.get<double>();
  dc.r1_interval = r.get<std::int32_t>();
  dc.leak = r.get<double>();
  try {
    s.disc = Discriminatorf(dc, 0);
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("state checkpoint: ") + e.what());
  }
  const auto params = r.get_array<float>();
  if (params.size() != std::size_t(s.disc.params.size())) throw CorruptionError("state checkpoint: discriminator size mismatch");
  std::copy(params.begin(), params.end(), s.disc.params.data());
  s.field_opt = get_adam(r);
  s.disc_opt = get_adam(r);
  for (auto* str : {&s.sds_pose_rng, &s.sds_noise_rng, &s.gen_rng, &s.disc_rng}) *str = r.get_string();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    LossRecord rec;
    rec.step = r.get<std::int32_t>();
    for (double* v : {&rec.sds, &rec.g_loss, &rec.d_loss, &rec.r1, &rec.lambda, &rec.l2, &rec.total}) *v = r.get<double>();
    const auto terms = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < terms; ++k) {
      std::string name = r.get_string();
      rec.reg[name] = r.get<double>();
    }
    s.losses.push_back(std::move(rec));
  }
  r.expect_end();
  return s;
}

}  // namespace sdsgan
