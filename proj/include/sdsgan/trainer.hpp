#pragma once

#include "sdsgan/camera.hpp"
#include "sdsgan/enhancer.hpp"
#include "sdsgan/gan.hpp"
#include "sdsgan/nn.hpp"
#include "sdsgan/prior.hpp"
#include "sdsgan/scene.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sdsgan {

struct LossWeights {
  double sds = 1.0;
  double gan0 = 0.05;  // initial discrimination weight
  double l2 = 1.0;
  std::map<std::string, double> reg;
  std::string decay = "linear";

  void validate() const;
};

/// lambda0 * (1 - step / total_steps) for the linear decay.
double loss_weight_schedule(int step, int total_steps, double lambda0, const std::string& decay = "linear");

enum class AblationMode { L2_ONLY, GAN_ONLY, SDS_L2, SDS_GAN };
std::string to_string(AblationMode mode);
AblationMode parse_ablation_mode(const std::string& name);
/// Zeroes the terms a mode excludes.
LossWeights apply_ablation(LossWeights weights, AblationMode mode);

struct CoarseConfig {
  int steps = 2000;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  int prompt_label = 0;
  int field_resolution = 32;
  InitBlob init;
  RenderSettings settings;
  SdsConfig sds;
  PoseDistribution poses;

  void validate(const NoiseSchedule& schedule) const;
};

struct LossRecord {
  int step = 0;
  double sds = 0.0;     // weighted mean squared SDS residual
  double g_loss = 0.0;  // softplus(-D(fake)) on the generator view
  double d_loss = 0.0;
  double r1 = 0.0;
  double lambda = 0.0;
  double l2 = 0.0;
  std::map<std::string, double> reg;
  double total = 0.0;  // lambda * g_loss + l2 weight * l2 + regularisers (SDS has no scalar value)

  bool operator==(const LossRecord&) const = default;
};

/// Fixed `losses.csv` column order.
std::vector<std::string> loss_columns();
std::string loss_csv_row(const LossRecord& record);

/// SDS-only optimisation from `init`; `trace` receives one record per step.
Fieldf train_coarse(const Denoiserf& prior, const NoiseSchedule& schedule, const CoarseConfig& config,
                    const LossWeights& weights, Fieldf init, std::vector<LossRecord>* trace = nullptr);
/// Same, starting from init_field(config.field_resolution, ..., config.seed, config.init).
Fieldf train_coarse(const Denoiserf& prior, const NoiseSchedule& schedule, const CoarseConfig& config,
                    const LossWeights& weights, std::vector<LossRecord>* trace = nullptr);

struct RefineConfig {
  int total_steps = 2000;
  int disc_steps_per_gen_step = 1;
  double field_lr = 1e-2;
  double disc_lr = 2e-3;
  std::uint64_t seed = 0;
  AblationMode ablation_mode = AblationMode::SDS_GAN;
  int batch_size = 1;  // real and fake images per discriminator update
  int prompt_label = 0;
  RenderSettings settings;
  SdsConfig sds;
  PoseDistribution sds_poses;
  DiscriminatorConfig disc;

  void validate(const NoiseSchedule& schedule) const;
};

struct TrainState {
  int step = 0;
  int disc_updates = 0;
  Fieldf field;
  Discriminatorf disc;
  nn::Adam<float> field_opt;
  nn::Adam<float> disc_opt;
  // serialized engine states of the four random streams
  std::string sds_pose_rng, sds_noise_rng, gen_rng, disc_rng;
  std::vector<LossRecord> losses;

  bool operator==(const TrainState& o) const;
};

/// Fresh state: discriminator and random streams seeded from cfg.seed.
TrainState make_train_state(const Fieldf& field, const RefineConfig& config);

/// Optional run-directory side effects and an early stop used for resumption.
struct RefineRun {
  std::filesystem::path run_dir;  // empty: no files written
  int stop_after = -1;            // stop once state.step reaches this value
  int checkpoint_every = 0;       // 0: final checkpoint only
  int render_every = 0;           // 0: final turntable only
};

/// Which gradient terms to accumulate. Sampling is driven by the weights alone,
/// so masks change only what is summed.
struct TermMask {
  bool sds = true, gan = true, l2 = true, reg = true;
};

/// Real dataset entries and fake rig views for one discriminator batch, both uniform.
struct DiscBatchPlan {
  std::vector<std::size_t> real_entries;
  std::vector<int> fake_views;
};
DiscBatchPlan plan_disc_batch(Rng& rng, const PosedDataset& dataset, int batch);

/// One discriminator update (d_loss + lazy R1) on real dataset images and fresh fake renders.
void discriminator_update(TrainState& state, const PosedDataset& dataset, const RefineConfig& config, LossRecord& record);

/// Field gradient of one generator step at the current state; advances the random streams.
VectorX<float> generator_gradient(TrainState& state, const PosedDataset& dataset, const Denoiserf& prior,
                                  const NoiseSchedule& schedule, const RefineConfig& config, const LossWeights& weights,
                                  LossRecord& record, TermMask mask = {});

TrainState refine(TrainState state, const PosedDataset& dataset, const Denoiserf& prior, const NoiseSchedule& schedule,
                  const RefineConfig& config, const LossWeights& weights, const RefineRun& run = {});

/// Minimises the per-view mean squared error to the dataset images, one view per step in order.
/// `loss_trace` receives the loss before each step.
Fieldf l2_fit(Fieldf field, const PosedDataset& dataset, int steps, double lr, const RenderSettings& settings,
              std::vector<double>* loss_trace = nullptr);

/// Pixelwise mean of every image of one view.
Image<float> view_mean(const PosedDataset& dataset, int view_id);

/// Eight renders at evenly spaced azimuths side by side.
Image<float> turntable(const Fieldf& field, const RenderSettings& settings, double elevation = 0.3, int views = 8,
                       double radius = 3.0);

constexpr std::uint32_t kStateFormatVersion = 1;
void save_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_state(const std::filesystem::path& path);

}  // namespace sdsgan
