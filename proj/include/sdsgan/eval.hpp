#pragma once

#include "sdsgan/enhancer.hpp"
#include "sdsgan/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace sdsgan {

constexpr double kPsnrCap = 99.0;

double mse(const Image<float>& a, const Image<float>& b);
/// 10 log10(1 / MSE), capped at 99 dB when MSE < 1e-10.
double psnr(const Image<float>& a, const Image<float>& b);
/// Mean absolute 4-neighbour Laplacian of (image - reference), borders clamped.
double hf_residual(const Image<float>& image, const Image<float>& reference);

struct MetricReport {
  std::string run_id;
  std::string mode;
  std::uint64_t seed = 0;
  std::vector<double> psnr_per_view;
  double psnr_mean = 0.0;
  double mean_proximity = 0.0;  // sum_v |render - view mean| / sum_v |render - ground truth|
  double hf_residual = 0.0;     // mean over views
  nlohmann::json loss_summary = nlohmann::json::object();

  void validate() const;
  nlohmann::json to_json() const;
};

/// Renders `field` at every rig view and compares with ground-truth renders and view means.
MetricReport evaluate(const Fieldf& field, const Fieldf& ground_truth, const PosedDataset& dataset,
                      const RenderSettings& settings, const std::vector<LossRecord>* losses = nullptr);

/// Final value and mean of each loss column over the last `tail` records.
nlohmann::json summarize_losses(const std::vector<LossRecord>& losses, int tail = 100);

/// Everything an ablation sweep shares across modes and seeds.
struct AblationContext {
  Fieldf ground_truth;
  Fieldf coarse;
  Denoiserf prior;
  NoiseSchedule schedule;
  OracleWorld oracle;
  PoseSet rig;
  GenerateOptions generate;
  RefineConfig refine;
  LossWeights weights;
  std::filesystem::path root;  // datasets and run directories go below
  bool write_runs = false;     // write state/losses/renders per run
};

/// For each seed: an oracle dataset generated with that seed, then one refine
/// run per mode from the coarse field with refine seed = seed.
std::vector<MetricReport> run_ablation(const AblationContext& context, const std::vector<AblationMode>& modes,
                                       const std::vector<std::uint64_t>& seeds);

struct ModeSummary {
  std::string mode;
  int runs = 0;
  double psnr_mean = 0.0;
  double mean_proximity = 0.0;
  double hf_residual = 0.0;
};

std::vector<ModeSummary> summarize_modes(const std::vector<MetricReport>& reports);
std::string format_table(const std::vector<ModeSummary>& summary);
nlohmann::json ablation_json(const std::vector<MetricReport>& reports);

}  // namespace sdsgan
