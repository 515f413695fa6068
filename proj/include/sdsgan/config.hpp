#pragma once

#include "sdsgan/enhancer.hpp"
#include "sdsgan/trainer.hpp"
#include "sdsgan/world.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sdsgan {

/// Flat "section.key" -> value store backed by an INI file. The key set is
/// fixed by the preset; setting an unknown key is a ConfigError.
class Config {
 public:
  static Config preset(const std::string& name);
  static std::vector<std::string> preset_names();

  void merge_file(const std::filesystem::path& path);
  void merge_ini(const std::string& text);
  void set(const std::string& key, const std::string& value);
  /// "section.key=value"
  void set_assignment(const std::string& assignment);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  int integer(const std::string& key) const;
  std::uint64_t unsigned_integer(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;

  std::string to_ini() const;
  void write_snapshot(const std::filesystem::path& path) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

RenderSettings render_settings(const Config& c);
NoiseSchedule noise_schedule(const Config& c);
RasterizeConfig rasterize_config(const Config& c);
PriorTrainConfig prior_train_config(const Config& c);
PoseDistribution pose_distribution(const Config& c);
PoseSet rig(const Config& c);
OracleWorld oracle_world(const Config& c, const Fieldf& ground_truth);
RemoteConfig remote_config(const Config& c);
GenerateOptions generate_options(const Config& c);
CoarseConfig coarse_config(const Config& c);
RefineConfig refine_config(const Config& c);
LossWeights loss_weights(const Config& c);
SdsConfig::Weighting parse_weighting(const std::string& name);

/// "3" means seeds 1..3; "4,9" lists seeds explicitly.
std::vector<std::uint64_t> parse_seeds(const std::string& text);
std::vector<AblationMode> parse_modes(const std::string& text);

/// Exclusive writer lock on a run directory (`.lock`, created with O_EXCL).
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct LockedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sdsgan
