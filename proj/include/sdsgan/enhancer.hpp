#pragma once

#include "sdsgan/camera.hpp"
#include "sdsgan/prior.hpp"
#include "sdsgan/scene.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>

namespace sdsgan {

/// Depth, normal and soft-edge maps with every value in [0,1].
struct ConditioningMaps {
  int height = 0;
  int width = 0;
  VectorX<float> depth;      // near is bright, background 0
  Image<float> normal;       // camera-space normal mapped (n + 1) / 2
  VectorX<float> soft_edge;  // Sobel luminance magnitude / max
  bool empty = false;        // view had no foreground

  Image<float> depth_image() const;
  Image<float> edge_image() const;
};

/// `alpha_threshold` selects the foreground used for depth normalisation and normals.
ConditioningMaps conditioning_maps(const RenderedView<float>& view, double alpha_threshold = 0.5);

struct Perturbation {
  double color_jitter_std = 0.1;
  double warp_max_px = 1.5;
  std::uint64_t per_sample_seed_base = 0;
};

struct OracleWorld {
  Fieldf ground_truth_field;
  Perturbation perturb;
  RenderSettings settings;

  void validate() const;
};

/// Ground-truth render with a seeded per-channel colour offset on the
/// foreground and a smooth displacement field bounded by warp_max_px.
Image<float> oracle_enhance(const OracleWorld& world, const CameraPose& pose, std::uint64_t sample_seed);

enum class ControlMode { depth, normal, softedge };
std::string to_string(ControlMode mode);
ControlMode parse_control_mode(const std::string& name);

struct EnhanceRequest {
  int view_id = 0;
  int sample_id = 0;
  CameraPose pose;
  const RenderedView<float>* coarse = nullptr;
  const ConditioningMaps* maps = nullptr;
  int prompt_label = 0;
  double strength = 0.5;
  std::uint64_t seed = 0;
};

class EnhanceBackend {
 public:
  virtual ~EnhanceBackend() = default;
  virtual std::string name() const = 0;
  virtual Image<float> enhance(const EnhanceRequest& request) = 0;
  // Concurrent enhance() calls allowed at once; 0 means one per hardware thread.
  virtual int max_in_flight() const { return 0; }
  // Extra header fields recorded in the manifest.
  virtual nlohmann::json describe() const { return nlohmann::json::object(); }
};

class ToyI2IBackend : public EnhanceBackend {
 public:
  ToyI2IBackend(const Denoiserf& prior, const NoiseSchedule& schedule, double guidance = 1.0)
      : prior_(prior), schedule_(schedule), guidance_(guidance) {}
  std::string name() const override { return "toy_i2i"; }
  Image<float> enhance(const EnhanceRequest& request) override;

 private:
  const Denoiserf& prior_;
  const NoiseSchedule& schedule_;
  double guidance_;
};

class OracleBackend : public EnhanceBackend {
 public:
  explicit OracleBackend(OracleWorld world) : world_(std::move(world)) { world_.validate(); }
  std::string name() const override { return "oracle"; }
  Image<float> enhance(const EnhanceRequest& request) override;
  nlohmann::json describe() const override;

 private:
  OracleWorld world_;
};

struct RemoteConfig {
  std::string host = "127.0.0.1";
  int port = 7860;
  std::string path = "/generate";
  ControlMode control_mode = ControlMode::depth;
  std::map<int, std::string> prompts;  // label -> prompt text
  int max_retries = 3;
  double timeout_s = 60.0;
  double backoff_s = 0.5;  // multiplied by the attempt number
  int max_in_flight = 4;

  void validate() const;
  std::string prompt_for(int label) const;
};

struct RemoteRequest {
  std::string prompt;
  ControlMode control_mode = ControlMode::depth;
  Image<float> conditioning;
  double strength = 0.5;
  std::uint64_t seed = 0;
};

/// JSON body of POST /generate (keys sorted, no whitespace).
std::string serialize_request(const RemoteRequest& request);
/// Decodes a response body; malformed payloads or a size mismatch raise ProtocolError.
Image<float> parse_response(const std::string& body, int width, int height);

/// Raised when a remote request still fails after the configured retries.
struct RemoteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RemoteResult {
  Image<float> image;
  int retries = 0;
};

/// One request with bounded retries on transport errors and non-200 statuses.
/// Protocol errors in a 200 response are not retried.
RemoteResult remote_enhance(const RemoteConfig& config, const RemoteRequest& request);

class RemoteBackend : public EnhanceBackend {
 public:
  explicit RemoteBackend(RemoteConfig config) : config_(std::move(config)) { config_.validate(); }
  std::string name() const override { return "remote"; }
  Image<float> enhance(const EnhanceRequest& request) override;
  int max_in_flight() const override { return config_.max_in_flight; }
  nlohmann::json describe() const override;

  // One JSON line per request: view, sample, seed, retries.
  std::vector<std::string> log_lines() const;

 private:
  RemoteConfig config_;
  mutable std::mutex mutex_;
  std::vector<std::pair<std::pair<int, int>, std::string>> log_;
};

struct DatasetEntry {
  std::string image_path;  // relative to the dataset root
  int view_id = 0;
  int sample_id = 0;
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 0.0;
  double fov = 0.0;
  std::string backend;
  std::uint64_t seed = 0;

  CameraPose pose(const Eigen::Vector3d& look_at = Eigen::Vector3d::Zero()) const;
  bool operator==(const DatasetEntry&) const = default;
};

void to_json(nlohmann::json& j, const DatasetEntry& e);
void from_json(const nlohmann::json& j, DatasetEntry& e);

constexpr int kManifestSchemaVersion = 1;

struct PosedDataset {
  std::filesystem::path root;
  int prompt_label = 0;
  std::string backend;
  PoseSet rig;
  nlohmann::json header;  // full manifest header
  std::vector<DatasetEntry> entries;
  std::vector<Image<float>> images;  // aligned with entries when loaded

  std::vector<int> entries_of_view(int view_id) const;
  void validate() const;
};

std::uint64_t entry_seed(std::uint64_t seed, int view_id, int sample_id);

struct GenerateOptions {
  int prompt_label = 0;
  double strength = 0.5;
  std::uint64_t seed = 0;
  RenderSettings settings;
  double alpha_threshold = 0.5;
  std::vector<std::string> sidecars;  // extra files in the root listed by the manifest
};

/// Renders the rig, writes coarse renders and conditioning maps, enhances each
/// (view, sample) with `backend`, then writes the manifest atomically.
PosedDataset generate_dataset(const Fieldf& field, const PoseSet& rig, EnhanceBackend& backend,
                              const GenerateOptions& options, const std::filesystem::path& root);

PosedDataset load_dataset(const std::filesystem::path& root, bool load_images = true);

/// Relative paths of every file a manifest references, header files included.
std::vector<std::string> referenced_files(const PosedDataset& dataset);

}  // namespace sdsgan
