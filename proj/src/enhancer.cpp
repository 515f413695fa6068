#include "sdsgan/enhancer.hpp"

#include "sdsgan/io.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <thread>

namespace sdsgan {

namespace fs = std::filesystem;
using nlohmann::json;

Image<float> ConditioningMaps::depth_image() const { return io::grey_to_rgb(depth, height, width); }
Image<float> ConditioningMaps::edge_image() const { return io::grey_to_rgb(soft_edge, height, width); }

ConditioningMaps conditioning_maps(const RenderedView<float>& view, double alpha_threshold) {
  const int h = view.rgb.height, w = view.rgb.width;
  const Index n = view.rgb.pixels();
  if (view.depth.size() != n) throw ConfigError("conditioning_maps: view has no depth");
  if (view.alpha.size() != n) throw ShapeError("conditioning_maps: alpha size mismatch");
  ConditioningMaps maps;
  maps.height = h;
  maps.width = w;
  maps.depth = VectorX<float>::Zero(n);
  maps.normal = Image<float>(3, h, w);
  maps.soft_edge = VectorX<float>::Zero(n);

  std::vector<char> mask(n);
  double dmin = 1e300, dmax = -1e300;
  for (Index i = 0; i < n; ++i) {
    mask[i] = view.alpha[i] > alpha_threshold;
    if (mask[i]) {
      dmin = std::min(dmin, double(view.depth[i]));
      dmax = std::max(dmax, double(view.depth[i]));
    }
  }
  maps.empty = std::none_of(mask.begin(), mask.end(), [](char m) { return m; });

  // soft edge: Sobel magnitude of luminance over the whole frame
  VectorX<double> lum(n);
  for (Index i = 0; i < n; ++i)
    lum[i] = 0.299 * view.rgb.planes(0, i) + 0.587 * view.rgb.planes(1, i) + 0.114 * view.rgb.planes(2, i);
  auto L = [&](int y, int x) { return lum[Index(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)]; };
  VectorX<double> mag(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1)) - (L(y - 1, x - 1) + 2 * L(y, x - 1) + L(y + 1, x - 1));
      const double gy = (L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1)) - (L(y - 1, x - 1) + 2 * L(y - 1, x) + L(y - 1, x + 1));
      mag[Index(y) * w + x] = std::hypot(gx, gy);
    }
  const double peak = mag.maxCoeff();
  if (peak > 1e-12) maps.soft_edge = (mag / peak).cast<float>();
  if (maps.empty) return maps;

  for (Index i = 0; i < n; ++i)
    if (mask[i]) maps.depth[i] = dmax > dmin ? float((dmax - view.depth[i]) / (dmax - dmin)) : 1.0f;

  // normals from back-projected depth, expressed in camera space
  const Eigen::Matrix3d rot = view.pose.rotation();
  std::vector<Eigen::Vector3d> points(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Index i = Index(y) * w + x;
      points[i] = double(view.depth[i]) * (rot.transpose() * view.pose.ray_direction(x, y, w));
    }
  auto derivative = [&](int y, int x, int dy, int dx, Eigen::Vector3d& out) {
    const int ya = y - dy, xa = x - dx, yb = y + dy, xb = x + dx;
    const bool a = ya >= 0 && xa >= 0 && ya < h && xa < w && mask[Index(ya) * w + xa];
    const bool b = yb >= 0 && xb >= 0 && yb < h && xb < w && mask[Index(yb) * w + xb];
    const Eigen::Vector3d& c = points[Index(y) * w + x];
    if (a && b)
      out = 0.5 * (points[Index(yb) * w + xb] - points[Index(ya) * w + xa]);
    else if (b)
      out = points[Index(yb) * w + xb] - c;
    else if (a)
      out = c - points[Index(ya) * w + xa];
    else
      return false;
    return true;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Index i = Index(y) * w + x;
      if (!mask[i]) continue;
      Eigen::Vector3d du, dv, nrm(0.0, 0.0, 1.0);
      if (derivative(y, x, 0, 1, du) && derivative(y, x, 1, 0, dv)) {
        const Eigen::Vector3d c = dv.cross(du);
        if (c.norm() > 1e-12) nrm = c.normalized();
        if (nrm.z() < 0.0) nrm = -nrm;
      }
      for (int k = 0; k < 3; ++k) maps.normal.planes(k, i) = float(0.5 * (nrm[k] + 1.0));
    }
  return maps;
}

void OracleWorld::validate() const {
  ground_truth_field.validate();
  settings.validate();
  require(std::isfinite(perturb.color_jitter_std) && perturb.color_jitter_std >= 0.0, "oracle: color_jitter_std must be >= 0");
  require(std::isfinite(perturb.warp_max_px) && perturb.warp_max_px >= 0.0, "oracle: warp_max_px must be >= 0");
}

namespace {

struct Wave {
  double fx, fy, phase, amplitude;
};

// Two-component sinusoidal displacement with |d| <= max_px.
std::vector<Wave> draw_waves(Rng& rng, double max_px) {
  std::vector<Wave> waves(2);
  double total = 0.0;
  for (auto& wv : waves) {
    const double angle = rng.uniform(0.0, 2.0 * M_PI), freq = rng.uniform(0.5, 2.0);
    wv = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.2, 1.0)};
    total += wv.amplitude;
  }
  for (auto& wv : waves) wv.amplitude *= max_px / total;
  return waves;
}

double displacement(const std::vector<Wave>& waves, double u, double v) {
  double d = 0.0;
  for (const auto& wv : waves) d += wv.amplitude * std::sin(2.0 * M_PI * (wv.fx * u + wv.fy * v) + wv.phase);
  return d;
}

float bilinear(const float* plane, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = std::min(int(y), h - 1), x0 = std::min(int(x), w - 1);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const float fy = float(y - y0), fx = float(x - x0);
  const float top = plane[Index(y0) * w + x0] * (1.0f - fx) + plane[Index(y0) * w + x1] * fx;
  const float bottom = plane[Index(y1) * w + x0] * (1.0f - fx) + plane[Index(y1) * w + x1] * fx;
  return top * (1.0f - fy) + bottom * fy;
}

}  // namespace

Image<float> oracle_enhance(const OracleWorld& world, const CameraPose& pose, std::uint64_t sample_seed) {
  world.validate();
  RenderSettings settings = world.settings;
  settings.compute_normal = false;
  const RenderedView<float> view = render(world.ground_truth_field, pose, settings);
  const int h = view.rgb.height, w = view.rgb.width;
  Rng rng(mix64(sample_seed ^ mix64(world.perturb.per_sample_seed_base)));
  Eigen::Vector3f offset;
  for (int c = 0; c < 3; ++c) offset[c] = float(world.perturb.color_jitter_std * rng.normal());
  const auto wave_x = draw_waves(rng, world.perturb.warp_max_px);
  const auto wave_y = draw_waves(rng, world.perturb.warp_max_px);

  Image<float> out(3, h, w);
  const bool warp = world.perturb.warp_max_px > 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Index i = Index(y) * w + x;
      double sy = y, sx = x;
      if (warp) {
        const double u = double(x) / w, v = double(y) / h;
        sx += displacement(wave_x, u, v);
        sy += displacement(wave_y, u, v);
      }
      const float a = warp ? bilinear(view.alpha.data(), h, w, sy, sx) : view.alpha[i];
      for (int c = 0; c < 3; ++c) {
        const float v = warp ? bilinear(view.rgb.planes.row(c).data(), h, w, sy, sx) : view.rgb.planes(c, i);
        out.planes(c, i) = std::clamp(v + a * offset[c], 0.0f, 1.0f);
      }
    }
  return out;
}

std::string to_string(ControlMode mode) {
  switch (mode) {
    case ControlMode::depth:
      return "depth";
    case ControlMode::normal:
      return "normal";
    case ControlMode::softedge:
      return "softedge";
  }
  return "depth";
}

ControlMode parse_control_mode(const std::string& name) {
  if (name == "depth") return ControlMode::depth;
  if (name == "normal") return ControlMode::normal;
  if (name == "softedge") return ControlMode::softedge;
  throw ConfigError("unknown control mode '" + name + "' (expected depth, normal or softedge)");
}

Image<float> ToyI2IBackend::enhance(const EnhanceRequest& request) {
  return i2i_enhance(prior_, request.coarse->rgb, request.strength, request.prompt_label, request.seed, schedule_, guidance_);
}

Image<float> OracleBackend::enhance(const EnhanceRequest& request) {
  OracleWorld world = world_;
  world.settings.image_size = request.coarse->size();
  return oracle_enhance(world, request.pose, request.seed);
}

json OracleBackend::describe() const {
  return {{"color_jitter_std", world_.perturb.color_jitter_std},
          {"warp_max_px", world_.perturb.warp_max_px},
          {"per_sample_seed_base", world_.perturb.per_sample_seed_base}};
}

void RemoteConfig::validate() const {
  require(!host.empty(), "remote: host is empty");
  require(port > 0 && port < 65536, "remote: port out of range");
  require(!path.empty() && path.front() == '/', "remote: path must start with '/'");
  require(max_retries >= 0, "remote: max_retries must be >= 0");
  require(timeout_s > 0.0, "remote: timeout must be positive");
  require(backoff_s >= 0.0, "remote: backoff must be >= 0");
  require(max_in_flight >= 1, "remote: max_in_flight must be >= 1");
}

std::string RemoteConfig::prompt_for(int label) const {
  const auto it = prompts.find(label);
  return it != prompts.end() ? it->second : "label:" + std::to_string(label);
}

std::string serialize_request(const RemoteRequest& request) {
  const json body{{"prompt", request.prompt},
                  {"control_mode", to_string(request.control_mode)},
                  {"image_b64", io::base64_encode(io::encode_png(request.conditioning))},
                  {"strength", request.strength},
                  {"seed", request.seed},
                  {"width", request.conditioning.width},
                  {"height", request.conditioning.height}};
  return body.dump();
}

Image<float> parse_response(const std::string& body, int width, int height) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("remote: response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("image_b64") || !j["image_b64"].is_string())
    throw ProtocolError("remote: response lacks a string 'image_b64'");
  Image<float> image = io::decode_png(io::base64_decode(j["image_b64"].get<std::string>()));
  if (image.width != width || image.height != height)
    throw ProtocolError("remote: response image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        ", requested " + std::to_string(width) + "x" + std::to_string(height));
  return image;
}

RemoteResult remote_enhance(const RemoteConfig& config, const RemoteRequest& request) {
  config.validate();
  const std::string body = serialize_request(request);
  httplib::Client client(config.host, config.port);
  const auto timeout = std::chrono::duration<double>(config.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  std::string last_error;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0 && config.backoff_s > 0.0)
      std::this_thread::sleep_for(std::chrono::duration<double>(config.backoff_s * attempt));
    const auto res = client.Post(config.path, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    return {parse_response(res->body, request.conditioning.width, request.conditioning.height), attempt};
  }
  throw RemoteError("remote: request failed after " + std::to_string(config.max_retries + 1) + " attempts (" +
                    last_error + ")");
}

Image<float> RemoteBackend::enhance(const EnhanceRequest& request) {
  RemoteRequest r;
  r.prompt = config_.prompt_for(request.prompt_label);
  r.control_mode = config_.control_mode;
  switch (config_.control_mode) {
    case ControlMode::depth:
      r.conditioning = request.maps->depth_image();
      break;
    case ControlMode::normal:
      r.conditioning = request.maps->normal;
      break;
    case ControlMode::softedge:
      r.conditioning = request.maps->edge_image();
      break;
  }
  r.strength = request.strength;
  r.seed = request.seed;
  const RemoteResult result = remote_enhance(config_, r);
  const json line{{"view_id", request.view_id},   {"sample_id", request.sample_id}, {"seed", request.seed},
                  {"retries", result.retries},    {"prompt", r.prompt},             {"control_mode", to_string(r.control_mode)},
                  {"strength", request.strength}};
  std::lock_guard lock(mutex_);
  log_.push_back({{request.view_id, request.sample_id}, line.dump()});
  return result.image;
}

json RemoteBackend::describe() const {
  return {{"host", config_.host},
          {"port", config_.port},
          {"path", config_.path},
          {"control_mode", to_string(config_.control_mode)},
          {"max_retries", config_.max_retries}};
}

std::vector<std::string> RemoteBackend::log_lines() const {
  std::lock_guard lock(mutex_);
  auto sorted = log_;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::string> out;
  for (auto& [key, line] : sorted) out.push_back(line);
  return out;
}

CameraPose DatasetEntry::pose(const Eigen::Vector3d& look_at) const {
  CameraPose p;
  p.azimuth = azimuth;
  p.elevation = elevation;
  p.radius = radius;
  p.fov = fov;
  p.look_at = look_at;
  return p;
}

void to_json(json& j, const DatasetEntry& e) {
  j = json{{"image_path", e.image_path}, {"view_id", e.view_id}, {"sample_id", e.sample_id},
           {"azimuth", e.azimuth},       {"elevation", e.elevation}, {"radius", e.radius},
           {"fov", e.fov},               {"backend", e.backend},     {"seed", e.seed}};
}

void from_json(const json& j, DatasetEntry& e) {
  e.image_path = j.at("image_path").get<std::string>();
  e.view_id = j.at("view_id").get<int>();
  e.sample_id = j.at("sample_id").get<int>();
  e.azimuth = j.at("azimuth").get<double>();
  e.elevation = j.at("elevation").get<double>();
  e.radius = j.at("radius").get<double>();
  e.fov = j.at("fov").get<double>();
  e.backend = j.at("backend").get<std::string>();
  e.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<int> PosedDataset::entries_of_view(int view_id) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].view_id == view_id) out.push_back(static_cast<int>(i));
  return out;
}

void PosedDataset::validate() const {
  if (entries.empty()) throw ConfigError("dataset has no entries");
  rig.validate();
  std::vector<int> counts(rig.n_views(), 0);
  std::set<std::pair<int, int>> seen;
  for (const auto& e : entries) {
    if (e.view_id < 0 || e.view_id >= rig.n_views()) throw CorruptionError("dataset entry has unknown view " + std::to_string(e.view_id));
    if (!seen.insert({e.view_id, e.sample_id}).second)
      throw CorruptionError("duplicate dataset entry (" + std::to_string(e.view_id) + ", " + std::to_string(e.sample_id) + ")");
    ++counts[e.view_id];
  }
  for (int v = 0; v < rig.n_views(); ++v)
    if (counts[v] != rig.samples_per_view)
      throw CorruptionError("view " + std::to_string(v) + " has " + std::to_string(counts[v]) + " entries, expected " +
                            std::to_string(rig.samples_per_view));
  if (!images.empty()) {
    if (images.size() != entries.size()) throw CorruptionError("dataset image count does not match its entries");
    for (const auto& im : images)
      if (!im.same_shape(images.front())) throw ShapeError("dataset images differ in size");
  }
}

std::uint64_t entry_seed(std::uint64_t seed, int view_id, int sample_id) {
  return seed ^ mix64((std::uint64_t(std::uint32_t(view_id)) << 32) | std::uint32_t(sample_id));
}

namespace {

std::string numbered(const char* pattern, int a, int b = -1) {
  char buf[64];
  if (b < 0)
    std::snprintf(buf, sizeof buf, pattern, a);
  else
    std::snprintf(buf, sizeof buf, pattern, a, b);
  return buf;
}

}  // namespace

PosedDataset generate_dataset(const Fieldf& field, const PoseSet& rig, EnhanceBackend& backend,
                              const GenerateOptions& options, const fs::path& root) {
  rig.validate();
  options.settings.validate();
  field.validate();
  if (!(options.strength >= 0.0 && options.strength <= 1.0)) throw ConfigError("strength must lie in [0,1]");

  for (const char* sub : {"images", "coarse", "cond"}) fs::remove_all(root / sub);
  fs::remove(root / "manifest.jsonl");
  fs::remove(root / "remote.log");
  for (const char* sub : {"images", "coarse", "cond"}) fs::create_directories(root / sub);

  RenderSettings settings = options.settings;
  settings.compute_depth = true;
  settings.compute_normal = false;
  const int n_views = rig.n_views();
  std::vector<RenderedView<float>> coarse(n_views);
  std::vector<ConditioningMaps> maps(n_views);
  json views = json::array();
  for (int v = 0; v < n_views; ++v)
    views.push_back({{"view_id", v},
                     {"coarse", numbered("coarse/%04d.png", v)},
                     {"depth", numbered("cond/%04d_depth.png", v)},
                     {"normal", numbered("cond/%04d_normal.png", v)},
                     {"edge", numbered("cond/%04d_edge.png", v)}});
  parallel_for(n_views, [&](Index v) {
    coarse[v] = render(field, rig.poses[v], settings);
    maps[v] = conditioning_maps(coarse[v], options.alpha_threshold);
    const json& paths = views[v];
    io::write_png(root / paths["coarse"].get<std::string>(), coarse[v].rgb);
    io::write_png(root / paths["depth"].get<std::string>(), maps[v].depth_image());
    io::write_png(root / paths["normal"].get<std::string>(), maps[v].normal);
    io::write_png(root / paths["edge"].get<std::string>(), maps[v].edge_image());
  });

  PosedDataset ds;
  ds.root = root;
  ds.prompt_label = options.prompt_label;
  ds.backend = backend.name();
  ds.rig = rig;
  const int spv = rig.samples_per_view;
  ds.entries.resize(std::size_t(n_views) * spv);
  ds.images.resize(ds.entries.size());
  parallel_for(
      Index(ds.entries.size()),
      [&](Index i) {
        const int v = static_cast<int>(i / spv), s = static_cast<int>(i % spv);
        const CameraPose& pose = rig.poses[v];
        DatasetEntry& e = ds.entries[i];
        e.image_path = numbered("images/%04d_%02d.png", v, s);
        e.view_id = v;
        e.sample_id = s;
        e.azimuth = pose.azimuth;
        e.elevation = pose.elevation;
        e.radius = pose.radius;
        e.fov = pose.fov;
        e.backend = backend.name();
        e.seed = entry_seed(options.seed, v, s);
        EnhanceRequest request{v, s, pose, &coarse[v], &maps[v], options.prompt_label, options.strength, e.seed};
        const Image<float> image = backend.enhance(request);
        if (image.channels() != 3 || image.height != settings.image_size || image.width != settings.image_size)
          throw ShapeError("backend '" + backend.name() + "' returned an image of the wrong size");
        const auto bytes = io::encode_png(image);
        io::write_file_atomic(root / e.image_path, bytes);
        ds.images[i] = io::decode_png(bytes);
      },
      backend.max_in_flight());

  json header{{"kind", "header"},
              {"schema_version", kManifestSchemaVersion},
              {"rig", rig},
              {"prompt_label", options.prompt_label},
              {"backend", backend.name()},
              {"backend_config", backend.describe()},
              {"strength", options.strength},
              {"seed", options.seed},
              {"image_size", settings.image_size},
              {"render", {{"samples_per_ray", settings.samples_per_ray},
                          {"near", settings.near},
                          {"far", settings.far},
                          {"background", {settings.background.x(), settings.background.y(), settings.background.z()}}}},
              {"alpha_threshold", options.alpha_threshold},
              {"views", views}};
  if (!options.sidecars.empty()) header["sidecars"] = options.sidecars;
  if (auto* remote = dynamic_cast<RemoteBackend*>(&backend)) {
    std::string log;
    for (const auto& line : remote->log_lines()) log += line + "\n";
    io::write_text_atomic(root / "remote.log", log);
    header["log"] = "remote.log";
  }
  ds.header = header;
  std::string text = header.dump() + "\n";
  for (const auto& e : ds.entries) text += json(e).dump() + "\n";
  io::write_text_atomic(root / "manifest.jsonl", text);
  ds.validate();
  return ds;
}

PosedDataset load_dataset(const fs::path& root, bool load_images) {
  std::ifstream in(root / "manifest.jsonl");
  if (!in) throw ConfigError("no dataset manifest at " + (root / "manifest.jsonl").string());
  PosedDataset ds;
  ds.root = root;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw CorruptionError("manifest line is not JSON: " + std::string(e.what()));
    }
    if (first) {
      first = false;
      if (!j.contains("schema_version")) throw CorruptionError("manifest header lacks schema_version");
      const int version = j["schema_version"].get<int>();
      if (version != kManifestSchemaVersion)
        throw VersionError("manifest schema version " + std::to_string(version) + " does not match supported version " +
                           std::to_string(kManifestSchemaVersion));
      ds.header = j;
      ds.rig = j.at("rig").get<PoseSet>();
      ds.prompt_label = j.at("prompt_label").get<int>();
      ds.backend = j.at("backend").get<std::string>();
      continue;
    }
    ds.entries.push_back(j.get<DatasetEntry>());
  }
  if (first) throw CorruptionError("manifest is empty");
  if (load_images) {
    ds.images.reserve(ds.entries.size());
    for (const auto& e : ds.entries) ds.images.push_back(io::read_png(root / e.image_path));
  }
  ds.validate();
  return ds;
}

std::vector<std::string> referenced_files(const PosedDataset& dataset) {
  std::vector<std::string> out{"manifest.jsonl"};
  if (dataset.header.contains("views"))
    for (const auto& v : dataset.header["views"])
      for (const char* key : {"coarse", "depth", "normal", "edge"}) out.push_back(v.at(key).get<std::string>());
  if (dataset.header.contains("log")) out.push_back(dataset.header["log"].get<std::string>());
  if (dataset.header.contains("sidecars"))
    for (const auto& f : dataset.header["sidecars"]) out.push_back(f.get<std::string>());
  for (const auto& e : dataset.entries) out.push_back(e.image_path);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sdsgan
