#include "sdsgan/config.hpp"
#include "sdsgan/io.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <charconv>
#include <sstream>

namespace sdsgan {

namespace pt = boost::property_tree;

namespace {

using Entries = std::vector<std::pair<std::string, std::string>>;

// Values shared by every preset; presets below override a subset.
Entries base_entries() {
  return {
      {"world.scene_seed", "11"},
      {"world.other_scene_seed", "12"},
      {"world.resolution", "32"},
      {"world.density", "25"},
      {"world.edge_width", "0.03"},
      {"world.coarse_blur", "1.5"},
      {"world.coarse_desaturate", "0.5"},

      {"render.image_size", "64"},
      {"render.samples_per_ray", "64"},
      {"render.near", "1.2"},
      {"render.far", "4.8"},
      {"render.background", "1,1,1"},

      {"schedule.steps", "100"},
      {"schedule.beta_min", "0.001"},
      {"schedule.beta_max", "0.2"},

      {"prior.corpus_per_label", "1000"},
      {"prior.corpus_seed", "1"},
      {"prior.steps", "20000"},
      {"prior.batch_size", "8"},
      {"prior.lr", "0.002"},
      {"prior.label_dropout", "0.1"},
      {"prior.base_channels", "16"},
      {"prior.levels", "2"},
      {"prior.embed_dim", "32"},
      {"prior.seed", "3"},

      {"poses.azimuth_min", "0"},
      {"poses.azimuth_max", "6.283185307179586"},
      {"poses.elevation_min", "-0.17453292519943295"},
      {"poses.elevation_max", "0.7853981633974483"},
      {"poses.radius_min", "3"},
      {"poses.radius_max", "3"},
      {"poses.fov", "0.6981317007977318"},

      {"coarse.steps", "2000"},
      {"coarse.lr", "0.01"},
      {"coarse.seed", "0"},
      {"coarse.label", "0"},
      {"coarse.field_resolution", "32"},
      {"coarse.weighting", "sigma_sq"},
      {"coarse.t_min", "2"},
      {"coarse.t_max", "98"},
      {"coarse.guidance", "1"},

      {"rig.views", "60"},
      {"rig.samples", "5"},
      {"rig.elevations", "0,0.5235987755982988"},
      {"rig.radius", "3"},
      {"rig.fov", "0.6981317007977318"},

      {"dataset.backend", "oracle"},
      {"dataset.strength", "0.5"},
      {"dataset.seed", "0"},
      {"dataset.label", "0"},
      {"dataset.alpha_threshold", "0.5"},
      {"dataset.guidance", "1"},

      {"oracle.color_jitter_std", "0.1"},
      {"oracle.warp_max_px", "3"},
      {"oracle.seed_base", "0"},

      {"remote.host", "127.0.0.1"},
      {"remote.port", "7860"},
      {"remote.path", "/generate"},
      {"remote.control_mode", "depth"},
      {"remote.prompt_0", "label:0"},
      {"remote.prompt_1", "label:1"},
      {"remote.max_retries", "3"},
      {"remote.timeout_s", "60"},
      {"remote.backoff_s", "0.5"},
      {"remote.max_in_flight", "4"},

      {"refine.total_steps", "2000"},
      {"refine.disc_steps_per_gen_step", "1"},
      {"refine.field_lr", "0.01"},
      {"refine.disc_lr", "0.002"},
      {"refine.seed", "0"},
      {"refine.mode", "SDS_GAN"},
      {"refine.batch_size", "1"},
      {"refine.label", "0"},
      {"refine.weighting", "sigma_sq"},
      {"refine.t_min", "2"},
      {"refine.t_max", "20"},
      {"refine.guidance", "1"},
      {"refine.checkpoint_every", "500"},
      {"refine.render_every", "500"},

      {"disc.base_channels", "64"},
      {"disc.n_blocks", "4"},
      {"disc.pose_conditioning", "true"},
      {"disc.r1_gamma", "1"},
      {"disc.r1_interval", "4"},

      {"weights.sds", "1"},
      {"weights.gan0", "10"},
      {"weights.l2", "1000"},
      {"weights.decay", "linear"},
      {"weights.opacity_entropy", "0"},
      {"weights.orientation", "0"},

      {"ablate.modes", "L2_ONLY,GAN_ONLY,SDS_L2,SDS_GAN"},
      {"ablate.seeds", "3"},

      {"turntable.views", "8"},
      {"turntable.elevation", "0.3"},
      {"turntable.radius", "3"},

      {"run.single_threaded", "false"},

      {"paths.world", "world"},
      {"paths.prior", "prior/prior.ckpt"},
      {"paths.field", ""},
      {"paths.dataset", "dataset"},
      {"paths.out", "out"},
  };
}

Entries preset_overrides(const std::string& name) {
  if (name == "desk") return {};
  if (name == "test")
    return {
        {"render.image_size", "32"},
        {"render.samples_per_ray", "32"},
        {"prior.steps", "3000"},
        {"coarse.steps", "300"},
        {"refine.total_steps", "600"},
        {"refine.checkpoint_every", "0"},
        {"refine.render_every", "0"},
        {"disc.base_channels", "16"},
        {"disc.n_blocks", "3"},
        {"disc.r1_gamma", "0.1"},
    };
  if (name == "paper-scale")
    return {
        {"render.image_size", "512"},
        {"render.samples_per_ray", "384"},
        {"coarse.steps", "25000"},
        {"refine.total_steps", "10000"},
        {"rig.views", "60"},
        {"rig.samples", "5"},
        {"disc.n_blocks", "7"},
    };
  throw ConfigError("unknown preset '" + name + "' (expected desk, test or paper-scale)");
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string s = boost::algorithm::trim_copy(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  return value;
}

}  // namespace

std::vector<std::string> Config::preset_names() { return {"desk", "test", "paper-scale"}; }

Config Config::preset(const std::string& name) {
  Config c;
  for (auto& [k, v] : base_entries()) c.values_[k] = v;
  for (auto& [k, v] : preset_overrides(name)) c.values_.at(k) = v;
  c.values_["preset.name"] = name;
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected section.key=value, got '" + assignment + "'");
  set(boost::algorithm::trim_copy(assignment.substr(0, eq)), boost::algorithm::trim_copy(assignment.substr(eq + 1)));
}

void Config::merge_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config file: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config entry '" + section + "' lies outside any section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (full == "preset.name") {
        values_[full] = value.data();
        continue;
      }
      set(full, value.data());
    }
  }
}

void Config::merge_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " not found");
  const auto bytes = io::read_file(path);
  merge_ini(std::string(bytes.begin(), bytes.end()));
}

const std::string& Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double Config::number(const std::string& key) const { return parse_number<double>(key, get(key)); }
int Config::integer(const std::string& key) const { return parse_number<int>(key, get(key)); }
std::uint64_t Config::unsigned_integer(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

bool Config::flag(const std::string& key) const {
  const std::string v = boost::algorithm::to_lower_copy(boost::algorithm::trim_copy(get(key)));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + get(key) + "'");
}

std::vector<std::string> Config::list(const std::string& key) const {
  std::vector<std::string> parts;
  const std::string v = boost::algorithm::trim_copy(get(key));
  if (v.empty()) return parts;
  boost::algorithm::split(parts, v, boost::algorithm::is_any_of(","));
  for (auto& p : parts) boost::algorithm::trim(p);
  return parts;
}

std::vector<double> Config::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& p : list(key)) out.push_back(parse_number<double>(key, p));
  return out;
}

std::string Config::to_ini() const {
  pt::ptree tree;
  for (const auto& [k, v] : values_) tree.put(pt::ptree::path_type(k, '.'), v);
  std::ostringstream out;
  pt::write_ini(out, tree);
  return out.str();
}

void Config::write_snapshot(const std::filesystem::path& path) const { io::write_text_atomic(path, to_ini()); }

RenderSettings render_settings(const Config& c) {
  RenderSettings s;
  s.image_size = c.integer("render.image_size");
  s.samples_per_ray = c.integer("render.samples_per_ray");
  s.near = c.number("render.near");
  s.far = c.number("render.far");
  const auto bg = c.numbers("render.background");
  require(bg.size() == 3, "render.background needs three values");
  s.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
  s.validate();
  return s;
}

NoiseSchedule noise_schedule(const Config& c) {
  return build_schedule(c.integer("schedule.steps"), c.number("schedule.beta_min"), c.number("schedule.beta_max"));
}

RasterizeConfig rasterize_config(const Config& c) {
  RasterizeConfig r;
  r.resolution = c.integer("world.resolution");
  r.density = c.number("world.density");
  r.edge_width = c.number("world.edge_width");
  return r;
}

PriorTrainConfig prior_train_config(const Config& c) {
  PriorTrainConfig p;
  p.net.image_size = c.integer("render.image_size");
  p.net.base_channels = c.integer("prior.base_channels");
  p.net.levels = c.integer("prior.levels");
  p.net.embed_dim = c.integer("prior.embed_dim");
  p.steps = c.integer("prior.steps");
  p.batch_size = c.integer("prior.batch_size");
  p.lr = c.number("prior.lr");
  p.label_dropout = c.number("prior.label_dropout");
  p.seed = c.unsigned_integer("prior.seed");
  return p;
}

PoseDistribution pose_distribution(const Config& c) {
  PoseDistribution d;
  d.azimuth_min = c.number("poses.azimuth_min");
  d.azimuth_max = c.number("poses.azimuth_max");
  d.elevation_min = c.number("poses.elevation_min");
  d.elevation_max = c.number("poses.elevation_max");
  d.radius_min = c.number("poses.radius_min");
  d.radius_max = c.number("poses.radius_max");
  d.fov = c.number("poses.fov");
  d.validate();
  return d;
}

PoseSet rig(const Config& c) {
  return uniform_pose_set(c.integer("rig.views"), c.integer("rig.samples"), c.numbers("rig.elevations"),
                          c.number("rig.radius"), c.number("rig.fov"));
}

OracleWorld oracle_world(const Config& c, const Fieldf& ground_truth) {
  OracleWorld w;
  w.ground_truth_field = ground_truth;
  w.perturb.color_jitter_std = c.number("oracle.color_jitter_std");
  w.perturb.warp_max_px = c.number("oracle.warp_max_px");
  w.perturb.per_sample_seed_base = c.unsigned_integer("oracle.seed_base");
  w.settings = render_settings(c);
  w.validate();
  return w;
}

RemoteConfig remote_config(const Config& c) {
  RemoteConfig r;
  r.host = c.get("remote.host");
  r.port = c.integer("remote.port");
  r.path = c.get("remote.path");
  r.control_mode = parse_control_mode(c.get("remote.control_mode"));
  r.prompts[0] = c.get("remote.prompt_0");
  r.prompts[1] = c.get("remote.prompt_1");
  r.max_retries = c.integer("remote.max_retries");
  r.timeout_s = c.number("remote.timeout_s");
  r.backoff_s = c.number("remote.backoff_s");
  r.max_in_flight = c.integer("remote.max_in_flight");
  r.validate();
  return r;
}

GenerateOptions generate_options(const Config& c) {
  GenerateOptions g;
  g.prompt_label = c.integer("dataset.label");
  g.strength = c.number("dataset.strength");
  g.seed = c.unsigned_integer("dataset.seed");
  g.settings = render_settings(c);
  g.alpha_threshold = c.number("dataset.alpha_threshold");
  return g;
}

SdsConfig::Weighting parse_weighting(const std::string& name) {
  if (name == "sigma_sq") return SdsConfig::Weighting::sigma_sq;
  if (name == "uniform") return SdsConfig::Weighting::uniform;
  throw ConfigError("unknown SDS weighting '" + name + "' (expected sigma_sq or uniform)");
}

namespace {
SdsConfig sds_config(const Config& c, const std::string& section) {
  SdsConfig s;
  s.weighting = parse_weighting(c.get(section + ".weighting"));
  s.t_min = c.integer(section + ".t_min");
  s.t_max = c.integer(section + ".t_max");
  s.guidance = c.number(section + ".guidance");
  return s;
}
}  // namespace

CoarseConfig coarse_config(const Config& c) {
  CoarseConfig k;
  k.steps = c.integer("coarse.steps");
  k.lr = c.number("coarse.lr");
  k.seed = c.unsigned_integer("coarse.seed");
  k.prompt_label = c.integer("coarse.label");
  k.field_resolution = c.integer("coarse.field_resolution");
  k.settings = render_settings(c);
  k.sds = sds_config(c, "coarse");
  k.poses = pose_distribution(c);
  return k;
}

RefineConfig refine_config(const Config& c) {
  RefineConfig r;
  r.total_steps = c.integer("refine.total_steps");
  r.disc_steps_per_gen_step = c.integer("refine.disc_steps_per_gen_step");
  r.field_lr = c.number("refine.field_lr");
  r.disc_lr = c.number("refine.disc_lr");
  r.seed = c.unsigned_integer("refine.seed");
  r.ablation_mode = parse_ablation_mode(c.get("refine.mode"));
  r.batch_size = c.integer("refine.batch_size");
  r.prompt_label = c.integer("refine.label");
  r.settings = render_settings(c);
  r.sds = sds_config(c, "refine");
  r.sds_poses = pose_distribution(c);
  r.disc.image_size = r.settings.image_size;
  r.disc.base_channels = c.integer("disc.base_channels");
  r.disc.n_blocks = c.integer("disc.n_blocks");
  r.disc.pose_conditioning = c.flag("disc.pose_conditioning");
  r.disc.r1_gamma = c.number("disc.r1_gamma");
  r.disc.r1_interval = c.integer("disc.r1_interval");
  return r;
}

LossWeights loss_weights(const Config& c) {
  LossWeights w;
  w.sds = c.number("weights.sds");
  w.gan0 = c.number("weights.gan0");
  w.l2 = c.number("weights.l2");
  w.decay = c.get("weights.decay");
  for (const auto& name : regularizer_names()) {
    const double v = c.number("weights." + name);
    if (v != 0.0) w.reg[name] = v;
  }
  w.validate();
  return w;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::string> parts;
  const std::string t = boost::algorithm::trim_copy(text);
  boost::algorithm::split(parts, t, boost::algorithm::is_any_of(","));
  std::vector<std::uint64_t> seeds;
  if (parts.size() == 1) {
    const auto n = parse_number<std::uint64_t>("seeds", parts[0]);
    require(n >= 1, "seed count must be >= 1");
    for (std::uint64_t s = 1; s <= n; ++s) seeds.push_back(s);
    return seeds;
  }
  for (const auto& p : parts) seeds.push_back(parse_number<std::uint64_t>("seeds", p));
  return seeds;
}

std::vector<AblationMode> parse_modes(const std::string& text) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, text, boost::algorithm::is_any_of(","));
  std::vector<AblationMode> modes;
  for (auto& p : parts) modes.push_back(parse_ablation_mode(boost::algorithm::trim_copy(p)));
  return modes;
}

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::filesystem::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    const auto held = io::read_file(path_);
    throw LockedError("run directory " + dir.string() + " is locked by another writer (pid " +
                      std::string(held.begin(), held.end()) + ")");
  }
  const std::string pid = std::to_string(::getpid());
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace sdsgan
