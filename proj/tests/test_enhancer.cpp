#include "helpers.hpp"

#include "sdsgan/enhancer.hpp"

#include <httplib.h>

#include <atomic>
#include <fstream>
#include <set>
#include <thread>

using namespace sdsgan;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

/// Synthetic view of the camera-space plane n . p = -d (camera looks down -z).
RenderedView<float> plane_view(const Eigen::Vector3d& n, double d, int size) {
  RenderedView<float> v;
  v.pose.azimuth = 0.4;
  v.pose.elevation = 0.3;
  v.rgb = Image<float>(3, size, size);
  v.alpha = VectorX<float>::Ones(size * size);
  v.depth = VectorX<float>(size * size);
  const Eigen::Matrix3d rt = v.pose.rotation().transpose();
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const Eigen::Vector3d c = rt * v.pose.ray_direction(x, y, size);
      v.depth[y * size + x] = float(-d / n.dot(c));
      for (int k = 0; k < 3; ++k) v.rgb.planes(k, y * size + x) = float(x) / size;
    }
  return v;
}

/// Mock image service on an ephemeral port; the handler sees each request body.
class MockServer {
 public:
  template <typename Handler>
  explicit MockServer(Handler handler) {
    server_.Post("/generate", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      handler(req, res);
    });
    port = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  RemoteConfig config() const {
    RemoteConfig c;
    c.port = port;
    c.backoff_s = 0.0;
    c.timeout_s = 5.0;
    return c;
  }

  int port = 0;
  std::atomic<int> hits{0};

 private:
  httplib::Server server_;
  std::thread thread_;
};

void echo(const httplib::Request& req, httplib::Response& res) {
  const auto in = nlohmann::json::parse(req.body);
  res.set_content(nlohmann::json{{"image_b64", in.at("image_b64")}}.dump(), "application/json");
}

Image<float> gradient_image(int w, int h) {
  Image<float> im(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      im.planes(0, y * w + x) = float(x) / w;
      im.planes(1, y * w + x) = float(y) / h;
      im.planes(2, y * w + x) = 0.25f;
    }
  return im;
}

Fieldf grey_slab(int n) {
  Fieldf f(n, {Eigen::Vector3f::Constant(-1), Eigen::Vector3f::Constant(1)});
  f.params.head(f.nodes()).setConstant(40.0f);
  f.params.tail(f.parameter_count() - f.nodes()).setZero();
  return f;
}

RenderSettings small_settings(int size = 16) {
  RenderSettings s;
  s.image_size = size;
  s.samples_per_ray = 16;
  return s;
}

}  // namespace

TEST_CASE("conditioning maps of a fronto-parallel plane") {
  const RenderedView<float> v = plane_view({0, 0, 1}, 2.0, 16);
  const ConditioningMaps m = conditioning_maps(v);
  CHECK_FALSE(m.empty);
  for (Index i = 0; i < 256; ++i) {
    CHECK(m.normal.planes(0, i) == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(m.normal.planes(1, i) == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(m.normal.planes(2, i) == doctest::Approx(1.0).epsilon(1e-3));
  }
  // depth grows away from the centre ray, and near maps to bright
  CHECK(m.depth.maxCoeff() == 1.0f);
  CHECK(m.depth.minCoeff() == 0.0f);
  CHECK(m.depth[8 * 16 + 8] > m.depth[0]);
}

TEST_CASE("conditioning maps of a 45 degree plane") {
  const Eigen::Vector3d n = Eigen::Vector3d(1, 0, 1).normalized();
  const ConditioningMaps m = conditioning_maps(plane_view(n, 2.0, 16));
  for (Index i = 0; i < 256; ++i) {
    CHECK(m.normal.planes(0, i) == doctest::Approx(0.5 * (n.x() + 1)).epsilon(2e-2));
    CHECK(m.normal.planes(1, i) == doctest::Approx(0.5).epsilon(2e-2));
    CHECK(2.0 * m.normal.planes(2, i) - 1.0 == doctest::Approx(0.7071).epsilon(2e-2));
  }
}

TEST_CASE("conditioning maps stay in [0,1] and mask the background") {
  const Fieldf f = testing::random_field<float>(12, 3, 0.5, 2.0);
  RenderedView<float> v = render(f, CameraPose{}, small_settings());
  const ConditioningMaps m = conditioning_maps(v);
  for (const auto* vec : {&m.depth, &m.soft_edge}) {
    CHECK(vec->minCoeff() >= 0.0f);
    CHECK(vec->maxCoeff() <= 1.0f);
  }
  CHECK(m.normal.planes.minCoeff() >= 0.0f);
  CHECK(m.normal.planes.maxCoeff() <= 1.0f);
  for (Index i = 0; i < v.alpha.size(); ++i)
    if (v.alpha[i] <= 0.5f) CHECK(m.depth[i] == 0.0f);

  Fieldf empty(8, f.bbox);
  empty.params.setConstant(-30.0f);
  const RenderedView<float> blank = render(empty, CameraPose{}, small_settings());
  const ConditioningMaps e = conditioning_maps(blank);
  CHECK(e.empty);
  CHECK(e.depth.maxCoeff() == 0.0f);

  v.depth.resize(0);
  CHECK_THROWS_AS(conditioning_maps(v), ConfigError);
}

TEST_CASE("oracle colour jitter has the configured spread") {
  OracleWorld w{grey_slab(8), {}, small_settings(8)};
  w.perturb.warp_max_px = 0.0;
  w.perturb.color_jitter_std = 0.05;
  const int n = 2000;
  std::vector<double> offsets;
  for (int s = 0; s < n; ++s) {
    const Image<float> im = oracle_enhance(w, CameraPose{}, s);
    offsets.push_back(im.planes(0, 4 * 8 + 4) - 0.5);
  }
  double mean = 0.0, var = 0.0;
  for (double o : offsets) mean += o / n;
  for (double o : offsets) var += (o - mean) * (o - mean) / (n - 1);
  const double sd = std::sqrt(var);
  CHECK(std::abs(mean) < 3.0 * 0.05 / std::sqrt(n));
  CHECK(std::abs(sd - 0.05) < 3.0 * 0.05 / std::sqrt(2.0 * n));
}

TEST_CASE("oracle enhance determinism and the identity perturbation") {
  OracleWorld w{testing::random_field<float>(10, 4, 0.5, 2.0), {}, small_settings()};
  CameraPose pose;
  pose.azimuth = 1.1;
  CHECK(oracle_enhance(w, pose, 9).planes == oracle_enhance(w, pose, 9).planes);
  CHECK(oracle_enhance(w, pose, 9).planes != oracle_enhance(w, pose, 10).planes);
  w.perturb.color_jitter_std = 0.0;
  w.perturb.warp_max_px = 0.0;
  CHECK(oracle_enhance(w, pose, 9).planes == render(w.ground_truth_field, pose, w.settings).rgb.planes);
  w.perturb.warp_max_px = -1.0;
  CHECK_THROWS_AS(oracle_enhance(w, pose, 9), ConfigError);
}

TEST_CASE("remote request serialisation matches the golden body") {
  RemoteRequest r;
  r.prompt = "label:0";
  r.control_mode = ControlMode::normal;
  r.conditioning = gradient_image(4, 2);
  r.strength = 0.5;
  r.seed = 1234567890123ULL;
  const std::string body = serialize_request(r);
  const auto j = nlohmann::json::parse(body);
  CHECK(body.find(' ') == std::string::npos);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"control_mode", "height", "image_b64", "prompt", "seed", "strength", "width"});
  CHECK(j["width"] == 4);
  CHECK(j["height"] == 2);
  CHECK(j["seed"].get<std::uint64_t>() == r.seed);
  CHECK(io::decode_png(io::base64_decode(j["image_b64"].get<std::string>())).planes ==
        io::decode_png(io::encode_png(r.conditioning)).planes);

  std::ifstream golden(fs::path(SDSGAN_GOLDEN_DIR) / "remote_request.json");
  REQUIRE(golden);
  std::string expected((std::istreambuf_iterator<char>(golden)), {});
  while (!expected.empty() && expected.back() == '\n') expected.pop_back();
  CHECK(body == expected);
}

TEST_CASE("parse_response rejects malformed payloads") {
  CHECK_THROWS_AS(parse_response("not json", 4, 2), ProtocolError);
  CHECK_THROWS_AS(parse_response("{\"image\":1}", 4, 2), ProtocolError);
  const std::string ok = nlohmann::json{{"image_b64", io::base64_encode(io::encode_png(gradient_image(4, 2)))}}.dump();
  CHECK(parse_response(ok, 4, 2).width == 4);
  CHECK_THROWS_AS(parse_response(ok, 2, 4), ProtocolError);
}

TEST_CASE("remote enhance against a mock service") {
  RemoteRequest r;
  r.prompt = "label:1";
  r.conditioning = gradient_image(8, 8);

  SUBCASE("echo") {
    MockServer server(echo);
    const RemoteResult out = remote_enhance(server.config(), r);
    CHECK(out.retries == 0);
    CHECK(out.image.planes == io::decode_png(io::encode_png(r.conditioning)).planes);
  }
  SUBCASE("transient failures are retried") {
    std::atomic<int> calls{0};
    MockServer server([&](const httplib::Request& req, httplib::Response& res) {
      if (calls++ < 2)
        res.status = 500;
      else
        echo(req, res);
    });
    const RemoteResult out = remote_enhance(server.config(), r);
    CHECK(out.retries == 2);
    CHECK(server.hits == 3);
  }
  SUBCASE("retries are bounded") {
    MockServer server([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    RemoteConfig c = server.config();
    c.max_retries = 2;
    CHECK_THROWS_AS(remote_enhance(c, r), RemoteError);
    CHECK(server.hits == 3);
  }
  SUBCASE("protocol errors are not retried") {
    MockServer server([](const httplib::Request&, httplib::Response& res) { res.set_content("{\"oops\":true}", "application/json"); });
    CHECK_THROWS_AS(remote_enhance(server.config(), r), ProtocolError);
    CHECK(server.hits == 1);
  }
  SUBCASE("unreachable host") {
    int port = 0;
    {
      httplib::Server probe;
      port = probe.bind_to_any_port("127.0.0.1");
    }
    RemoteConfig c;
    c.port = port;
    c.max_retries = 1;
    c.backoff_s = 0.0;
    c.timeout_s = 1.0;
    CHECK_THROWS_AS(remote_enhance(c, r), RemoteError);
  }
}

TEST_CASE("remote backend dataset logs every request") {
  TempDir dir("remote");
  MockServer server(echo);
  RemoteConfig c = server.config();
  c.control_mode = ControlMode::softedge;
  c.prompts = {{0, "a red toy"}};
  RemoteBackend backend(c);
  const PoseSet rig = uniform_pose_set(3, 2, {0.0}, 3.0, 0.7);
  GenerateOptions opt;
  opt.settings = small_settings();
  const auto ds = generate_dataset(testing::random_field<float>(8, 2, 0.5, 2.0), rig, backend, opt, dir.path());
  CHECK(server.hits == 6);
  std::ifstream log(dir / "remote.log");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["prompt"] == "a red toy");
    CHECK(j["control_mode"] == "softedge");
    CHECK(j["retries"] == 0);
    ++lines;
  }
  CHECK(lines == 6);
  CHECK(ds.header["backend_config"]["port"] == server.port);
}

TEST_CASE("entry seeds are distinct across a large rig") {
  std::set<std::uint64_t> seen;
  for (int v = 0; v < 60; ++v)
    for (int s = 0; s < 5; ++s) seen.insert(entry_seed(7, v, s));
  CHECK(seen.size() == 300);
  CHECK(entry_seed(7, 1, 2) != entry_seed(8, 1, 2));
}

TEST_CASE("generated datasets round-trip and are self-contained") {
  TempDir dir("dataset");
  const Fieldf gt = testing::random_field<float>(10, 5, 0.5, 2.0);
  OracleBackend backend(OracleWorld{gt, {}, small_settings()});
  const PoseSet rig = uniform_pose_set(4, 2, {0.0, 0.4}, 3.0, 0.7);
  GenerateOptions opt;
  opt.settings = small_settings();
  opt.seed = 42;
  opt.sidecars = {"notes.txt"};
  io::write_text_atomic(dir / "notes.txt", "x");
  const Fieldf coarse = testing::random_field<float>(10, 6, 0.5, 2.0);
  const PosedDataset made = generate_dataset(coarse, rig, backend, opt, dir.path());
  REQUIRE(made.entries.size() == 8);

  const PosedDataset back = load_dataset(dir.path());
  CHECK(back.entries == made.entries);
  CHECK(back.rig == rig);
  CHECK(back.prompt_label == 0);
  CHECK(back.backend == "oracle");
  for (std::size_t i = 0; i < back.images.size(); ++i) CHECK(back.images[i].planes == made.images[i].planes);
  CHECK(back.entries_of_view(2).size() == 2);

  std::set<std::string> referenced;
  for (const auto& f : referenced_files(back)) {
    CHECK(fs::exists(dir / f));
    referenced.insert(f);
  }
  for (const auto& p : fs::recursive_directory_iterator(dir.path()))
    if (p.is_regular_file()) CHECK(referenced.count(fs::relative(p.path(), dir.path()).string()) == 1);

  TempDir again("dataset2");
  io::write_text_atomic(again / "notes.txt", "x");
  generate_dataset(coarse, rig, backend, opt, again.path());
  for (const auto& f : referenced) CHECK(io::read_file(dir / f) == io::read_file(again / f));
}

TEST_CASE("toy i2i backend at strength 0 returns the coarse render") {
  TempDir dir("toy");
  DenoiserConfig net;
  net.image_size = 8;
  net.base_channels = 4;
  net.embed_dim = 8;
  const Denoiserf prior(net, 1);
  const NoiseSchedule sched = build_schedule(100, 1e-3, 0.2);
  ToyI2IBackend backend(prior, sched);
  GenerateOptions opt;
  opt.settings = small_settings(8);
  opt.strength = 0.0;
  const Fieldf f = testing::random_field<float>(8, 9, 0.5, 2.0);
  const PoseSet rig = uniform_pose_set(2, 1, {0.0}, 3.0, 0.7);
  const PosedDataset ds = generate_dataset(f, rig, backend, opt, dir.path());
  for (int v = 0; v < 2; ++v)
    CHECK(ds.images[v].planes == io::decode_png(io::encode_png(render(f, rig.poses[v], opt.settings).rgb)).planes);
}

TEST_CASE("load_dataset error paths") {
  TempDir dir("bad");
  CHECK_THROWS_AS(load_dataset(dir.path()), ConfigError);
  OracleBackend backend(OracleWorld{testing::random_field<float>(8, 1), {}, small_settings(8)});
  GenerateOptions opt;
  opt.settings = small_settings(8);
  generate_dataset(testing::random_field<float>(8, 2), uniform_pose_set(2, 1, {0.0}, 3.0, 0.7), backend, opt, dir.path());
  const std::string good = [&] {
    std::ifstream in(dir / "manifest.jsonl");
    return std::string((std::istreambuf_iterator<char>(in)), {});
  }();

  std::string bumped = good;
  bumped.replace(bumped.find("\"schema_version\":1"), 18, "\"schema_version\":2");
  io::write_text_atomic(dir / "manifest.jsonl", bumped);
  CHECK_THROWS_AS(load_dataset(dir.path()), VersionError);

  io::write_text_atomic(dir / "manifest.jsonl", good.substr(0, good.size() - 20));
  CHECK_THROWS_AS(load_dataset(dir.path()), CorruptionError);

  const auto last_line = good.rfind('\n', good.size() - 2);
  io::write_text_atomic(dir / "manifest.jsonl", good.substr(0, last_line + 1));
  CHECK_THROWS_AS(load_dataset(dir.path()), CorruptionError);

  io::write_text_atomic(dir / "manifest.jsonl", "");
  CHECK_THROWS_AS(load_dataset(dir.path()), CorruptionError);
}
