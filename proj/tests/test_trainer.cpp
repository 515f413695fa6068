#include "helpers.hpp"

#include "sdsgan/eval.hpp"
#include "sdsgan/field_io.hpp"
#include "sdsgan/trainer.hpp"

#include <boost/math/distributions/chi_squared.hpp>

using namespace sdsgan;
using testing::TempDir;

namespace {

RenderSettings small_settings(int size = 8) {
  RenderSettings s;
  s.image_size = size;
  s.samples_per_ray = 12;
  return s;
}

/// In-memory dataset: per-view renders of `source`, each sample shifted by a seeded colour offset.
PosedDataset make_dataset(const Fieldf& source, const PoseSet& rig, const RenderSettings& settings, double jitter = 0.0,
                          std::uint64_t seed = 0) {
  PosedDataset ds;
  ds.rig = rig;
  ds.backend = "memory";
  Rng rng(seed);
  for (int v = 0; v < rig.n_views(); ++v) {
    const Image<float> base = render(source, rig.poses[v], settings).rgb;
    for (int s = 0; s < rig.samples_per_view; ++s) {
      DatasetEntry e;
      e.view_id = v;
      e.sample_id = s;
      e.azimuth = rig.poses[v].azimuth;
      e.elevation = rig.poses[v].elevation;
      e.radius = rig.poses[v].radius;
      e.fov = rig.poses[v].fov;
      ds.entries.push_back(e);
      Image<float> im = base;
      for (int c = 0; c < 3; ++c) im.planes.row(c).array() += float(jitter * rng.normal());
      im.planes = im.planes.cwiseMax(0.0f).cwiseMin(1.0f);
      ds.images.push_back(im);
    }
  }
  return ds;
}

DenoiserConfig tiny_net() {
  DenoiserConfig c;
  c.image_size = 8;
  c.base_channels = 4;
  c.embed_dim = 8;
  return c;
}

Denoiserf scrambled_prior(std::uint64_t seed) {
  Denoiserf d(tiny_net(), seed);
  Rng rng(seed + 1);
  for (Index i = 0; i < d.params.size(); ++i) d.params[i] += float(0.2 * rng.normal());
  return d;
}

RefineConfig small_refine(const NoiseSchedule& sched) {
  RefineConfig c;
  c.total_steps = 6;
  c.settings = small_settings();
  c.sds = default_sds_config(sched);
  c.disc.image_size = 8;
  c.disc.base_channels = 4;
  c.disc.n_blocks = 2;
  c.disc.r1_interval = 2;
  c.seed = 5;
  return c;
}

struct Setup {
  NoiseSchedule sched = build_schedule(100, 1e-3, 0.2);
  Denoiserf prior = scrambled_prior(3);
  Fieldf field = testing::random_field<float>(8, 1, 0.0, 1.0);
  PoseSet rig = uniform_pose_set(6, 2, {0.0, 0.4}, 3.0, 0.7);
  PosedDataset ds = make_dataset(testing::random_field<float>(8, 2, 0.5, 1.0), rig, small_settings(), 0.1, 4);
  RefineConfig cfg = small_refine(sched);
  LossWeights weights;
  Setup() {
    weights.gan0 = 0.5;
    weights.l2 = 2.0;
    weights.reg = {{"opacity_entropy", 0.01}};
  }
};

double chi_square_p(const std::vector<int>& a, const std::vector<int>& b) {
  double stat = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double total = a[i] + b[i];
    const double ea = total * na / (na + nb), eb = total * nb / (na + nb);
    stat += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
  }
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(double(a.size() - 1)), stat));
}

}  // namespace

TEST_CASE("linear weight schedule") {
  CHECK(loss_weight_schedule(0, 100, 0.7) == 0.7);
  CHECK(loss_weight_schedule(100, 100, 0.7) == 0.0);
  CHECK(loss_weight_schedule(50, 100, 1.0) == 0.5);
  double prev = 1e9;
  for (int s = 0; s <= 37; ++s) {
    const double l = loss_weight_schedule(s, 37, 3.0);
    CHECK(l <= prev);
    CHECK(l >= 0.0);
    prev = l;
  }
  CHECK_THROWS_AS(loss_weight_schedule(101, 100, 1.0), ConfigError);
  CHECK_THROWS_AS(loss_weight_schedule(-1, 100, 1.0), ConfigError);
  CHECK_THROWS_AS(loss_weight_schedule(1, 100, 1.0, "cosine"), ConfigError);
}

TEST_CASE("ablation modes zero the excluded terms") {
  LossWeights w;
  w.sds = 1.0;
  w.gan0 = 2.0;
  w.l2 = 3.0;
  auto check = [&](AblationMode m, double sds, double gan0, double l2) {
    const LossWeights a = apply_ablation(w, m);
    CHECK(a.sds == sds);
    CHECK(a.gan0 == gan0);
    CHECK(a.l2 == l2);
    CHECK(parse_ablation_mode(to_string(m)) == m);
  };
  check(AblationMode::L2_ONLY, 0.0, 0.0, 3.0);
  check(AblationMode::GAN_ONLY, 0.0, 2.0, 0.0);
  check(AblationMode::SDS_L2, 1.0, 0.0, 3.0);
  check(AblationMode::SDS_GAN, 1.0, 2.0, 0.0);
  CHECK_THROWS_AS(parse_ablation_mode("SDS"), ConfigError);
  w.l2 = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.l2 = 1.0;
  w.reg["smoothness"] = 1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("loss csv layout") {
  const auto cols = loss_columns();
  CHECK(cols.front() == "step");
  CHECK(cols.back() == "total");
  CHECK(std::vector<std::string>(cols.begin(), cols.begin() + 7) ==
        std::vector<std::string>{"step", "sds", "g_loss", "d_loss", "r1", "lambda", "l2"});
  LossRecord r;
  r.step = 4;
  r.sds = 0.25;
  const std::string row = loss_csv_row(r);
  CHECK(std::count(row.begin(), row.end(), ',') == int(cols.size()) - 1);
  CHECK(row.rfind("4,0.25,", 0) == 0);
}

TEST_CASE("train_coarse identity, determinism and divergence") {
  const NoiseSchedule sched = build_schedule(100, 1e-3, 0.2);
  const Denoiserf prior = scrambled_prior(1);
  CoarseConfig cc;
  cc.settings = small_settings();
  cc.sds = default_sds_config(sched);
  cc.field_resolution = 8;
  cc.steps = 0;
  const Fieldf init = testing::random_field<float>(8, 3);
  CHECK(train_coarse(prior, sched, cc, LossWeights{}, init) == init);
  cc.steps = 4;
  std::vector<LossRecord> ta, tb;
  const Fieldf a = train_coarse(prior, sched, cc, LossWeights{}, &ta);
  const Fieldf b = train_coarse(prior, sched, cc, LossWeights{}, &tb);
  CHECK(a == b);
  CHECK(ta == tb);
  CHECK(ta.size() == 4);
  CHECK_FALSE(a.params == init_field<float>(8, a.bbox, cc.seed, cc.init).params);

  Fieldf bad = init;
  bad.params[bad.node_index(4, 4, 4)] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_coarse(prior, sched, cc, LossWeights{}, bad);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("step,sds") != std::string::npos);
  }
  cc.steps = -1;
  CHECK_THROWS_AS(train_coarse(prior, sched, cc, LossWeights{}), ConfigError);
}

TEST_CASE("generator gradient is the sum of its terms") {
  Setup s;
  TrainState base = make_train_state(s.field, s.cfg);
  LossRecord rec;
  discriminator_update(base, s.ds, s.cfg, rec);
  base.step = 1;

  TrainState full = base;
  LossRecord r_full;
  const VectorX<float> g = generator_gradient(full, s.ds, s.prior, s.sched, s.cfg, s.weights, r_full);
  CHECK(r_full.g_loss > 0.0);
  CHECK(r_full.l2 > 0.0);
  VectorX<float> sum = VectorX<float>::Zero(g.size());
  for (int k = 0; k < 4; ++k) {
    TermMask m{k == 0, k == 1, k == 2, k == 3};
    TrainState copy = base;
    LossRecord r;
    const VectorX<float> part = generator_gradient(copy, s.ds, s.prior, s.sched, s.cfg, s.weights, r, m);
    CHECK(part.norm() > 0.0f);
    CHECK(copy == full);
    CHECK(r == r_full);
    sum += part;
  }
  CHECK(testing::relative_error(sum, g) < 1e-6);
}

TEST_CASE("refine determinism and the empty budget") {
  set_single_threaded(true);
  Setup s;
  const TrainState init = make_train_state(s.field, s.cfg);
  const TrainState a = refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights);
  const TrainState b = refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights);
  CHECK(a == b);
  CHECK(a.step == 6);
  CHECK(a.disc_updates == 6);
  CHECK(a.losses.size() == 6);
  CHECK(a.losses.back().lambda == doctest::Approx(0.5 * (1.0 - 5.0 / 6.0)));
  CHECK(a.losses[0].r1 > 0.0);
  CHECK(a.losses[1].r1 == 0.0);
  s.cfg.total_steps = 0;
  CHECK(refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights) == init);
  set_single_threaded(false);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  set_single_threaded(true);
  Setup s;
  TempDir dir("resume");
  const TrainState init = make_train_state(s.field, s.cfg);
  const TrainState straight = refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights);
  RefineRun run;
  run.run_dir = dir.path();
  run.stop_after = 3;
  const TrainState half = refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights, run);
  CHECK(half.step == 3);
  CHECK(std::filesystem::exists(dir / "losses.csv"));
  CHECK(std::filesystem::exists(dir / "renders" / "step_3.png"));
  const TrainState loaded = load_state(dir / "state.ckpt");
  CHECK(loaded == half);
  CHECK(refine(loaded, s.ds, s.prior, s.sched, s.cfg, s.weights) == straight);
  set_single_threaded(false);
}

TEST_CASE("zero discrimination and L2 weights give the SDS-only trajectory") {
  set_single_threaded(true);
  Setup s;
  s.weights.gan0 = 0.0;
  s.weights.l2 = 0.0;
  const TrainState init = make_train_state(s.field, s.cfg);
  const TrainState a = refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights);

  // a different critic and different real images cannot matter
  TrainState other = init;
  other.disc.params.setConstant(0.3f);
  PosedDataset shuffled = s.ds;
  std::reverse(shuffled.images.begin(), shuffled.images.end());
  const TrainState b = refine(other, shuffled, s.prior, s.sched, s.cfg, s.weights);
  CHECK(a.field == b.field);
  CHECK(a.disc_updates == 0);

  // nor does the ablation mode that merely drops those terms
  s.cfg.ablation_mode = AblationMode::SDS_L2;
  CHECK(refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights).field == a.field);

  // SDS-only continuation by hand
  TrainState manual = init;
  for (int k = 0; k < 6; ++k) {
    LossRecord r;
    const VectorX<float> g = generator_gradient(manual, s.ds, s.prior, s.sched, s.cfg, s.weights, r, TermMask{true, false, false, true});
    manual.field_opt.update(manual.field.params, g);
    ++manual.step;
  }
  CHECK(manual.field == a.field);
  set_single_threaded(false);
}

TEST_CASE("refine errors") {
  Setup s;
  TrainState init = make_train_state(s.field, s.cfg);
  PosedDataset empty = s.ds;
  empty.entries.clear();
  empty.images.clear();
  CHECK_THROWS_AS(refine(init, empty, s.prior, s.sched, s.cfg, s.weights), ConfigError);
  init.field.params[init.field.node_index(4, 4, 4)] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(refine(init, s.ds, s.prior, s.sched, s.cfg, s.weights), DivergenceError);
  RefineConfig bad = s.cfg;
  bad.disc.image_size = 16;
  CHECK_THROWS_AS(refine(make_train_state(s.field, s.cfg), s.ds, s.prior, s.sched, bad, s.weights), ConfigError);
}

TEST_CASE("real and fake discriminator poses share the rig marginal") {
  PosedDataset ds;
  ds.rig = uniform_pose_set(60, 5, {0.0, 0.5236}, 3.0, 0.7);
  for (int v = 0; v < 60; ++v)
    for (int s = 0; s < 5; ++s) ds.entries.push_back({"", v, s});
  Rng rng(0);
  std::vector<int> real(60, 0), fake(60, 0);
  for (int step = 0; step < 10000; ++step) {
    const DiscBatchPlan plan = plan_disc_batch(rng, ds, 1);
    ++real[ds.entries[plan.real_entries[0]].view_id];
    ++fake[plan.fake_views[0]];
  }
  CHECK(chi_square_p(real, fake) > 0.01);
  std::vector<int> bands_real(2, 0), bands_fake(2, 0);
  for (int v = 0; v < 60; ++v) {
    bands_real[v % 2] += real[v];
    bands_fake[v % 2] += fake[v];
  }
  CHECK(chi_square_p(bands_real, bands_fake) > 0.01);
}

TEST_CASE("l2_fit on a self-consistent dataset is a fixed point") {
  const Fieldf f = testing::random_field<float>(8, 7, 0.0, 1.0);
  const PoseSet rig = uniform_pose_set(4, 1, {0.2}, 3.0, 0.7);
  const PosedDataset ds = make_dataset(f, rig, small_settings());
  std::vector<double> trace;
  const Fieldf out = l2_fit(f, ds, 8, 1e-2, small_settings(), &trace);
  CHECK(trace[0] == 0.0);
  CHECK(out == f);
  CHECK(render_backward(f, rig.poses[0], small_settings(), ViewGradient<float>{}).norm() < 1e-6);
}

TEST_CASE("l2_fit converges to the mean of conflicting samples") {
  const PoseSet rig = uniform_pose_set(1, 2, {0.0}, 3.0, 0.7);
  PosedDataset ds = make_dataset(testing::random_field<float>(8, 1), rig, small_settings());
  ds.images[0].planes.setZero();
  ds.images[1].planes.setOnes();
  std::vector<double> trace;
  const Fieldf out = l2_fit(testing::random_field<float>(8, 2, 0.0, 0.5), ds, 400, 5e-2, small_settings(), &trace);
  const Image<float> r = render(out, rig.poses[0], small_settings()).rgb;
  const Index centre = 4 * 8 + 4;
  for (int c = 0; c < 3; ++c) CHECK(r.planes(c, centre) == doctest::Approx(0.5).epsilon(0.1));
  CHECK(trace.back() < trace.front());
  CHECK(trace.back() == doctest::Approx(0.25).epsilon(0.05));
}

TEST_CASE("l2_fit on a high-variance dataset collapses toward the view means") {
  set_single_threaded(true);
  const RenderSettings s = small_settings(16);
  const Fieldf gt = testing::random_field<float>(10, 8, 0.5, 2.0);
  const PoseSet rig = uniform_pose_set(8, 5, {0.0, 0.4}, 3.0, 0.7);
  const PosedDataset ds = make_dataset(gt, rig, s, 0.25, 9);
  const Fieldf fit = l2_fit(testing::random_field<float>(10, 3, 0.0, 1.0), ds, 800, 2e-2, s);
  const MetricReport m = evaluate(fit, gt, ds, s);
  MESSAGE("mean proximity " << m.mean_proximity);
  CHECK(m.mean_proximity < 1.0);
  set_single_threaded(false);
}

TEST_CASE("view_mean") {
  const PoseSet rig = uniform_pose_set(2, 2, {0.0}, 3.0, 0.7);
  PosedDataset ds = make_dataset(testing::random_field<float>(8, 1), rig, small_settings());
  ds.images[0].planes.setZero();
  ds.images[1].planes.setOnes();
  CHECK((view_mean(ds, 0).planes.array() == 0.5f).all());
  PosedDataset single = make_dataset(testing::random_field<float>(8, 1), uniform_pose_set(2, 1, {0.0}, 3.0, 0.7), small_settings());
  CHECK(view_mean(single, 1).planes == single.images[1].planes);
  PosedDataset twice = ds;
  const Image<float> m = view_mean(ds, 1);
  twice.images[2] = m;
  twice.images[3] = m;
  CHECK(view_mean(twice, 1).planes == m.planes);
  CHECK_THROWS_AS(view_mean(ds, 5), ConfigError);
}

TEST_CASE("train state checkpoints") {
  Setup s;
  TempDir dir("state");
  TrainState st = refine(make_train_state(s.field, s.cfg), s.ds, s.prior, s.sched, s.cfg, s.weights);
  save_state(dir / "a.ckpt", st);
  CHECK(load_state(dir / "a.ckpt") == st);
  auto bytes = io::read_file(dir / "a.ckpt");
  bytes[bytes.size() / 2] ^= 0x10;
  io::write_file_atomic(dir / "b.ckpt", bytes);
  CHECK_THROWS_AS(load_state(dir / "b.ckpt"), CorruptionError);
  bytes = io::read_file(dir / "a.ckpt");
  bytes.resize(bytes.size() / 3);
  io::write_file_atomic(dir / "c.ckpt", bytes);
  CHECK_THROWS_AS(load_state(dir / "c.ckpt"), CorruptionError);
  bytes = io::read_file(dir / "a.ckpt");
  bytes[4] = std::uint8_t(kStateFormatVersion + 1);
  io::write_file_atomic(dir / "d.ckpt", bytes);
  CHECK_THROWS_AS(load_state(dir / "d.ckpt"), VersionError);
}

TEST_CASE("turntable strip") {
  const Image<float> t = turntable(testing::random_field<float>(8, 1), small_settings(), 0.3, 5);
  CHECK(t.width == 40);
  CHECK(t.height == 8);
}

TEST_CASE("coarse SDS training on the toy world moves toward the class") {
  const auto fx = testing::fixtures_dir();
  if (fx.empty() || !std::filesystem::exists(fx / "prior" / "prior.ckpt")) {
    MESSAGE("prior fixture not built; skipped");
    return;
  }
  set_single_threaded(true);
  const PriorBundle pb = load_prior(fx / "prior" / "prior.ckpt");
  const Fieldf gt = load_field(fx / "world" / "gt.field");
  CoarseConfig cc;
  cc.steps = 2000;
  cc.settings.image_size = pb.denoiser.config().image_size;
  cc.settings.samples_per_ray = 32;
  cc.sds = default_sds_config(pb.schedule);
  cc.poses.elevation_min = -10.0 * M_PI / 180.0;
  cc.poses.elevation_max = 45.0 * M_PI / 180.0;
  const Fieldf init = init_field<float>(32, gt.bbox, cc.seed, cc.init);
  const Fieldf out = train_coarse(pb.denoiser, pb.schedule, cc, LossWeights{}, init);
  const PoseSet rig = uniform_pose_set(12, 1, {0.0, 0.5236}, 3.0, 40.0 * M_PI / 180.0);
  Image<float> m0(3, cc.settings.image_size, cc.settings.image_size), m1 = m0, mg = m0;
  for (const auto& p : rig.poses) {
    m0.planes += render(init, p, cc.settings).rgb.planes / 12.0f;
    m1.planes += render(out, p, cc.settings).rgb.planes / 12.0f;
    mg.planes += render(gt, p, cc.settings).rgb.planes / 12.0f;
  }
  const double gain = psnr(m1, mg) - psnr(m0, mg);
  MESSAGE("class-mean PSNR gain " << gain << " dB");
  CHECK(gain > 0.3);
  set_single_threaded(false);
}
