#include "sdsgan/config.hpp"
#include "sdsgan/eval.hpp"
#include "sdsgan/field_io.hpp"
#include "sdsgan/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace sdsgan;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Invocation {
  std::string preset;
  std::string config_file;
  std::vector<std::string> assignments;
  std::vector<std::pair<std::string, std::string>> flags;  // config key, value
  bool single_threaded = false;
  bool resume = false;
  std::string image, reference;
};

void add_common(CLI::App* sub, Invocation& inv) {
  sub->add_option("--preset", inv.preset, "Preset: desk, test or paper-scale (default desk)");
  sub->add_option("--config", inv.config_file, "INI config file (e.g. a config.snapshot)");
  sub->add_option("--set", inv.assignments, "Override section.key=value (repeatable)");
  sub->add_flag("--single-threaded", inv.single_threaded, "Deterministic single-threaded execution");
}

void bind(CLI::App* sub, Invocation& inv, const std::string& flag, const std::string& key, const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&inv, key](const std::string& v) { inv.flags.emplace_back(key, v); }, help + " [" + key + "]");
}

Config resolve(const Invocation& inv) {
  std::string text;
  if (!inv.config_file.empty()) {
    if (!fs::exists(inv.config_file)) throw UsageError("config file " + inv.config_file + " not found");
    const auto bytes = io::read_file(inv.config_file);
    text.assign(bytes.begin(), bytes.end());
  }
  std::string preset = inv.preset;
  if (preset.empty() && !text.empty()) {
    Config probe = Config::preset("desk");
    probe.merge_ini(text);
    preset = probe.get("preset.name");
  }
  Config c = Config::preset(preset.empty() ? "desk" : preset);
  if (!text.empty()) c.merge_ini(text);
  if (!inv.preset.empty()) c.set("preset.name", inv.preset);
  for (const auto& a : inv.assignments) c.set_assignment(a);
  for (const auto& [k, v] : inv.flags) c.set(k, v);
  if (inv.single_threaded) c.set("run.single_threaded", "true");
  return c;
}

fs::path out_dir(const Config& c) { return c.get("paths.out"); }
fs::path world_dir(const Config& c) { return c.get("paths.world"); }

Fieldf load_required_field(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " " + path.string() + " not found");
  return load_field(path);
}

PriorBundle load_prior_checked(const Config& c) {
  const fs::path path = c.get("paths.prior");
  if (!fs::exists(path)) throw ConfigError("prior checkpoint " + path.string() + " not found (run train-prior)");
  PriorBundle bundle = load_prior(path);
  if (!(bundle.schedule == noise_schedule(c)))
    throw ConfigError("prior " + path.string() + " was trained with a different noise schedule than [schedule]");
  return bundle;
}

// Field to start from: paths.field when set, else the world's coarse model.
Fieldf start_field(const Config& c) {
  const std::string f = c.get("paths.field");
  return load_required_field(f.empty() ? world_dir(c) / "coarse.field" : fs::path(f), "field");
}

void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& losses) {
  std::string text;
  const auto cols = loss_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) text += (i ? "," : "") + cols[i];
  text += "\n";
  for (const auto& r : losses) text += loss_csv_row(r) + "\n";
  io::write_text_atomic(path, text);
}

Image<float> strip(const Config& c, const Fieldf& field) {
  return turntable(field, render_settings(c), c.number("turntable.elevation"), c.integer("turntable.views"),
                   c.number("turntable.radius"));
}

int cmd_make_world(const Config& c) {
  const fs::path out = out_dir(c);
  const RasterizeConfig rc = rasterize_config(c);
  const Fieldf gt = rasterize(make_scene(c.unsigned_integer("world.scene_seed")), rc);
  const Fieldf other = rasterize(make_scene(c.unsigned_integer("world.other_scene_seed")), rc);
  const Fieldf coarse = make_coarse(gt, c.number("world.coarse_blur"), c.number("world.coarse_desaturate"));
  save_field(out / "gt.field", gt);
  save_field(out / "other.field", other);
  save_field(out / "coarse.field", coarse);
  io::write_png(out / "gt.png", strip(c, gt));
  io::write_png(out / "coarse.png", strip(c, coarse));
  std::cout << "world written to " << out.string() << "\n";
  return 0;
}

int cmd_train_prior(const Config& c) {
  const fs::path out = out_dir(c);
  const Fieldf gt = load_required_field(world_dir(c) / "gt.field", "world field");
  const Fieldf other = load_required_field(world_dir(c) / "other.field", "world field");
  const RenderSettings rs = render_settings(c);
  const PoseDistribution pd = pose_distribution(c);
  const int n = c.integer("prior.corpus_per_label");
  const std::uint64_t seed = c.unsigned_integer("prior.corpus_seed");
  auto corpus = render_corpus(gt, 0, n, pd, rs, seed);
  auto second = render_corpus(other, 1, n, pd, rs, seed + 1);
  corpus.insert(corpus.end(), second.begin(), second.end());
  const NoiseSchedule schedule = noise_schedule(c);
  const PriorTrainResult result = train_toy_prior(corpus, schedule, prior_train_config(c));
  save_prior(out / "prior.ckpt", result.denoiser, schedule);

  std::string text = "step,loss\n";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "%zu,%.9g\n", i, result.loss_trace[i]);
    text += line;
  }
  io::write_text_atomic(out / "prior_losses.csv", text);

  auto val = render_corpus(gt, 0, 100, pd, rs, seed + 100);
  auto val1 = render_corpus(other, 1, 100, pd, rs, seed + 101);
  val.insert(val.end(), val1.begin(), val1.end());
  const Denoiserf untrained(result.denoiser.config(), c.unsigned_integer("prior.seed"));
  const json report{{"validation_loss", denoising_loss(result.denoiser, schedule, val, seed + 200, 4)},
                    {"untrained_validation_loss", denoising_loss(untrained, schedule, val, seed + 200, 4)},
                    {"parameters", result.denoiser.parameter_count()},
                    {"steps", result.loss_trace.size()}};
  io::write_text_atomic(out / "prior_report.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_train_coarse(const Config& c) {
  const fs::path out = out_dir(c);
  const PriorBundle prior = load_prior_checked(c);
  const CoarseConfig cc = coarse_config(c);
  std::vector<LossRecord> trace;
  const std::string init = c.get("paths.field");
  const Fieldf field = init.empty() ? train_coarse(prior.denoiser, prior.schedule, cc, loss_weights(c), &trace)
                                    : train_coarse(prior.denoiser, prior.schedule, cc, loss_weights(c),
                                                   load_required_field(init, "init field"), &trace);
  save_field(out / "coarse.field", field);
  write_loss_csv(out / "losses.csv", trace);
  io::write_png(out / "turntable.png", strip(c, field));
  std::cout << "coarse field written to " << (out / "coarse.field").string() << "\n";
  return 0;
}

int cmd_gen_dataset(const Config& c) {
  const fs::path out = out_dir(c);
  const Fieldf field = start_field(c);
  const std::string kind = c.get("dataset.backend");
  std::unique_ptr<EnhanceBackend> backend;
  std::optional<PriorBundle> prior;
  if (kind == "oracle") {
    backend = std::make_unique<OracleBackend>(oracle_world(c, load_required_field(world_dir(c) / "gt.field", "world field")));
  } else if (kind == "toy_i2i") {
    prior = load_prior_checked(c);
    backend = std::make_unique<ToyI2IBackend>(prior->denoiser, prior->schedule, c.number("dataset.guidance"));
  } else if (kind == "remote") {
    backend = std::make_unique<RemoteBackend>(remote_config(c));
  } else {
    throw ConfigError("unknown backend '" + kind + "' (expected toy_i2i, oracle or remote)");
  }
  GenerateOptions options = generate_options(c);
  options.sidecars = {"config.snapshot"};
  const PosedDataset ds = generate_dataset(field, rig(c), *backend, options, out);
  std::cout << "dataset " << out.string() << ": " << ds.entries.size() << " entries, " << ds.rig.n_views()
            << " views x " << ds.rig.samples_per_view << " samples\n";
  return 0;
}

int cmd_refine(const Config& c, bool resume) {
  const fs::path out = out_dir(c);
  const PriorBundle prior = load_prior_checked(c);
  const PosedDataset ds = load_dataset(c.get("paths.dataset"));
  const RefineConfig rc = refine_config(c);
  TrainState state;
  if (resume && fs::exists(out / "state.ckpt")) {
    state = load_state(out / "state.ckpt");
    std::cout << "resuming at step " << state.step << "\n";
  } else {
    state = make_train_state(start_field(c), rc);
  }
  RefineRun run;
  run.run_dir = out;
  run.checkpoint_every = c.integer("refine.checkpoint_every");
  run.render_every = c.integer("refine.render_every");
  const TrainState final_state = refine(std::move(state), ds, prior.denoiser, prior.schedule, rc, loss_weights(c), run);
  save_field(out / "refined.field", final_state.field);
  std::cout << "refined " << final_state.step << " steps into " << out.string() << "\n";
  return 0;
}

int cmd_ablate(const Config& c) {
  const fs::path out = out_dir(c);
  const PriorBundle prior = load_prior_checked(c);
  const Fieldf gt = load_required_field(world_dir(c) / "gt.field", "world field");
  AblationContext ctx;
  ctx.ground_truth = gt;
  ctx.coarse = start_field(c);
  ctx.prior = prior.denoiser;
  ctx.schedule = prior.schedule;
  ctx.oracle = oracle_world(c, gt);
  ctx.rig = rig(c);
  ctx.generate = generate_options(c);
  ctx.refine = refine_config(c);
  ctx.weights = loss_weights(c);
  ctx.root = out;
  ctx.write_runs = true;
  const auto reports = run_ablation(ctx, parse_modes(c.get("ablate.modes")), parse_seeds(c.get("ablate.seeds")));
  const std::string table = format_table(summarize_modes(reports));
  io::write_text_atomic(out / "ablation.json", ablation_json(reports).dump(2) + "\n");
  io::write_text_atomic(out / "table.txt", table);
  std::cout << table;
  return 0;
}

int cmd_metrics(const Config& c, const Invocation& inv) {
  const fs::path out = out_dir(c);
  json report;
  if (!inv.image.empty() || !inv.reference.empty()) {
    if (inv.image.empty() || inv.reference.empty()) throw ConfigError("metrics needs both --image and --reference");
    const Image<float> a = io::read_png(inv.image), b = io::read_png(inv.reference);
    report = {{"psnr", psnr(a, b)}, {"hf_residual", hf_residual(a, b)}};
  } else {
    std::vector<LossRecord> losses;
    Fieldf field;
    const fs::path state_path = fs::path(c.get("paths.field"));
    if (state_path.extension() == ".ckpt") {
      TrainState state = load_state(state_path);
      field = std::move(state.field);
      losses = std::move(state.losses);
    } else {
      field = start_field(c);
    }
    const Fieldf gt = load_required_field(world_dir(c) / "gt.field", "world field");
    const PosedDataset ds = load_dataset(c.get("paths.dataset"));
    MetricReport m = evaluate(field, gt, ds, render_settings(c), losses.empty() ? nullptr : &losses);
    m.run_id = state_path.empty() ? "coarse" : state_path.string();
    report = m.to_json();
  }
  io::write_text_atomic(out / "metrics.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_turntable(const Config& c) {
  const fs::path out = out_dir(c);
  Fieldf field;
  const fs::path path = c.get("paths.field");
  if (path.extension() == ".ckpt")
    field = load_state(path).field;
  else
    field = start_field(c);
  io::write_png(out / "turntable.png", strip(c, field));
  std::cout << "turntable written to " << (out / "turntable.png").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdsgan: voxel radiance fields refined with score distillation and a pose-conditioned discriminator"};
  app.require_subcommand(1, 1);
  Invocation inv;

  auto* make_world = app.add_subcommand("make-world", "Rasterize the toy ground-truth world, a second world and the coarse model");
  bind(make_world, inv, "--out", "paths.out", "Output directory");
  bind(make_world, inv, "--seed", "world.scene_seed", "Scene seed");

  auto* train_prior = app.add_subcommand("train-prior", "Train the label-conditioned denoiser on renders of both worlds");
  bind(train_prior, inv, "--world", "paths.world", "World directory");
  bind(train_prior, inv, "--out", "paths.out", "Output directory (prior.ckpt)");
  bind(train_prior, inv, "--steps", "prior.steps", "Optimisation steps");

  auto* train_coarse_cmd = app.add_subcommand("train-coarse", "SDS-only optimisation of a field");
  bind(train_coarse_cmd, inv, "--prior", "paths.prior", "Prior checkpoint");
  bind(train_coarse_cmd, inv, "--init", "paths.field", "Initial field (default: soft-sphere init)");
  bind(train_coarse_cmd, inv, "--out", "paths.out", "Output directory");
  bind(train_coarse_cmd, inv, "--steps", "coarse.steps", "SDS steps");
  bind(train_coarse_cmd, inv, "--seed", "coarse.seed", "Seed");

  auto* gen = app.add_subcommand("gen-dataset", "Render the rig and enhance every (view, sample)");
  bind(gen, inv, "--field", "paths.field", "Field to render (default: <world>/coarse.field)");
  bind(gen, inv, "--world", "paths.world", "World directory (oracle backend)");
  bind(gen, inv, "--prior", "paths.prior", "Prior checkpoint (toy_i2i backend)");
  bind(gen, inv, "--out", "paths.out", "Dataset directory");
  bind(gen, inv, "--views", "rig.views", "Number of rig views");
  bind(gen, inv, "--samples", "rig.samples", "Samples per view");
  bind(gen, inv, "--backend", "dataset.backend", "toy_i2i, oracle or remote");
  bind(gen, inv, "--strength", "dataset.strength", "Image-to-image strength");
  bind(gen, inv, "--seed", "dataset.seed", "Dataset seed");

  auto* refine_cmd = app.add_subcommand("refine", "Dual SDS + adversarial refinement against a dataset");
  bind(refine_cmd, inv, "--field", "paths.field", "Start field (default: <world>/coarse.field)");
  bind(refine_cmd, inv, "--world", "paths.world", "World directory");
  bind(refine_cmd, inv, "--dataset", "paths.dataset", "Dataset directory");
  bind(refine_cmd, inv, "--prior", "paths.prior", "Prior checkpoint");
  bind(refine_cmd, inv, "--out", "paths.out", "Run directory");
  bind(refine_cmd, inv, "--steps", "refine.total_steps", "Generator steps");
  bind(refine_cmd, inv, "--mode", "refine.mode", "L2_ONLY, GAN_ONLY, SDS_L2 or SDS_GAN");
  bind(refine_cmd, inv, "--seed", "refine.seed", "Seed");
  refine_cmd->add_flag("--resume", inv.resume, "Continue from <out>/state.ckpt when present");

  auto* ablate = app.add_subcommand("ablate", "Loss ablation on the oracle world over several seeds");
  bind(ablate, inv, "--world", "paths.world", "World directory");
  bind(ablate, inv, "--field", "paths.field", "Start field (default: <world>/coarse.field)");
  bind(ablate, inv, "--prior", "paths.prior", "Prior checkpoint");
  bind(ablate, inv, "--out", "paths.out", "Output directory");
  bind(ablate, inv, "--modes", "ablate.modes", "Comma-separated modes");
  bind(ablate, inv, "--seeds", "ablate.seeds", "Seed count N (seeds 1..N) or a comma-separated list");
  bind(ablate, inv, "--steps", "refine.total_steps", "Generator steps per run");

  auto* metrics = app.add_subcommand("metrics", "PSNR to ground truth, proximity to view means, high-frequency residual");
  bind(metrics, inv, "--field", "paths.field", "Field or state.ckpt (default: <world>/coarse.field)");
  bind(metrics, inv, "--world", "paths.world", "World directory");
  bind(metrics, inv, "--dataset", "paths.dataset", "Dataset directory");
  bind(metrics, inv, "--out", "paths.out", "Output directory (metrics.json)");
  metrics->add_option("--image", inv.image, "Compare two PNGs instead: image");
  metrics->add_option("--reference", inv.reference, "Compare two PNGs instead: reference");

  auto* turn = app.add_subcommand("turntable", "Evenly spaced azimuth strip of a field");
  bind(turn, inv, "--field", "paths.field", "Field or state.ckpt (default: <world>/coarse.field)");
  bind(turn, inv, "--world", "paths.world", "World directory");
  bind(turn, inv, "--out", "paths.out", "Output directory (turntable.png)");
  bind(turn, inv, "--views", "turntable.views", "Views in the strip");

  for (auto* sub : app.get_subcommands({})) add_common(sub, inv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  Config config;
  try {
    config = resolve(inv);
    render_settings(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    set_single_threaded(config.flag("run.single_threaded"));
    const fs::path out = out_dir(config);
    RunLock lock(out);
    config.write_snapshot(out / "config.snapshot");
    if (name == "make-world") return cmd_make_world(config);
    if (name == "train-prior") return cmd_train_prior(config);
    if (name == "train-coarse") return cmd_train_coarse(config);
    if (name == "gen-dataset") return cmd_gen_dataset(config);
    if (name == "refine") return cmd_refine(config, inv.resume);
    if (name == "ablate") return cmd_ablate(config);
    if (name == "metrics") return cmd_metrics(config, inv);
    if (name == "turntable") return cmd_turntable(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 1;
}
