#include "sdsgan/eval.hpp"

#include <cstdio>
#include <sstream>

namespace sdsgan {

using nlohmann::json;

double mse(const Image<float>& a, const Image<float>& b) {
  require_same_shape(a, b, "mse");
  if (a.planes.size() == 0) throw ShapeError("mse: empty images");
  return (a.planes.cast<double>() - b.planes.cast<double>()).squaredNorm() / double(a.planes.size());
}

double psnr(const Image<float>& a, const Image<float>& b) {
  const double e = mse(a, b);
  if (e < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

double hf_residual(const Image<float>& image, const Image<float>& reference) {
  require_same_shape(image, reference, "hf_residual");
  const int h = image.height, w = image.width;
  double total = 0.0;
  for (int c = 0; c < image.channels(); ++c) {
    auto d = [&](int y, int x) {
      y = std::clamp(y, 0, h - 1);
      x = std::clamp(x, 0, w - 1);
      return double(image.at(c, y, x)) - double(reference.at(c, y, x));
    };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) total += std::abs(d(y - 1, x) + d(y + 1, x) + d(y, x - 1) + d(y, x + 1) - 4.0 * d(y, x));
  }
  return total / double(image.planes.size());
}

void MetricReport::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(psnr_mean) || !finite(mean_proximity) || !finite(hf_residual) ||
      !std::all_of(psnr_per_view.begin(), psnr_per_view.end(), finite))
    throw DivergenceError("metric report '" + run_id + "' holds non-finite values");
}

json MetricReport::to_json() const {
  return {{"run_id", run_id},
          {"mode", mode},
          {"seed", seed},
          {"psnr_to_gt", {{"per_view", psnr_per_view}, {"mean", psnr_mean}}},
          {"mean_proximity", mean_proximity},
          {"hf_residual", hf_residual},
          {"losses", loss_summary}};
}

json summarize_losses(const std::vector<LossRecord>& losses, int tail) {
  json out = json::object();
  if (losses.empty()) return out;
  out["steps"] = losses.size();
  const std::size_t from = losses.size() > std::size_t(tail) ? losses.size() - tail : 0;
  const auto cols = loss_columns();
  for (const auto& col : cols) {
    if (col == "step") continue;
    auto value = [&](const LossRecord& r) {
      if (col == "sds") return r.sds;
      if (col == "g_loss") return r.g_loss;
      if (col == "d_loss") return r.d_loss;
      if (col == "r1") return r.r1;
      if (col == "lambda") return r.lambda;
      if (col == "l2") return r.l2;
      if (col == "total") return r.total;
      const auto it = r.reg.find(col);
      return it == r.reg.end() ? 0.0 : it->second;
    };
    double mean = 0.0;
    for (std::size_t i = from; i < losses.size(); ++i) mean += value(losses[i]);
    mean /= double(losses.size() - from);
    out[col] = {{"final", value(losses.back())}, {"tail_mean", mean}};
  }
  return out;
}

MetricReport evaluate(const Fieldf& field, const Fieldf& ground_truth, const PosedDataset& dataset,
                      const RenderSettings& settings, const std::vector<LossRecord>* losses) {
  const int n = dataset.rig.n_views();
  require(n >= 1, "evaluate: dataset has no views");
  RenderSettings s = settings;
  s.compute_depth = false;
  s.compute_normal = false;
  MetricReport report;
  report.psnr_per_view.assign(n, 0.0);
  std::vector<double> to_mean(n), to_gt(n), hf(n);
  parallel_for(n, [&](Index v) {
    const CameraPose& pose = dataset.rig.poses[v];
    const Image<float> r = render(field, pose, s).rgb;
    const Image<float> g = render(ground_truth, pose, s).rgb;
    report.psnr_per_view[v] = psnr(r, g);
    hf[v] = hf_residual(r, g);
    to_gt[v] = std::sqrt(mse(r, g));
    to_mean[v] = dataset.images.empty() ? 0.0 : std::sqrt(mse(r, view_mean(dataset, int(v))));
  });
  double sum_mean = 0.0, sum_gt = 0.0;
  for (int v = 0; v < n; ++v) {
    report.psnr_mean += report.psnr_per_view[v] / n;
    report.hf_residual += hf[v] / n;
    sum_mean += to_mean[v];
    sum_gt += to_gt[v];
  }
  report.mean_proximity = sum_gt > 0.0 ? sum_mean / sum_gt : (sum_mean > 0.0 ? 1e9 : 1.0);
  if (losses) report.loss_summary = summarize_losses(*losses);
  report.validate();
  return report;
}

std::vector<MetricReport> run_ablation(const AblationContext& ctx, const std::vector<AblationMode>& modes,
                                       const std::vector<std::uint64_t>& seeds) {
  require(!modes.empty(), "ablation needs at least one mode");
  require(!seeds.empty(), "ablation needs at least one seed");
  OracleBackend backend(ctx.oracle);
  std::vector<MetricReport> reports;
  for (const auto seed : seeds) {
    GenerateOptions gen = ctx.generate;
    gen.seed = seed;
    const auto data_dir = ctx.root / ("dataset_seed" + std::to_string(seed));
    const PosedDataset dataset = generate_dataset(ctx.coarse, ctx.rig, backend, gen, data_dir);
    for (const auto mode : modes) {
      RefineConfig cfg = ctx.refine;
      cfg.seed = seed;
      cfg.ablation_mode = mode;
      const std::string run_id = to_string(mode) + "_seed" + std::to_string(seed);
      RefineRun run;
      if (ctx.write_runs) run.run_dir = ctx.root / run_id;
      const TrainState final_state =
          refine(make_train_state(ctx.coarse, cfg), dataset, ctx.prior, ctx.schedule, cfg, ctx.weights, run);
      MetricReport report = evaluate(final_state.field, ctx.ground_truth, dataset, cfg.settings, &final_state.losses);
      report.run_id = run_id;
      report.mode = to_string(mode);
      report.seed = seed;
      reports.push_back(std::move(report));
    }
  }
  return reports;
}

std::vector<ModeSummary> summarize_modes(const std::vector<MetricReport>& reports) {
  std::vector<ModeSummary> out;
  for (const auto& r : reports) {
    auto it = std::find_if(out.begin(), out.end(), [&](const ModeSummary& s) { return s.mode == r.mode; });
    if (it == out.end()) {
      out.push_back({r.mode});
      it = out.end() - 1;
    }
    ++it->runs;
    it->psnr_mean += r.psnr_mean;
    it->mean_proximity += r.mean_proximity;
    it->hf_residual += r.hf_residual;
  }
  for (auto& s : out) {
    s.psnr_mean /= s.runs;
    s.mean_proximity /= s.runs;
    s.hf_residual /= s.runs;
  }
  return out;
}

std::string format_table(const std::vector<ModeSummary>& summary) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %5s %12s %15s %12s\n", "mode", "runs", "psnr_to_gt", "mean_proximity", "hf_residual");
  os << line;
  for (const auto& s : summary) {
    std::snprintf(line, sizeof line, "%-10s %5d %12.3f %15.4f %12.5f\n", s.mode.c_str(), s.runs, s.psnr_mean,
                  s.mean_proximity, s.hf_residual);
    os << line;
  }
  return os.str();
}

json ablation_json(const std::vector<MetricReport>& reports) {
  json runs = json::array();
  for (const auto& r : reports) runs.push_back(r.to_json());
  json modes = json::array();
  for (const auto& s : summarize_modes(reports))
    modes.push_back({{"mode", s.mode},
                     {"runs", s.runs},
                     {"psnr_to_gt", s.psnr_mean},
                     {"mean_proximity", s.mean_proximity},
                     {"hf_residual", s.hf_residual}});
  return {{"runs", runs}, {"modes", modes}};
}

}  // namespace sdsgan
