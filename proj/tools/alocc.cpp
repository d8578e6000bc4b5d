// Command-line front end. Three subcommands share one config dialect:
//
//   alocc gen  --config run.json [--out DIR]          scene ground truth
//   alocc fit  --config run.json [--out DIR] ...      gradient-descent fit
//   alocc eval --config run.json [--out DIR]          metric report + plots
//
// `gen` voxelizes the scene and writes the ground-truth grids. `fit` trains
// the lifting/semantic/flow parameters and writes the loss trace, learned
// tensors, predicted grids, and a matching-cost plot. `eval` compares the
// predicted grids against the ground truth in the same directory and writes
// a metric report plus label/flow maps.
//
// Exit codes: 0 success, 1 usage error, 2 bad data or violated contract,
// 3 non-finite numerics (diverged fit).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "alocc/errors.hpp"
#include "alocc/fit.hpp"
#include "alocc/geometry.hpp"
#include "alocc/io.hpp"
#include "alocc/metrics.hpp"
#include "alocc/tape.hpp"
#include "svg_heatmap.hpp"

namespace {

using namespace alocc;
namespace fs = std::filesystem;

struct CliOverrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  bool no_denoise = false;
  bool no_inter_object = false;
  bool no_cost_volume = false;
};

void add_common_options(CLI::App* cmd, CliOverrides* o) {
  cmd->add_option("--config", o->config_path, "run configuration file")
      ->required();
  cmd->add_option("--seed", o->seed, "override the config seed");
  cmd->add_option("--out", o->out, "override the output directory");
  cmd->add_option("--steps", o->steps, "override the gradient step count");
  cmd->add_option("--lr", o->lr, "override the gradient step size");
  cmd->add_flag("--no-denoise", o->no_denoise,
                "disable ground-truth depth annealing");
  cmd->add_flag("--no-inter-object", o->no_inter_object,
                "disable the occlusion kernel and surface re-projection");
  cmd->add_flag("--no-cost-volume", o->no_cost_volume,
                "feed the flow decoder zero matching costs");
}

fit::RunConfig resolve_config(const CliOverrides& o) {
  fit::RunConfig cfg = fit::load_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.steps) cfg.steps = *o.steps;
  if (o.lr) {
    if (!(std::isfinite(*o.lr) && *o.lr >= 0.0))
      throw DataError("config: lr must be non-negative");
    cfg.lr = *o.lr;
  }
  if (o.no_denoise) cfg.denoise = false;
  if (o.no_inter_object) cfg.inter_object = false;
  if (o.no_cost_volume) cfg.cost_volume = false;
  return cfg;
}

fs::path prepare_out_dir(const fit::RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output dir '" + cfg.out_dir + "'");
  return dir;
}

std::size_t occupied_count(const std::vector<std::uint8_t>& labels) {
  std::size_t n = 0;
  for (std::uint8_t l : labels)
    if (l != 255) ++n;
  return n;
}

int cmd_gen(const CliOverrides& o) {
  const fit::RunConfig cfg = resolve_config(o);
  const fit::Problem p = fit::load_problem(cfg);
  const fs::path dir = prepare_out_dir(cfg);

  io::write_labels((dir / "gt_labels.ocgr").string(), p.spec.grid.dims,
                   p.data.labels_cur);
  io::write_labels((dir / "gt_labels_prev.ocgr").string(), p.spec.grid.dims,
                   p.data.labels_prev);
  io::write_flow((dir / "gt_flow.ocgr").string(), p.spec.grid.dims,
                 p.data.flow);
  svg::write_label_bev((dir / "gt_labels.svg").string(), p.spec.grid,
                       p.data.labels_cur);

  std::cout << "scene " << cfg.scene_path << ": "
            << occupied_count(p.data.labels_cur) << " of "
            << p.spec.grid.voxel_count() << " voxels occupied, " << p.pixels
            << " camera pixels\n";
  return 0;
}

// Leaf names in Model::leaves() order, used for the parameter dumps.
std::vector<std::string> leaf_names() {
  return {"features0",   "features1",   "depth_logits0", "depth_logits1",
          "kernel_raw0", "kernel_raw1", "du0",           "du1",
          "dv0",         "dv1",         "omega_raw0",    "omega_raw1",
          "prototypes",  "map_w1",      "map_b1",        "map_w2",
          "map_b2",      "flow_w_feat", "flow_w_cost",   "flow_b1",
          "flow_w2",     "flow_b2"};
}

int cmd_fit(const CliOverrides& o) {
  const fit::RunConfig cfg = resolve_config(o);
  const fit::Problem p = fit::load_problem(cfg);
  const fs::path dir = prepare_out_dir(cfg);

  const fit::FitResult r = fit::run_fit(cfg, p);

  std::ofstream trace((dir / "loss.tsv").string(), std::ios::trunc);
  if (!trace) throw DataError("cannot write loss trace");
  trace.precision(std::numeric_limits<double>::max_digits10);
  trace << "step\tloss\tdenoise_weight\n";
  for (std::size_t k = 0; k < r.losses.size(); ++k)
    trace << k << '\t' << r.losses[k] << '\t' << r.denoise_weights[k] << '\n';

  io::write_labels((dir / "pred_labels.ocgr").string(), p.spec.grid.dims,
                   r.pred_labels);
  io::write_flow((dir / "pred_flow.ocgr").string(), p.spec.grid.dims,
                 r.pred_flow);

  fit::Model model = r.model;
  const std::vector<ng::Tensor*> leaves = model.leaves();
  const std::vector<std::string> names = leaf_names();
  detail::require(leaves.size() == names.size(),
                  "parameter dump: leaf name list out of date");
  const fs::path params = dir / "params";
  std::error_code ec;
  fs::create_directories(params, ec);
  if (ec) throw DataError("cannot create parameter dir");
  for (std::size_t i = 0; i < leaves.size(); ++i)
    io::write_tensor((params / (names[i] + ".oclt")).string(), *leaves[i]);

  // One extra objective evaluation at the final parameters supplies the
  // converged matching costs for the plot.
  ng::Tape tape;
  const fit::StepLosses last = fit::forward(tape, cfg, p, model, cfg.steps);
  const auto bev = geo::bev_dims(p.spec.grid, cfg.bev_factor);
  svg::write_cost_panels((dir / "cost_volume.svg").string(), bev[0], bev[1],
                         last.cost);
  svg::write_label_bev((dir / "pred_labels.svg").string(), p.spec.grid,
                       r.pred_labels);

  std::cout << "fit " << cfg.scene_path << ": " << cfg.steps << " steps, loss "
            << r.losses.front() << " -> " << r.losses.back() << "\n";
  return 0;
}

int cmd_eval(const CliOverrides& o) {
  const fit::RunConfig cfg = resolve_config(o);
  const fit::Problem p = fit::load_problem(cfg);
  const fs::path dir = prepare_out_dir(cfg);

  const auto read_grid_checked = [&](const char* name, std::uint32_t kind) {
    const io::GridFile g = io::read_grid((dir / name).string());
    if (g.kind != kind)
      throw DataError(std::string("eval: '") + name + "' holds the wrong payload kind");
    if (g.dims != p.spec.grid.dims)
      throw DataError(std::string("eval: '") + name +
                      "' dimensions do not match the scene grid");
    return g;
  };
  const io::GridFile gt_labels = read_grid_checked("gt_labels.ocgr", io::kGridLabels);
  const io::GridFile gt_flow = read_grid_checked("gt_flow.ocgr", io::kGridFlow);
  const io::GridFile pred_labels =
      read_grid_checked("pred_labels.ocgr", io::kGridLabels);
  const io::GridFile pred_flow =
      read_grid_checked("pred_flow.ocgr", io::kGridFlow);

  std::vector<std::uint8_t> all_classes;
  for (std::uint8_t c = 0; c < p.spec.n_classes; ++c) all_classes.push_back(c);

  met::Report report;
  report.miou_all = met::miou(pred_labels.labels, gt_labels.labels, all_classes);
  report.has_dynamic = !p.dynamic_classes.empty();
  if (report.has_dynamic)
    report.miou_dynamic =
        met::miou(pred_labels.labels, gt_labels.labels, p.dynamic_classes);

  report.thresholds = {1.0, 2.0, 4.0};
  const met::RayQuerySet rays = met::camera_rays(p.spec.cameras);
  report.ray = met::ray_iou(pred_labels.labels, gt_labels.labels, p.spec.grid,
                            rays, p.spec.n_classes, report.thresholds);

  if (report.has_dynamic) {
    report.has_mave = true;
    report.mave_all = met::mave(pred_flow.flow, gt_flow.flow, gt_labels.labels,
                                p.dynamic_classes, nullptr);
    // TP voxels at the middle (2 m) threshold gate the velocity part of the
    // composite score; the gate can be empty when no dynamic ray matches.
    const std::vector<bool>& gate = report.ray.tp_voxels[1];
    bool any = false;
    for (std::size_t v = 0; v < gate.size() && !any; ++v)
      any = gate[v] && p.dynamic_classes.end() !=
                           std::find(p.dynamic_classes.begin(),
                                     p.dynamic_classes.end(),
                                     gt_labels.labels[v]);
    if (any) {
      report.has_mave_tp = true;
      report.mave_tp = met::mave(pred_flow.flow, gt_flow.flow,
                                 gt_labels.labels, p.dynamic_classes, &gate);
      report.occ = met::occ_score(100.0 * report.ray.mean, report.mave_tp);
    }
  }

  std::ofstream out((dir / "report.txt").string(), std::ios::trunc);
  if (!out) throw DataError("cannot write report");
  met::write_report(out, report);
  met::write_report(std::cout, report);

  svg::write_label_bev((dir / "gt_labels.svg").string(), p.spec.grid,
                       gt_labels.labels);
  svg::write_label_bev((dir / "pred_labels.svg").string(), p.spec.grid,
                       pred_labels.labels);
  svg::write_flow_bev((dir / "gt_flow.svg").string(), p.spec.grid,
                      gt_flow.flow);
  svg::write_flow_bev((dir / "pred_flow.svg").string(), p.spec.grid,
                      pred_flow.flow);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Occupancy and occupancy-flow toy pipeline"};
  app.require_subcommand(1);

  CliOverrides gen_opts, fit_opts, eval_opts;
  CLI::App* gen = app.add_subcommand("gen", "write scene ground truth grids");
  add_common_options(gen, &gen_opts);
  CLI::App* fit_cmd = app.add_subcommand("fit", "run the gradient-descent fit");
  add_common_options(fit_cmd, &fit_opts);
  CLI::App* eval = app.add_subcommand("eval", "score predictions and plot");
  add_common_options(eval, &eval_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage or help text
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_opts);
    if (fit_cmd->parsed()) return cmd_fit(fit_opts);
    return cmd_eval(eval_opts);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
