#include "alocc/fit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "alocc/errors.hpp"
#include "alocc/geometry.hpp"

namespace alocc::fit {

namespace {

using nlohmann::json;
using ng::Tensor;

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("config: bad field '") + key + "': " + e.what());
  }
}

Tensor uniform(ng::Shape shape, std::mt19937_64& rng, double half_width) {
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  std::vector<double> data(ng::shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

// Constant [F, F+1] embedding that copies a feature row and leaves the last
// column to the constant-one channel added alongside it. The extra channel
// lets the prototype products express a per-class bias, which in particular
// lets zero-feature voxels (nothing lifted into them) score as empty.
Tensor bias_embed(std::size_t f) {
  std::vector<double> data(f * (f + 1), 0.0);
  for (std::size_t i = 0; i < f; ++i) data[i * (f + 1) + i] = 1.0;
  return Tensor({f, f + 1}, std::move(data));
}

Tensor ones_column(std::size_t rows, std::size_t width) {
  std::vector<double> data(rows * width, 0.0);
  for (std::size_t r = 0; r < rows; ++r) data[r * width + width - 1] = 1.0;
  return Tensor({rows, width}, std::move(data));
}

// Cross-entropy between the predicted depth distribution and the rendered
// ground-truth bin weights, summed over pixels with valid ground truth.
// The sum (rather than a mean) keeps the per-pixel depth-logit gradients on
// the same scale as the shared-parameter gradients, which a single global
// step size has to serve. Only entries with positive target weight are
// gathered, so rows never meet log's positivity check with a structurally
// zero probability.
Tensor depth_ce(ng::Tape& tape, const Tensor& depth, const lift::GtDepthRows& gt) {
  const std::size_t pixels = depth.shape()[0];
  const std::size_t bins = depth.shape()[1];
  std::vector<std::int64_t> idx;
  std::vector<double> weights;
  for (std::size_t p = 0; p < pixels; ++p) {
    if (gt.valid[p] == 0.0) continue;
    for (std::size_t d = 0; d < bins; ++d) {
      const double w = gt.probs.at(p * bins + d);
      if (w <= 0.0) continue;
      idx.push_back(static_cast<std::int64_t>(p * bins + d));
      weights.push_back(-w);
    }
  }
  if (idx.empty()) return Tensor::scalar(0.0);
  const Tensor picked =
      tape.gather(depth.reshaped({pixels * bins}), idx);
  const Tensor weighted =
      tape.mul(tape.log(picked), Tensor({idx.size()}, std::move(weights)));
  return tape.sum(weighted);
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw DataError("config: not valid JSON");
  if (!j.is_object() || !j.contains("scene") || !j.at("scene").is_string())
    throw DataError("config: missing 'scene' path");

  RunConfig cfg;
  cfg.scene_path = j.at("scene").get<std::string>();
  cfg.feature_dim = field_or<std::size_t>(j, "feature_dim", cfg.feature_dim);
  cfg.hidden_dim = field_or<std::size_t>(j, "hidden_dim", cfg.hidden_dim);
  cfg.flow_hidden = field_or<std::size_t>(j, "flow_hidden", cfg.flow_hidden);
  cfg.inter_points = field_or<std::size_t>(j, "inter_points", cfg.inter_points);
  cfg.denoise_epochs =
      field_or<std::size_t>(j, "denoise_epochs", cfg.denoise_epochs);
  cfg.samples = field_or<std::size_t>(j, "samples", cfg.samples);
  cfg.sem_loss.dice_weight =
      field_or<double>(j, "dice_weight", cfg.sem_loss.dice_weight);
  cfg.sem_loss.bce_weight =
      field_or<double>(j, "bce_weight", cfg.sem_loss.bce_weight);
  if (j.contains("flow_bins")) {
    const json& b = j.at("flow_bins");
    cfg.flow_bins.lo = field_or<double>(b, "lo", cfg.flow_bins.lo);
    cfg.flow_bins.hi = field_or<double>(b, "hi", cfg.flow_bins.hi);
    cfg.flow_bins.count = field_or<std::size_t>(b, "count", cfg.flow_bins.count);
  }
  if (j.contains("bev")) {
    const json& b = j.at("bev");
    cfg.bev_z_min = field_or<double>(b, "z_min", cfg.bev_z_min);
    cfg.bev_z_max = field_or<double>(b, "z_max", cfg.bev_z_max);
    cfg.bev_factor = field_or<std::size_t>(b, "factor", cfg.bev_factor);
  }
  cfg.steps = field_or<std::size_t>(j, "steps", cfg.steps);
  cfg.lr = field_or<double>(j, "lr", cfg.lr);
  cfg.seed = field_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.out_dir = field_or<std::string>(j, "out", cfg.out_dir);
  cfg.denoise = field_or<bool>(j, "denoise", cfg.denoise);
  cfg.inter_object = field_or<bool>(j, "inter_object", cfg.inter_object);
  cfg.cost_volume = field_or<bool>(j, "cost_volume", cfg.cost_volume);

  const auto check = [](bool cond, const char* msg) {
    if (!cond) throw DataError(msg);
  };
  check(cfg.feature_dim >= 1, "config: feature_dim must be positive");
  check(cfg.hidden_dim >= 1 && cfg.flow_hidden >= 1,
        "config: hidden widths must be positive");
  check(cfg.inter_points >= 1, "config: inter_points must be positive");
  check(cfg.denoise_epochs >= 1, "config: denoise_epochs must be positive");
  check(cfg.samples >= 1, "config: samples must be positive");
  check(std::isfinite(cfg.lr) && cfg.lr >= 0.0,
        "config: lr must be non-negative");
  check(cfg.bev_z_max > cfg.bev_z_min,
        "config: bev z range must be increasing");
  check(cfg.bev_factor >= 1, "config: bev factor must be positive");
  cfg.flow_bins.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  RunConfig cfg = parse_config(buf.str());
  const std::filesystem::path scene(cfg.scene_path);
  if (scene.is_relative())
    cfg.scene_path = (std::filesystem::path(path).parent_path() / scene).string();
  return cfg;
}

Problem load_problem(const RunConfig& cfg) {
  Problem p;
  p.spec = scn::load_scene(cfg.scene_path);
  p.data = scn::generate(p.spec);

  for (const geo::CameraModel& cam : p.spec.cameras) p.pixels += cam.pixel_count();
  detail::require(cfg.inter_points <= p.spec.depth_bins.count,
                  "config: inter_points exceeds the depth bin count");

  for (int f = 0; f < 2; ++f) {
    const auto& labels = f == 0 ? p.data.labels_cur : p.data.labels_prev;
    p.frames[f].voxel_labels = labels;
    std::vector<double> depths;
    depths.reserve(p.pixels);
    for (const geo::CameraModel& cam : p.spec.cameras) {
      const scn::RenderedView view = scn::render_view(labels, p.spec.grid, cam);
      depths.insert(depths.end(), view.depth.begin(), view.depth.end());
      p.frames[f].pixel_labels.insert(p.frames[f].pixel_labels.end(),
                                      view.labels.begin(), view.labels.end());
    }
    p.frames[f].depth = lift::make_gt_depth(depths, p.spec.depth_bins);
  }

  p.bev_flow_gt = flow::pool_flow_gt(p.data.flow, p.spec.grid, cfg.bev_factor);
  p.flow_set = flow::flow_supervision_set(p.bev_flow_gt);
  for (const scn::SceneObject& obj : p.spec.objects)
    if (obj.vx != 0.0 || obj.vy != 0.0) p.dynamic_classes.push_back(obj.cls);
  std::sort(p.dynamic_classes.begin(), p.dynamic_classes.end());
  p.dynamic_classes.erase(
      std::unique(p.dynamic_classes.begin(), p.dynamic_classes.end()),
      p.dynamic_classes.end());
  return p;
}

std::vector<ng::Tensor*> Model::leaves() {
  return {&features[0],     &features[1],     &depth_logits[0],
          &depth_logits[1], &kernel_raw[0],   &kernel_raw[1],
          &du[0],           &du[1],           &dv[0],
          &dv[1],           &omega_raw[0],    &omega_raw[1],
          &bank.prototypes, &bank.w1,         &bank.b1,
          &bank.w2,         &bank.b2,         &flow.w_feat,
          &flow.w_cost,     &flow.b1,         &flow.w2,
          &flow.b2};
}

Model init_model(const RunConfig& cfg, const Problem& p) {
  std::mt19937_64 rng(cfg.seed);
  const std::size_t P = p.pixels;
  const std::size_t D = p.spec.depth_bins.count;
  const std::size_t F = cfg.feature_dim;
  const std::size_t C = p.spec.n_classes;
  const std::size_t m = cfg.inter_points;

  Model model;
  for (int f = 0; f < 2; ++f) {
    model.features[f] = uniform({P, F}, rng, 0.5);
    model.depth_logits[f] = uniform({P, D}, rng, 0.3);
    // Start the occlusion kernel mostly closed (sigmoid(-2) ~ 0.12): surfaces
    // initially project little mass behind themselves.
    Tensor jitter = uniform({P, D - 1}, rng, 0.1);
    for (double& v : jitter.mutable_data()) v += -2.0;
    model.kernel_raw[f] = std::move(jitter);
    model.du[f] = Tensor::zeros({P, m});
    model.dv[f] = Tensor::zeros({P, m});
    model.omega_raw[f] = Tensor::zeros({P, m});
  }
  model.bank.prototypes = uniform({C + 1, F + 1}, rng, 0.5);
  model.bank.w1 = uniform({F + 1, cfg.hidden_dim}, rng, 0.7);
  model.bank.b1 = Tensor::zeros({1, cfg.hidden_dim});
  model.bank.w2 = uniform({cfg.hidden_dim, F + 1}, rng, 0.5);
  model.bank.b2 = Tensor::zeros({1, F + 1});
  model.flow.w_feat = uniform({F + 1, cfg.flow_hidden}, rng, 0.3);
  model.flow.w_cost = uniform({9, cfg.flow_hidden}, rng, 0.3);
  model.flow.b1 = Tensor::zeros({1, cfg.flow_hidden});
  model.flow.w2 = uniform({cfg.flow_hidden, 2 * cfg.flow_bins.count}, rng, 0.3);
  model.flow.b2 = Tensor::zeros({1, 2 * cfg.flow_bins.count});
  return model;
}

StepLosses forward(ng::Tape& tape, const RunConfig& cfg, const Problem& p,
                   const Model& model, std::size_t step) {
  const geo::VoxelGridSpec& grid = p.spec.grid;
  const std::size_t V = grid.voxel_count();
  const std::size_t P = p.pixels;
  const std::size_t D = p.spec.depth_bins.count;
  const std::size_t F = cfg.feature_dim;
  const std::size_t C = p.spec.n_classes;
  const std::size_t width = C + 1;  // logit columns: classes plus empty

  StepLosses out;
  Model live = model;
  for (ng::Tensor* t : live.leaves()) {
    *t = tape.leaf(*t);
    out.leaf_nodes.push_back(t->node());
  }

  const lift::DenoiseSchedule sched{cfg.denoise_epochs};
  out.denoise_weight = cfg.denoise ? sched.weight(step) : 0.0;

  const Tensor embed = bias_embed(F);
  const Tensor ones_col = ones_column(P, F + 1);
  const Tensor mapped = sem::mapped_prototypes(tape, live.bank);

  Tensor f_vox[2];
  Tensor sem_loss[2];
  for (int f = 0; f < 2; ++f) {
    const FrameTruth& truth = p.frames[f];
    const Tensor depth = tape.softmax_lastdim(live.depth_logits[f]);
    Tensor used = depth;
    if (cfg.denoise)
      used = lift::blend_denoise(tape, depth, truth.depth.probs, sched, step,
                                 &truth.depth.valid);
    // Disabling the inter-object path also pins the occlusion kernel to
    // zero, so the transfer matrix degenerates to plain surface splatting.
    const Tensor kernel = cfg.inter_object
                              ? tape.sigmoid(live.kernel_raw[f])
                              : Tensor::zeros({P, D - 1});
    const Tensor occluded = lift::depth_to_occluded(tape, used, kernel);

    lift::InterObjectTransfer inter;
    const lift::InterObjectTransfer* inter_ptr = nullptr;
    if (cfg.inter_object) {
      inter.du = live.du[f];
      inter.dv = live.dv[f];
      inter.omega = tape.sigmoid(live.omega_raw[f]);
      inter.bins = lift::select_top_bins(occluded, cfg.inter_points);
      inter.per_pixel = cfg.inter_points;
      inter_ptr = &inter;
    }
    const lift::SparseTransferMatrix transfer = lift::build_transfer_matrix(
        tape, occluded, p.spec.cameras, grid, p.spec.depth_bins, inter_ptr);

    const Tensor f_aug =
        tape.add(tape.matmul(live.features[f], embed), ones_col);
    f_vox[f] = lift::apply_lift(tape, transfer, f_aug);

    const Tensor logits3d = sem::class_logits(tape, mapped, f_vox[f]);
    const Tensor logits2d = sem::class_logits(tape, mapped, f_aug);

    const std::size_t k = std::min(cfg.samples, V);
    const std::vector<std::int64_t> picked = sem::uncertainty_sample(
        logits3d, sem::inverse_frequency_prior(truth.voxel_labels, C), k,
        cfg.seed + 2 * step + static_cast<std::size_t>(f));
    std::vector<std::int64_t> flat;
    flat.reserve(k * width);
    std::vector<std::uint8_t> sub_labels(k);
    for (std::size_t i = 0; i < k; ++i) {
      const auto r = static_cast<std::size_t>(picked[i]);
      sub_labels[i] = truth.voxel_labels[r];
      for (std::size_t c = 0; c < width; ++c)
        flat.push_back(static_cast<std::int64_t>(r * width + c));
    }
    const Tensor rows =
        tape.gather(logits3d.reshaped({V * width}), flat).reshaped({k, width});

    const Tensor l3 = sem::dice_bce_loss(tape, rows, sub_labels, C, cfg.sem_loss);
    const Tensor l2 =
        sem::dice_bce_loss(tape, logits2d, truth.pixel_labels, C, cfg.sem_loss);
    const Tensor ld = depth_ce(tape, depth, truth.depth);
    sem_loss[f] = tape.add(l3, tape.add(l2, ld));

    if (f == 0) out.pred_labels = sem::infer_labels(logits3d, C);
  }

  const Tensor bev_cur = flow::collapse_bev(tape, f_vox[0], grid, cfg.bev_z_min,
                                            cfg.bev_z_max, cfg.bev_factor);
  const Tensor bev_prev = flow::collapse_bev(tape, f_vox[1], grid, cfg.bev_z_min,
                                             cfg.bev_z_max, cfg.bev_factor);
  const Tensor warped =
      geo::warp_bev(tape, bev_prev, p.spec.ego, grid, cfg.bev_factor);
  const auto bd = geo::bev_dims(grid, cfg.bev_factor);
  const std::size_t cells = bd[0] * bd[1];
  out.cost = cfg.cost_volume ? flow::cost_volume(tape, bev_cur, warped)
                             : Tensor::zeros({cells, 9});
  const flow::FlowDecode dec =
      flow::decode_flow(tape, bev_cur.reshaped({cells, F + 1}), out.cost,
                        live.flow, cfg.flow_bins);
  const Tensor flow_gt(ng::Shape{cells, 2},
                       std::vector<double>(p.bev_flow_gt.begin(),
                                           p.bev_flow_gt.end()));
  const Tensor flow_loss =
      tape.add(flow::flow_reg_loss(tape, dec.flow, flow_gt, p.flow_set),
               flow::flow_cls_loss(tape, dec.prob_x, dec.prob_y, flow_gt,
                                   cfg.flow_bins, p.flow_set));

  out.sem = tape.add(sem_loss[0], sem_loss[1]);
  out.total = tape.add(out.sem, flow_loss);
  out.sem_cur = sem_loss[0].scalar_value();
  out.sem_prev = sem_loss[1].scalar_value();
  out.flow = flow_loss.scalar_value();

  out.pred_flow.assign(V * 2, 0.0);
  for (std::size_t h = 0; h < grid.dims[0]; ++h) {
    for (std::size_t w = 0; w < grid.dims[1]; ++w) {
      const std::size_t cell = (h / cfg.bev_factor) * bd[1] + w / cfg.bev_factor;
      for (std::size_t z = 0; z < grid.dims[2]; ++z) {
        const std::size_t v = grid.flatten(h, w, z);
        out.pred_flow[2 * v] = dec.flow.at(cell * 2);
        out.pred_flow[2 * v + 1] = dec.flow.at(cell * 2 + 1);
      }
    }
  }
  return out;
}

FitResult run_fit(const RunConfig& cfg, const Problem& p) {
  FitResult res;
  res.model = init_model(cfg, p);

  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    ng::Tape tape;
    StepLosses losses;
    try {
      losses = forward(tape, cfg, p, res.model, step);
      res.losses.push_back(losses.total.scalar_value());
      res.denoise_weights.push_back(losses.denoise_weight);
      if (step == cfg.steps) {
        res.pred_labels = std::move(losses.pred_labels);
        res.pred_flow = std::move(losses.pred_flow);
        break;
      }
      const auto grads = tape.backward(losses.total);
      const std::vector<ng::Tensor*> params = res.model.leaves();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& g = grads.at(losses.leaf_nodes[i]);
        Tensor next = *params[i];
        auto data = next.mutable_data();
        for (std::size_t e = 0; e < data.size(); ++e)
          data[e] -= cfg.lr * g.at(e);
        next.check_finite("gradient step");
        *params[i] = std::move(next);
      }
    } catch (const NumericError& e) {
      throw NumericError("fit stopped at step " + std::to_string(step) + ": " +
                         e.what());
    }
  }
  return res;
}

}  // namespace alocc::fit
