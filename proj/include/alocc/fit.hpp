#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alocc/flowhead.hpp"
#include "alocc/lifting.hpp"
#include "alocc/scenes.hpp"
#include "alocc/semhead.hpp"
#include "alocc/tape.hpp"

namespace alocc::fit {

// Everything a run needs beyond the scene itself. Loaded from the same JSON
// dialect as scene files; every field except the scene path has a default.
struct RunConfig {
  std::string scene_path;

  std::size_t feature_dim = 8;     // pixel feature channels (before the bias)
  std::size_t hidden_dim = 16;     // prototype map hidden width
  std::size_t flow_hidden = 16;    // flow decoder hidden width
  std::size_t inter_points = 3;    // re-projected surface points per pixel
  std::size_t denoise_epochs = 6;  // ground-truth depth annealing horizon
  std::size_t samples = 25088;     // supervised voxels per step, clamped to
                                   // the grid size
  sem::SemanticLossParams sem_loss;
  flow::FlowBinSpec flow_bins;

  double bev_z_min = 0.0;   // height slab collapsed into the top-down map
  double bev_z_max = 4.0;
  std::size_t bev_factor = 2;

  std::size_t steps = 200;
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  bool denoise = true;
  bool inter_object = true;  // also controls the occlusion kernel: disabling
                             // pins the kernel to zero
  bool cost_volume = true;
};

// Throw DataError on malformed JSON or missing scene path. load_config
// resolves a relative scene path against the config file's directory.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

// Scene-derived constants of the optimization problem: the voxelized frames
// plus per-pixel ground truth rendered from them. Index 0 is the current
// frame, 1 the previous one.
struct FrameTruth {
  std::vector<std::uint8_t> voxel_labels;
  std::vector<std::uint8_t> pixel_labels;  // rendered class per pixel
  lift::GtDepthRows depth;                 // rendered depth, binned
};

struct Problem {
  scn::SceneSpec spec;
  scn::SceneData data;
  FrameTruth frames[2];
  std::vector<double> bev_flow_gt;          // pooled to BEV resolution
  std::vector<std::int64_t> flow_set;       // supervised BEV cells
  std::vector<std::uint8_t> dynamic_classes;  // classes of moving objects
  std::size_t pixels = 0;                   // total across cameras
};

Problem load_problem(const RunConfig& cfg);

// Learnable state, stored as plain value tensors between steps. Index 0/1 as
// in Problem. The prototype bank and flow decoder are shared across frames.
struct Model {
  ng::Tensor features[2];      // [P, F]
  ng::Tensor depth_logits[2];  // [P, D]
  ng::Tensor kernel_raw[2];    // [P, D-1], sigmoid-squashed before use
  ng::Tensor du[2], dv[2];     // [P, m] pixel displacements
  ng::Tensor omega_raw[2];     // [P, m], sigmoid-squashed before use
  sem::PrototypeBank bank;     // feature dim F+1 (constant bias channel)
  flow::FlowHeadWeights flow;

  std::vector<ng::Tensor*> leaves();
};

Model init_model(const RunConfig& cfg, const Problem& p);

// One assembled objective evaluation. The leaves registered on `tape` mirror
// Model::leaves() order, so gradients can be read back positionally.
struct StepLosses {
  ng::Tensor total;      // scalar root
  ng::Tensor sem;        // scalar: both frames' semantic losses, no flow term
  double sem_cur = 0.0;
  double sem_prev = 0.0;
  double flow = 0.0;
  double denoise_weight = 0.0;
  std::vector<int> leaf_nodes;            // node id per leaf
  std::vector<std::uint8_t> pred_labels;  // argmax voxel classes, current frame
  std::vector<double> pred_flow;          // [V*2], decoder output broadcast
                                          // to every voxel of the BEV column
  ng::Tensor cost;                        // [N, 9] matching costs (current)
};

StepLosses forward(ng::Tape& tape, const RunConfig& cfg, const Problem& p,
                   const Model& model, std::size_t step);

// Plain gradient descent for cfg.steps steps. losses[k] is the objective
// before the k-th update; the trailing entry is the post-training value, so
// the trace has steps + 1 entries. Throws NumericError tagged with the step
// index if the objective or a gradient turns non-finite.
struct FitResult {
  std::vector<double> losses;
  std::vector<double> denoise_weights;
  std::vector<std::uint8_t> pred_labels;
  std::vector<double> pred_flow;
  Model model;
};

FitResult run_fit(const RunConfig& cfg, const Problem& p);

}  // namespace alocc::fit
