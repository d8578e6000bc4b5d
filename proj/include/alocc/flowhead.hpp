#pragma once

#include <cstdint>
#include <vector>

#include "alocc/geometry.hpp"
#include "alocc/tape.hpp"

namespace alocc::flow {

// Mean over the voxels whose center height lies in [z_min, z_max), then
// average pooling by `factor` in the ground plane. voxel_features is
// [H*W*Z, C] in the grid's flat order; the result is [H/factor, W/factor, C].
ng::Tensor collapse_bev(ng::Tape& tape, const ng::Tensor& voxel_features,
                        const geo::VoxelGridSpec& grid, double z_min, double z_max,
                        std::size_t factor);

// Cosine similarity between each cell of `cur` and the 3x3 neighborhood of
// the same cell in `prev`, both [H', W', C]. Column k holds the offset
// (dh, dw) = (k / 3 - 1, k % 3 - 1); neighborhoods reaching outside the map
// compare against a zero row, which the cosine defines as exactly 0.
// Result is [H'*W', 9].
ng::Tensor cost_volume(ng::Tape& tape, const ng::Tensor& cur, const ng::Tensor& prev);

// Per-axis displacement bins. Bin n covers values nearest to
// lo + (n + 0.5) * (hi - lo) / count.
struct FlowBinSpec {
  double lo = -10.0;
  double hi = 10.0;
  std::size_t count = 16;

  void validate() const;
  std::vector<double> centers() const;
};

// Index of the center closest to `value`; midpoints resolve to the lower bin,
// values beyond the range to the edge bins.
std::size_t nearest_bin(double value, const FlowBinSpec& spec);

// Two-stage decoder. The first stage mixes appearance and matching evidence
// through split weight blocks (one per input, summed before the bias), the
// second produces one bin distribution per axis.
struct FlowHeadWeights {
  ng::Tensor w_feat;  // [C, hidden]
  ng::Tensor w_cost;  // [9, hidden]
  ng::Tensor b1;      // [1, hidden]
  ng::Tensor w2;      // [hidden, 2*count]
  ng::Tensor b2;      // [1, 2*count]
};

struct FlowDecode {
  ng::Tensor prob_x;  // [N, count]
  ng::Tensor prob_y;  // [N, count]
  ng::Tensor flow;    // [N, 2], per-axis expectation over the bin centers
};

FlowDecode decode_flow(ng::Tape& tape, const ng::Tensor& bev, const ng::Tensor& cost,
                       const FlowHeadWeights& weights, const FlowBinSpec& bins);

// Cells entering the flow losses: every cell with nonzero ground-truth flow
// plus an equal count of still cells (lowest indices first). When nothing
// moves, every cell contributes. gt_flow is [N*2] interleaved (x, y).
std::vector<std::int64_t> flow_supervision_set(const std::vector<double>& gt_flow);

// mean over the set of ||pred - gt||^2 - cos(pred, gt); the cosine term is 0
// when either vector is (near) zero. gt_flow is a constant [N, 2] tensor.
ng::Tensor flow_reg_loss(ng::Tape& tape, const ng::Tensor& flow,
                         const ng::Tensor& gt_flow,
                         const std::vector<std::int64_t>& set);

// Cross-entropy of each axis distribution against the bin nearest the
// ground-truth displacement, averaged over the set and both axes.
ng::Tensor flow_cls_loss(ng::Tape& tape, const ng::Tensor& prob_x,
                         const ng::Tensor& prob_y, const ng::Tensor& gt_flow,
                         const FlowBinSpec& bins,
                         const std::vector<std::int64_t>& set);

// Ground-truth flow at pooled resolution: each BEV cell takes the flow of the
// first moving voxel (ascending flat order) inside its footprint, or zero.
// voxel_flow is [H*W*Z*2] interleaved; the result is [(H/f)*(W/f)*2].
std::vector<double> pool_flow_gt(const std::vector<double>& voxel_flow,
                                 const geo::VoxelGridSpec& grid, std::size_t factor);

}  // namespace alocc::flow
