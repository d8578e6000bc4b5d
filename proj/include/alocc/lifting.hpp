#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "alocc/geometry.hpp"
#include "alocc/tape.hpp"
#include "alocc/tensor.hpp"

namespace alocc::lift {

// One corner of the interpolation cube around a continuous lattice point.
struct Corner {
  std::array<std::int64_t, 3> index;
  double weight;
};

// The 8 lattice corners around p with their trilinear weights. Weights are
// nonnegative and sum to exactly 1; corners outside a grid are the caller's
// responsibility to drop (their mass is then discarded).
std::array<Corner, 8> trilinear_weights(const geo::Vec3& p);

// Cosine annealing horizon for ground-truth depth blending: the ground truth
// carries full weight at step 0 and none from total_steps onward.
struct DenoiseSchedule {
  std::size_t total_steps = 0;

  // (1 + cos(pi * step / total_steps)) / 2, clamped to 0 past the horizon.
  double weight(std::size_t step) const;
};

// Mixes predicted and ground-truth depth distributions row by row:
// out = w * gt + (1 - w) * pred, with w = schedule.weight(step) masked to 0 on
// rows without valid ground truth (those rows pass the prediction through).
// Rows of pred and gt must each sum to 1 on valid rows.
ng::Tensor blend_denoise(ng::Tape& tape, const ng::Tensor& pred, const ng::Tensor& gt,
                         const DenoiseSchedule& schedule, std::size_t step,
                         const std::vector<double>* valid_rows = nullptr);

// Per-pixel ground-truth depth distributions from rendered depth values.
// Non-finite depths (rays that hit nothing) produce an all-zero row and a 0
// validity flag.
struct GtDepthRows {
  ng::Tensor probs;           // [P, D]
  std::vector<double> valid;  // [P], 1.0 where depth ground truth exists
};
GtDepthRows make_gt_depth(const std::vector<double>& pixel_depths,
                          const geo::DepthBinSpec& bins);

// Transfers per-bin surface probability to the bins behind it:
// out[p, j] = depth[p, j] + sum_{i<j} kernel[p, j-i-1] * depth[p, i].
// This equals multiplying each row by a unit-diagonal, upper-triangular
// band matrix whose off-diagonals depend only on the bin gap, so the output
// is not a distribution: entries can exceed the row's surface mass.
// depth is [P, D] with rows summing to 1; kernel is [P, D-1] with values in
// [0, 1]. Differentiable w.r.t. both.
ng::Tensor depth_to_occluded(ng::Tape& tape, const ng::Tensor& depth,
                             const ng::Tensor& kernel);

// Per-pixel indices of the m most probable depth bins, descending by
// probability with ties broken toward the lower bin index.
std::vector<std::int64_t> select_top_bins(const ng::Tensor& depth, std::size_t m);

// Learnable re-projection of high-probability surface points: each selected
// bin spawns a source point displaced by (du, dv) pixels whose lifted mass is
// scaled by omega in [0, 1]. All three are tape tensors of shape [P, m];
// `bins` holds the selected bin per (pixel, slot).
struct InterObjectTransfer {
  ng::Tensor du;
  ng::Tensor dv;
  ng::Tensor omega;
  std::vector<std::int64_t> bins;  // P * m entries, each in [0, D)
  std::size_t per_pixel = 0;       // m
};

// Sparse lifting operator from pixels to voxels. Triplets are unique,
// sorted by (row, col); values live on the tape so gradients reach both the
// depth path and any learnable offsets behind them.
struct SparseTransferMatrix {
  std::vector<std::uint64_t> rows;  // flattened voxel index per entry
  std::vector<std::uint64_t> cols;  // flattened pixel index per entry
  ng::Tensor values;                // [nnz]
  std::size_t n_rows = 0;           // voxel count
  std::size_t n_cols = 0;           // pixel count
};

// Builds the lifting matrix for a camera rig over a voxel grid. `occluded` is
// the [P, D] occluded-form distribution (P = total pixels across cameras, in
// camera order, row-major within each image). Every (pixel, bin) deposits its
// probability onto the 8 voxels around its back-projection; corners falling
// outside the grid are dropped. With `inter`, each selected bin additionally
// deposits omega-weighted mass at the displaced re-projection, which makes the
// matrix values differentiable w.r.t. the displacements as well.
SparseTransferMatrix build_transfer_matrix(ng::Tape& tape, const ng::Tensor& occluded,
                                           const std::vector<geo::CameraModel>& cams,
                                           const geo::VoxelGridSpec& grid,
                                           const geo::DepthBinSpec& bins,
                                           const InterObjectTransfer* inter = nullptr);

// lifted = M * features: [V, F] from [P, F]. Differentiable w.r.t. both the
// matrix values and the features.
ng::Tensor apply_lift(ng::Tape& tape, const SparseTransferMatrix& m,
                      const ng::Tensor& features);

}  // namespace alocc::lift
