#include "alocc/lifting.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace alocc::lift {

namespace {

constexpr double kRowSumTol = 1e-9;
constexpr double kUnitRangeTol = 1e-12;

void check_rows_sum_to_one(const ng::Tensor& t, const std::vector<double>* valid,
                           const char* what) {
  const std::size_t width = t.shape().back();
  const std::size_t rows = t.numel() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    if (valid && (*valid)[r] == 0.0) continue;
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      const double v = t.data()[r * width + c];
      detail::require(v >= -kUnitRangeTol, std::string(what) + ": negative probability");
      total += v;
    }
    detail::require(std::abs(total - 1.0) <= kRowSumTol,
                    std::string(what) + ": row " + std::to_string(r) +
                        " sums to " + std::to_string(total) + ", expected 1");
  }
}

// One candidate entry of the transfer matrix before merging.
struct Emission {
  std::uint64_t row;
  std::uint64_t col;
  std::size_t source;  // index into the stream's weight tensor
};

}  // namespace

std::array<Corner, 8> trilinear_weights(const geo::Vec3& p) {
  const double coords[3] = {p.x, p.y, p.z};
  double base[3], frac[3];
  for (int a = 0; a < 3; ++a) {
    base[a] = std::floor(coords[a]);
    frac[a] = coords[a] - base[a];
  }
  std::array<Corner, 8> out;
  for (int s = 0; s < 8; ++s) {
    const bool hi[3] = {(s & 4) != 0, (s & 2) != 0, (s & 1) != 0};
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
      w *= hi[a] ? frac[a] : (1.0 - frac[a]);
      out[static_cast<std::size_t>(s)].index[static_cast<std::size_t>(a)] =
          static_cast<std::int64_t>(base[a]) + (hi[a] ? 1 : 0);
    }
    out[static_cast<std::size_t>(s)].weight = w;
  }
  return out;
}

double DenoiseSchedule::weight(std::size_t step) const {
  detail::require(total_steps > 0, "denoise schedule: horizon must be positive");
  if (step >= total_steps) return 0.0;
  const double phase =
      std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return (1.0 + std::cos(phase)) / 2.0;
}

ng::Tensor blend_denoise(ng::Tape& tape, const ng::Tensor& pred, const ng::Tensor& gt,
                         const DenoiseSchedule& schedule, std::size_t step,
                         const std::vector<double>* valid_rows) {
  detail::require(pred.shape().size() == 2, "blend_denoise: pred must be [P, D]");
  detail::require(ng::shape_eq(pred.shape(), gt.shape()),
                  "blend_denoise: pred and gt shapes differ");
  const std::size_t rows = pred.shape()[0];
  if (valid_rows)
    detail::require(valid_rows->size() == rows,
                    "blend_denoise: validity mask size does not match row count");
  check_rows_sum_to_one(pred, nullptr, "blend_denoise pred");
  check_rows_sum_to_one(gt, valid_rows, "blend_denoise gt");

  const double w = schedule.weight(step);
  std::vector<double> w_gt(rows), w_pred(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double wr = valid_rows ? w * (*valid_rows)[r] : w;
    w_gt[r] = wr;
    w_pred[r] = 1.0 - wr;
  }
  const ng::Tensor gt_scale({rows, 1}, std::move(w_gt));
  const ng::Tensor pred_scale({rows, 1}, std::move(w_pred));
  return tape.add(tape.mul(gt, gt_scale), tape.mul(pred, pred_scale));
}

GtDepthRows make_gt_depth(const std::vector<double>& pixel_depths,
                          const geo::DepthBinSpec& bins) {
  bins.validate();
  const std::size_t pixels = pixel_depths.size();
  GtDepthRows out;
  out.valid.assign(pixels, 0.0);
  std::vector<double> probs(pixels * bins.count, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    if (!std::isfinite(pixel_depths[p])) continue;
    out.valid[p] = 1.0;
    for (const auto& bw : geo::depth_to_bin_weights(bins, pixel_depths[p]))
      probs[p * bins.count + bw.bin] = bw.weight;
  }
  out.probs = ng::Tensor({pixels, bins.count}, std::move(probs));
  return out;
}

ng::Tensor depth_to_occluded(ng::Tape& tape, const ng::Tensor& depth,
                             const ng::Tensor& kernel) {
  detail::require(depth.shape().size() == 2, "depth_to_occluded: depth must be [P, D]");
  const std::size_t pixels = depth.shape()[0];
  const std::size_t d = depth.shape()[1];
  detail::require(kernel.shape().size() == 2 && kernel.shape()[0] == pixels &&
                      kernel.shape()[1] == d - 1,
                  "depth_to_occluded: kernel must be [P, D-1]");
  check_rows_sum_to_one(depth, nullptr, "depth_to_occluded depth");
  for (double v : kernel.data())
    detail::require(v >= -kUnitRangeTol && v <= 1.0 + kUnitRangeTol,
                    "depth_to_occluded: kernel values must lie in [0, 1]");
  if (d == 1) return depth;  // no bins behind the only bin

  // Band product in flat index space: for every gap, bin i feeds bin i+gap
  // scaled by the pixel's kernel value for that gap.
  const std::size_t terms = pixels * d * (d - 1) / 2;
  std::vector<std::int64_t> src_idx, ker_idx, dst_idx;
  src_idx.reserve(terms);
  ker_idx.reserve(terms);
  dst_idx.reserve(terms);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t gap = 1; gap < d; ++gap) {
      for (std::size_t i = 0; i + gap < d; ++i) {
        src_idx.push_back(static_cast<std::int64_t>(p * d + i));
        ker_idx.push_back(static_cast<std::int64_t>(p * (d - 1) + gap - 1));
        dst_idx.push_back(static_cast<std::int64_t>(p * d + i + gap));
      }
    }
  }
  const ng::Tensor depth_flat = depth.reshaped({pixels * d});
  const ng::Tensor kernel_flat = kernel.reshaped({pixels * (d - 1)});
  const ng::Tensor surface = tape.gather(depth_flat, src_idx);
  const ng::Tensor gain = tape.gather(kernel_flat, ker_idx);
  const ng::Tensor spread =
      tape.scatter_add(tape.mul(surface, gain), dst_idx, pixels * d);
  return tape.add(depth, spread.reshaped({pixels, d}));
}

std::vector<std::int64_t> select_top_bins(const ng::Tensor& depth, std::size_t m) {
  detail::require(depth.shape().size() == 2, "select_top_bins: depth must be [P, D]");
  const std::size_t pixels = depth.shape()[0];
  const std::size_t d = depth.shape()[1];
  detail::require(m >= 1 && m <= d,
                  "select_top_bins: need 1 <= m <= bin count, got m=" +
                      std::to_string(m));
  std::vector<std::int64_t> out(pixels * m);
  std::vector<std::size_t> order(d);
  for (std::size_t p = 0; p < pixels; ++p) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double pa = depth.data()[p * d + a];
      const double pb = depth.data()[p * d + b];
      if (pa != pb) return pa > pb;
      return a < b;
    });
    for (std::size_t s = 0; s < m; ++s)
      out[p * m + s] = static_cast<std::int64_t>(order[s]);
  }
  return out;
}

SparseTransferMatrix build_transfer_matrix(ng::Tape& tape, const ng::Tensor& occluded,
                                           const std::vector<geo::CameraModel>& cams,
                                           const geo::VoxelGridSpec& grid,
                                           const geo::DepthBinSpec& bins,
                                           const InterObjectTransfer* inter) {
  grid.validate();
  bins.validate();
  detail::require(!cams.empty(), "build_transfer_matrix: need at least one camera");
  std::size_t total_pixels = 0;
  for (const auto& cam : cams) {
    cam.validate();
    total_pixels += cam.pixel_count();
  }
  detail::require(occluded.shape().size() == 2 && occluded.shape()[0] == total_pixels &&
                      occluded.shape()[1] == bins.count,
                  "build_transfer_matrix: occluded distribution must be [P, D] for the rig");
  const std::size_t d = bins.count;
  const auto centers = uniform_depth_bins(bins);
  const ng::Tensor occ_flat = occluded.reshaped({total_pixels * d});

  // Fixed-geometry deposits: every (pixel, bin) spreads onto the corners of
  // its back-projected cell. Corner weights are camera constants, so the tape
  // only tracks the occluded-probability factor.
  std::vector<Emission> base;
  std::vector<std::int64_t> base_occ_idx;
  std::vector<double> base_corner_w;
  std::size_t cam_offset = 0;
  for (const auto& cam : cams) {
    std::vector<geo::PixelToLatticeAffine> affine(d);
    for (std::size_t k = 0; k < d; ++k)
      affine[k] = geo::pixel_to_lattice_affine(cam, grid, centers[k]);
    for (std::size_t u = 0; u < cam.rows; ++u) {
      for (std::size_t v = 0; v < cam.cols; ++v) {
        const std::size_t pixel = cam_offset + u * cam.cols + v;
        const double du = static_cast<double>(u), dv = static_cast<double>(v);
        for (std::size_t k = 0; k < d; ++k) {
          const auto& a = affine[k];
          const geo::Vec3 lattice = {
              a.coeff[0][0] * du + a.coeff[0][1] * dv + a.offset[0],
              a.coeff[1][0] * du + a.coeff[1][1] * dv + a.offset[1],
              a.coeff[2][0] * du + a.coeff[2][1] * dv + a.offset[2]};
          for (const Corner& c : trilinear_weights(lattice)) {
            if (c.weight == 0.0) continue;
            if (!grid.contains(c.index[0], c.index[1], c.index[2])) continue;
            base.push_back({grid.flatten(static_cast<std::size_t>(c.index[0]),
                                         static_cast<std::size_t>(c.index[1]),
                                         static_cast<std::size_t>(c.index[2])),
                            pixel, base_occ_idx.size()});
            base_occ_idx.push_back(static_cast<std::int64_t>(pixel * d + k));
            base_corner_w.push_back(c.weight);
          }
        }
      }
    }
    cam_offset += cam.pixel_count();
  }

  // Learnable deposits: selected bins re-projected at displaced pixel
  // positions. The lattice points live on the tape, so corner weights carry
  // gradients back to the displacements.
  std::vector<Emission> extra;
  ng::Tensor extra_values;
  if (inter) {
    const std::size_t m = inter->per_pixel;
    detail::require(m >= 1, "build_transfer_matrix: inter transfer needs m >= 1");
    const ng::Shape want{total_pixels, m};
    detail::require(ng::shape_eq(inter->du.shape(), want) &&
                        ng::shape_eq(inter->dv.shape(), want) &&
                        ng::shape_eq(inter->omega.shape(), want),
                    "build_transfer_matrix: inter tensors must be [P, m]");
    detail::require(inter->bins.size() == total_pixels * m,
                    "build_transfer_matrix: inter selection size mismatch");
    for (double v : inter->omega.data())
      detail::require(v >= -kUnitRangeTol && v <= 1.0 + kUnitRangeTol,
                      "build_transfer_matrix: omega must lie in [0, 1]");

    const std::size_t points = total_pixels * m;
    // Pixel position per point: base coordinates plus the learned offsets.
    std::vector<double> base_u(points), base_v(points);
    std::vector<double> coeff_u(points * 3), coeff_v(points * 3), offs(points * 3);
    cam_offset = 0;
    for (const auto& cam : cams) {
      std::vector<geo::PixelToLatticeAffine> affine(d);
      for (std::size_t k = 0; k < d; ++k)
        affine[k] = geo::pixel_to_lattice_affine(cam, grid, centers[k]);
      for (std::size_t u = 0; u < cam.rows; ++u) {
        for (std::size_t v = 0; v < cam.cols; ++v) {
          const std::size_t pixel = cam_offset + u * cam.cols + v;
          for (std::size_t s = 0; s < m; ++s) {
            const std::size_t pt = pixel * m + s;
            const std::int64_t bin = inter->bins[pt];
            detail::require(bin >= 0 && bin < static_cast<std::int64_t>(d),
                            "build_transfer_matrix: selected bin out of range");
            const auto& a = affine[static_cast<std::size_t>(bin)];
            base_u[pt] = static_cast<double>(u);
            base_v[pt] = static_cast<double>(v);
            for (int axis = 0; axis < 3; ++axis) {
              coeff_u[pt * 3 + static_cast<std::size_t>(axis)] =
                  a.coeff[static_cast<std::size_t>(axis)][0];
              coeff_v[pt * 3 + static_cast<std::size_t>(axis)] =
                  a.coeff[static_cast<std::size_t>(axis)][1];
              offs[pt * 3 + static_cast<std::size_t>(axis)] =
                  a.offset[static_cast<std::size_t>(axis)] +
                  a.coeff[static_cast<std::size_t>(axis)][0] * base_u[pt] +
                  a.coeff[static_cast<std::size_t>(axis)][1] * base_v[pt];
            }
          }
        }
      }
      cam_offset += cam.pixel_count();
    }

    // lattice[pt, axis] = coeff_u * du + coeff_v * dv + offset, with the
    // [points,1] displacement columns broadcast across the axis rows.
    const ng::Tensor du_col = inter->du.reshaped({points, 1});
    const ng::Tensor dv_col = inter->dv.reshaped({points, 1});
    const ng::Tensor u_term = tape.mul(ng::Tensor({points, 3}, coeff_u), du_col);
    const ng::Tensor v_term = tape.mul(ng::Tensor({points, 3}, coeff_v), dv_col);
    ng::Tensor lattice =
        tape.add(tape.add(u_term, v_term), ng::Tensor({points, 3}, offs));
    const ng::TrilinearScatter tri = tape.trilinear_scatter_weights(lattice);

    // Keep only in-grid corners; gather their weights and scale each by the
    // point's omega and the selected bin's occluded probability.
    std::vector<std::int64_t> keep_w_idx, keep_omega_idx, keep_occ_idx;
    for (std::size_t pt = 0; pt < points; ++pt) {
      const std::size_t pixel = pt / m;
      const std::int64_t bin = inter->bins[pt];
      for (std::size_t s = 0; s < 8; ++s) {
        const std::int64_t* c = &tri.corners[(pt * 8 + s) * 3];
        if (!grid.contains(c[0], c[1], c[2])) continue;
        extra.push_back({grid.flatten(static_cast<std::size_t>(c[0]),
                                      static_cast<std::size_t>(c[1]),
                                      static_cast<std::size_t>(c[2])),
                         pixel, keep_w_idx.size()});
        keep_w_idx.push_back(static_cast<std::int64_t>(pt * 8 + s));
        keep_omega_idx.push_back(static_cast<std::int64_t>(pt));
        keep_occ_idx.push_back(static_cast<std::int64_t>(
            pixel * d + static_cast<std::size_t>(bin)));
      }
    }
    if (!keep_w_idx.empty()) {
      const ng::Tensor w = tape.gather(tri.weights.reshaped({points * 8}), keep_w_idx);
      const ng::Tensor om =
          tape.gather(inter->omega.reshaped({points}), keep_omega_idx);
      const ng::Tensor occ = tape.gather(occ_flat, keep_occ_idx);
      extra_values = tape.mul(tape.mul(w, om), occ);
    }
  }

  // Canonical merge: unique (row, col) keys in sorted order; every emission
  // scatters into its key's slot, which also sums duplicates.
  struct Key {
    std::uint64_t row, col;
    bool operator<(const Key& o) const {
      return row != o.row ? row < o.row : col < o.col;
    }
    bool operator==(const Key& o) const { return row == o.row && col == o.col; }
  };
  std::vector<Key> keys;
  keys.reserve(base.size() + extra.size());
  for (const Emission& e : base) keys.push_back({e.row, e.col});
  for (const Emission& e : extra) keys.push_back({e.row, e.col});
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());

  auto key_slot = [&](const Emission& e) {
    return static_cast<std::int64_t>(
        std::lower_bound(keys.begin(), keys.end(), Key{e.row, e.col}) - keys.begin());
  };

  SparseTransferMatrix out;
  out.n_rows = grid.voxel_count();
  out.n_cols = total_pixels;
  out.rows.reserve(keys.size());
  out.cols.reserve(keys.size());
  for (const Key& k : keys) {
    out.rows.push_back(k.row);
    out.cols.push_back(k.col);
  }

  if (keys.empty()) {
    out.values = ng::Tensor::zeros({0});
    return out;
  }

  std::vector<std::int64_t> base_slots(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) base_slots[i] = key_slot(base[i]);
  const ng::Tensor base_vals =
      tape.mul(tape.gather(occ_flat, base_occ_idx),
               ng::Tensor({base_occ_idx.size()}, std::move(base_corner_w)));
  ng::Tensor merged = tape.scatter_add(base_vals, base_slots, keys.size());

  if (!extra.empty()) {
    std::vector<std::int64_t> extra_slots(extra.size());
    for (std::size_t i = 0; i < extra.size(); ++i) extra_slots[i] = key_slot(extra[i]);
    merged =
        tape.add(merged, tape.scatter_add(extra_values, extra_slots, keys.size()));
  }
  out.values = merged;
  return out;
}

ng::Tensor apply_lift(ng::Tape& tape, const SparseTransferMatrix& m,
                      const ng::Tensor& features) {
  detail::require(features.shape().size() == 2 && features.shape()[0] == m.n_cols,
                  "apply_lift: features must be [P, F] with P matching the matrix");
  const std::size_t f = features.shape()[1];
  if (m.rows.empty()) return ng::Tensor::zeros({m.n_rows, f});
  std::vector<std::int64_t> cols(m.cols.begin(), m.cols.end());
  std::vector<std::int64_t> rows(m.rows.begin(), m.rows.end());
  const ng::Tensor picked = tape.gather(features, cols);
  const ng::Tensor scaled =
      tape.mul(picked, m.values.reshaped({m.values.numel(), 1}));
  return tape.scatter_add(scaled, rows, m.n_rows);
}

}  // namespace alocc::lift
