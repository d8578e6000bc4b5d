#include "alocc/flowhead.hpp"

#include <algorithm>
#include <cmath>

namespace alocc::flow {

ng::Tensor collapse_bev(ng::Tape& tape, const ng::Tensor& voxel_features,
                        const geo::VoxelGridSpec& grid, double z_min, double z_max,
                        std::size_t factor) {
  grid.validate();
  detail::require(z_min < z_max, "collapse_bev: empty height band");
  detail::require(voxel_features.shape().size() == 2 &&
                      voxel_features.shape()[0] == grid.voxel_count(),
                  "collapse_bev: features must be [voxel_count, C], got " +
                      ng::shape_str(voxel_features.shape()));
  const auto [rows, cols] = geo::bev_dims(grid, factor);

  std::vector<std::size_t> slab;
  for (std::size_t z = 0; z < grid.dims[2]; ++z) {
    const double height = grid.origin.z + static_cast<double>(z) * grid.cell;
    if (height >= z_min && height < z_max) slab.push_back(z);
  }
  detail::require(!slab.empty(),
                  "collapse_bev: no voxel centers inside the height band");

  // One gather row per (cell, footprint voxel) pair, cell-major, then a
  // scatter back onto the cells and a mean scale. Purely linear.
  std::vector<std::int64_t> src, dst;
  src.reserve(rows * cols * factor * factor * slab.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t dh = 0; dh < factor; ++dh)
        for (std::size_t dw = 0; dw < factor; ++dw)
          for (const std::size_t z : slab) {
            src.push_back(static_cast<std::int64_t>(
                grid.flatten(i * factor + dh, j * factor + dw, z)));
            dst.push_back(static_cast<std::int64_t>(i * cols + j));
          }
    }
  }
  const double scale = 1.0 / static_cast<double>(factor * factor * slab.size());
  const ng::Tensor pooled = tape.scatter_add(tape.gather(voxel_features, src), dst,
                                             rows * cols);
  const std::size_t ch = voxel_features.shape()[1];
  return tape.mul(pooled, ng::Tensor::scalar(scale)).reshaped({rows, cols, ch});
}

ng::Tensor cost_volume(ng::Tape& tape, const ng::Tensor& cur, const ng::Tensor& prev) {
  detail::require(cur.shape().size() == 3 && ng::shape_eq(cur.shape(), prev.shape()),
                  "cost_volume: inputs must be matching [H,W,C] maps, got " +
                      ng::shape_str(cur.shape()) + " vs " + ng::shape_str(prev.shape()));
  const std::size_t h = cur.shape()[0], w = cur.shape()[1], ch = cur.shape()[2];
  const std::size_t n = h * w;
  const ng::Tensor cur_flat = cur.reshaped({n, ch});
  // Append one all-zero row so out-of-map neighbors have somewhere to point;
  // against a zero row the cosine is exactly 0 with zero gradient.
  std::vector<std::int64_t> ident(n);
  for (std::size_t i = 0; i < n; ++i) ident[i] = static_cast<std::int64_t>(i);
  const ng::Tensor padded = tape.scatter_add(prev.reshaped({n, ch}), ident, n + 1);

  ng::Tensor out = ng::Tensor::zeros({0});
  for (std::size_t k = 0; k < 9; ++k) {
    const std::int64_t dh = static_cast<std::int64_t>(k / 3) - 1;
    const std::int64_t dw = static_cast<std::int64_t>(k % 3) - 1;
    std::vector<std::int64_t> neighbor(n);
    std::vector<std::int64_t> column(n);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const std::int64_t ni = static_cast<std::int64_t>(i) + dh;
        const std::int64_t nj = static_cast<std::int64_t>(j) + dw;
        const bool inside = ni >= 0 && nj >= 0 && ni < static_cast<std::int64_t>(h) &&
                            nj < static_cast<std::int64_t>(w);
        const std::size_t cell = i * w + j;
        neighbor[cell] = inside ? ni * static_cast<std::int64_t>(w) + nj
                                : static_cast<std::int64_t>(n);
        column[cell] = static_cast<std::int64_t>(cell * 9 + k);
      }
    }
    const ng::Tensor sim =
        tape.cosine_sim_lastdim(cur_flat, tape.gather(padded, neighbor));
    const ng::Tensor placed = tape.scatter_add(sim, column, n * 9);
    out = k == 0 ? placed : tape.add(out, placed);
  }
  return out.reshaped({n, 9});
}

void FlowBinSpec::validate() const {
  detail::require(lo < hi && count >= 1,
                  "flow bins: need lo < hi and at least one bin");
}

std::vector<double> FlowBinSpec::centers() const {
  validate();
  const double width = (hi - lo) / static_cast<double>(count);
  std::vector<double> out(count);
  for (std::size_t n = 0; n < count; ++n)
    out[n] = lo + (static_cast<double>(n) + 0.5) * width;
  return out;
}

std::size_t nearest_bin(double value, const FlowBinSpec& spec) {
  spec.validate();
  detail::require(std::isfinite(value), "nearest_bin: non-finite displacement");
  const std::vector<double> c = spec.centers();
  std::size_t best = 0;
  for (std::size_t n = 1; n < spec.count; ++n)
    if (std::abs(value - c[n]) < std::abs(value - c[best])) best = n;
  return best;  // strict comparison: midpoints keep the lower bin
}

FlowDecode decode_flow(ng::Tape& tape, const ng::Tensor& bev, const ng::Tensor& cost,
                       const FlowHeadWeights& weights, const FlowBinSpec& bins) {
  bins.validate();
  detail::require(bev.shape().size() == 2, "decode_flow: bev must be [N, C]");
  const std::size_t n = bev.shape()[0];
  detail::require(cost.shape().size() == 2 && cost.shape()[0] == n &&
                      cost.shape()[1] == 9,
                  "decode_flow: cost must be [N, 9], got " +
                      ng::shape_str(cost.shape()));
  const std::size_t b = bins.count;
  detail::require(weights.w2.shape().size() == 2 &&
                      weights.w2.shape()[1] == 2 * b,
                  "decode_flow: output stage must emit 2 * count columns");

  const ng::Tensor hidden = tape.sigmoid(tape.add(
      tape.add(tape.matmul(bev, weights.w_feat), tape.matmul(cost, weights.w_cost)),
      weights.b1));
  const ng::Tensor logits = tape.add(tape.matmul(hidden, weights.w2), weights.b2);

  // Column split of the [N, 2b] logits into the two axis blocks.
  const ng::Tensor flat = logits.reshaped({n * 2 * b});
  std::vector<std::int64_t> ix(n * b), iy(n * b);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < b; ++c) {
      ix[r * b + c] = static_cast<std::int64_t>(r * 2 * b + c);
      iy[r * b + c] = static_cast<std::int64_t>(r * 2 * b + b + c);
    }
  FlowDecode out;
  out.prob_x = tape.softmax_lastdim(tape.gather(flat, ix).reshaped({n, b}));
  out.prob_y = tape.softmax_lastdim(tape.gather(flat, iy).reshaped({n, b}));

  const ng::Tensor centers(ng::Shape{b, 1}, bins.centers());
  const ng::Tensor ex = tape.matmul(out.prob_x, centers);
  const ng::Tensor ey = tape.matmul(out.prob_y, centers);
  std::vector<std::int64_t> even(n), odd(n);
  for (std::size_t r = 0; r < n; ++r) {
    even[r] = static_cast<std::int64_t>(2 * r);
    odd[r] = static_cast<std::int64_t>(2 * r + 1);
  }
  out.flow = tape.add(tape.scatter_add(ex.reshaped({n}), even, 2 * n),
                      tape.scatter_add(ey.reshaped({n}), odd, 2 * n))
                 .reshaped({n, 2});
  return out;
}

std::vector<std::int64_t> flow_supervision_set(const std::vector<double>& gt_flow) {
  detail::require(!gt_flow.empty() && gt_flow.size() % 2 == 0,
                  "flow_supervision_set: flow must hold (x, y) pairs");
  const std::size_t n = gt_flow.size() / 2;
  std::vector<std::int64_t> moving, still;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt_flow[2 * i] != 0.0 || gt_flow[2 * i + 1] != 0.0) {
      moving.push_back(static_cast<std::int64_t>(i));
    } else {
      still.push_back(static_cast<std::int64_t>(i));
    }
  }
  if (moving.empty()) {
    std::vector<std::int64_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::int64_t>(i);
    return all;
  }
  // Balance with the lowest-index still cells; both lists are ascending.
  std::vector<std::int64_t> out = moving;
  out.insert(out.end(), still.begin(),
             still.begin() + static_cast<std::ptrdiff_t>(
                                 std::min(moving.size(), still.size())));
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

void check_flow_pair(const ng::Tensor& flow, const ng::Tensor& gt_flow,
                     const std::vector<std::int64_t>& set, const char* who) {
  detail::require(flow.shape().size() == 2 && flow.shape()[1] == 2,
                  std::string(who) + ": flow must be [N, 2]");
  detail::require(ng::shape_eq(flow.shape(), gt_flow.shape()),
                  std::string(who) + ": prediction and ground truth disagree, " +
                      ng::shape_str(flow.shape()) + " vs " +
                      ng::shape_str(gt_flow.shape()));
  detail::require(!set.empty(), std::string(who) + ": empty supervision set");
}

}  // namespace

ng::Tensor flow_reg_loss(ng::Tape& tape, const ng::Tensor& flow,
                         const ng::Tensor& gt_flow,
                         const std::vector<std::int64_t>& set) {
  check_flow_pair(flow, gt_flow, set, "flow_reg_loss");
  const std::size_t m = set.size();
  const ng::Tensor pred = tape.gather(flow, set);
  const ng::Tensor truth = tape.gather(gt_flow, set);
  const ng::Tensor diff = tape.add(pred, tape.mul(truth, ng::Tensor::scalar(-1.0)));
  const ng::Tensor sq =
      tape.matmul(tape.square(diff), ng::Tensor::full({2, 1}, 1.0)).reshaped({m});
  const ng::Tensor align = tape.cosine_sim_lastdim(pred, truth);
  return tape.mean(tape.add(sq, tape.mul(align, ng::Tensor::scalar(-1.0))));
}

ng::Tensor flow_cls_loss(ng::Tape& tape, const ng::Tensor& prob_x,
                         const ng::Tensor& prob_y, const ng::Tensor& gt_flow,
                         const FlowBinSpec& bins,
                         const std::vector<std::int64_t>& set) {
  bins.validate();
  detail::require(!set.empty(), "flow_cls_loss: empty supervision set");
  detail::require(prob_x.shape().size() == 2 && prob_x.shape()[1] == bins.count &&
                      ng::shape_eq(prob_x.shape(), prob_y.shape()),
                  "flow_cls_loss: probabilities must be [N, count]");
  detail::require(gt_flow.shape().size() == 2 &&
                      gt_flow.shape()[0] == prob_x.shape()[0] &&
                      gt_flow.shape()[1] == 2,
                  "flow_cls_loss: ground truth must be [N, 2]");
  const std::size_t n = prob_x.shape()[0];
  const std::size_t b = bins.count;
  std::vector<std::int64_t> tx(set.size()), ty(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::int64_t cell = set[i];
    detail::require(cell >= 0 && static_cast<std::size_t>(cell) < n,
                    "flow_cls_loss: supervision index out of range");
    const std::size_t row = static_cast<std::size_t>(cell);
    tx[i] = cell * static_cast<std::int64_t>(b) +
            static_cast<std::int64_t>(nearest_bin(gt_flow.at(row * 2), bins));
    ty[i] = cell * static_cast<std::int64_t>(b) +
            static_cast<std::int64_t>(nearest_bin(gt_flow.at(row * 2 + 1), bins));
  }
  const ng::Tensor lx = tape.mean(tape.log(tape.gather(prob_x.reshaped({n * b}), tx)));
  const ng::Tensor ly = tape.mean(tape.log(tape.gather(prob_y.reshaped({n * b}), ty)));
  return tape.mul(tape.add(lx, ly), ng::Tensor::scalar(-0.5));
}

std::vector<double> pool_flow_gt(const std::vector<double>& voxel_flow,
                                 const geo::VoxelGridSpec& grid, std::size_t factor) {
  grid.validate();
  detail::require(voxel_flow.size() == grid.voxel_count() * 2,
                  "pool_flow_gt: flow must hold 2 values per voxel");
  const auto [rows, cols] = geo::bev_dims(grid, factor);
  std::vector<double> out(rows * cols * 2, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      bool found = false;
      for (std::size_t dh = 0; dh < factor && !found; ++dh)
        for (std::size_t dw = 0; dw < factor && !found; ++dw)
          for (std::size_t z = 0; z < grid.dims[2] && !found; ++z) {
            const std::size_t v = grid.flatten(i * factor + dh, j * factor + dw, z);
            if (voxel_flow[2 * v] != 0.0 || voxel_flow[2 * v + 1] != 0.0) {
              out[(i * cols + j) * 2] = voxel_flow[2 * v];
              out[(i * cols + j) * 2 + 1] = voxel_flow[2 * v + 1];
              found = true;
            }
          }
    }
  }
  return out;
}

}  // namespace alocc::flow
