#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "alocc/geometry.hpp"
#include "alocc/labels.hpp"
#include "alocc/scenes.hpp"

namespace alocc::met {

// Plain mean of a list of per-class scores (used to aggregate externally
// computed per-class IoUs). Throws ContractError on an empty list.
double class_mean(const std::vector<double>& per_class);

// Intersection-over-union of one class's voxel sets.
struct ClassIoU {
  std::uint8_t cls = 0;
  double iou = 0.0;
};

// Per-class IoUs and their mean. Classes from the query set that appear in
// neither grid (TP + FP + FN = 0) are excluded from both the list and the
// mean; with no contributing class at all the mean is 0.
struct MeanIoU {
  std::vector<ClassIoU> per_class;
  double mean = 0.0;
};

// Voxel-level IoU per class: TP / (TP + FP + FN) with TP counting voxels
// labelled `c` in both grids. `classes` selects which class ids participate
// (e.g. all classes for mIoU, the dynamic subset for its dynamic variant).
MeanIoU miou(const std::vector<std::uint8_t>& pred,
             const std::vector<std::uint8_t>& gt,
             const std::vector<std::uint8_t>& classes);

// Query rays for the ray-cast metrics. Directions are unit length, so a
// first-hit parameter is a euclidean distance in meters.
struct RayQuerySet {
  std::vector<geo::Ray> rays;
};

// One ray per pixel of every camera, directions normalized.
RayQuerySet camera_rays(const std::vector<geo::CameraModel>& cams);

// Horizontal 360-degree fan: `count` rays from `origin` at angles k*2*pi/count
// from the +x axis, counter-clockwise.
RayQuerySet ego_fan(const geo::Vec3& origin, std::size_t count);

// Ray-cast IoU. Both grids are rendered along each query ray; a ray is a
// true positive for class c at threshold tau iff both first hits carry class
// c and the two hit distances differ by at most tau. Otherwise a predicted
// hit is a false positive for its class and a ground-truth hit a false
// negative for its class; rays missing both grids contribute nothing.
struct RayConfusion {
  std::vector<std::size_t> tp, fp, fn;  // indexed by class id
};

struct RayIoUResult {
  std::vector<double> per_threshold;        // class-mean IoU at each threshold
  double mean = 0.0;                        // mean over thresholds
  std::vector<RayConfusion> counts;         // per threshold
  std::vector<std::vector<bool>> tp_voxels; // per threshold: ground-truth
                                            // first-hit voxels of TP rays
};

RayIoUResult ray_iou(const std::vector<std::uint8_t>& pred,
                     const std::vector<std::uint8_t>& gt,
                     const geo::VoxelGridSpec& grid, const RayQuerySet& rays,
                     std::size_t n_classes, const std::vector<double>& thresholds);

// Mean absolute velocity error in m/s: per dynamic class, the mean L2 error
// over that class's ground-truth voxels (optionally restricted to `mask`),
// then the mean over classes with at least one contributing voxel. Throws
// ContractError when no class contributes. Flow layout is interleaved
// (x, y) per voxel.
double mave(const std::vector<double>& pred_flow,
            const std::vector<double>& gt_flow,
            const std::vector<std::uint8_t>& gt_labels,
            const std::vector<std::uint8_t>& dynamic_classes,
            const std::vector<bool>* mask = nullptr);

// Composite score on the percent scale: 0.9 * ray_iou + 0.1 * 100 * max(1 -
// mave_tp, 0). `ray_iou_percent` must lie in [0, 100], `mave_tp` in m/s.
double occ_score(double ray_iou_percent, double mave_tp);

// Machine-readable evaluation summary: one "key value" pair per line.
struct Report {
  MeanIoU miou_all;
  MeanIoU miou_dynamic;
  bool has_dynamic = false;
  std::vector<double> thresholds;
  RayIoUResult ray;
  bool has_mave = false;
  double mave_all = 0.0;
  bool has_mave_tp = false;
  double mave_tp = 0.0;
  double occ = 0.0;  // valid when has_mave_tp
};

void write_report(std::ostream& out, const Report& report);

}  // namespace alocc::met
