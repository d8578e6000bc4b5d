#include "alocc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "alocc/errors.hpp"

namespace alocc::met {

namespace {

// IoU over explicit confusion counts; callers skip the 0/0 case.
double iou_of(std::size_t tp, std::size_t fp, std::size_t fn) {
  return static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
}

void write_miou(std::ostream& out, const char* prefix, const MeanIoU& m) {
  out << prefix << ".mean " << m.mean << '\n';
  for (const ClassIoU& c : m.per_class)
    out << prefix << ".class." << static_cast<unsigned>(c.cls) << ' ' << c.iou
        << '\n';
}

}  // namespace

double class_mean(const std::vector<double>& per_class) {
  detail::require(!per_class.empty(), "class_mean: empty class list");
  double sum = 0.0;
  for (double v : per_class) sum += v;
  return sum / static_cast<double>(per_class.size());
}

MeanIoU miou(const std::vector<std::uint8_t>& pred,
             const std::vector<std::uint8_t>& gt,
             const std::vector<std::uint8_t>& classes) {
  detail::require(pred.size() == gt.size(), "miou: grid sizes differ");
  detail::require(!classes.empty(), "miou: empty class set");

  MeanIoU out;
  double sum = 0.0;
  for (std::uint8_t c : classes) {
    detail::require(c != kEmptyLabel, "miou: the empty label is not a class");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t v = 0; v < pred.size(); ++v) {
      const bool in_pred = pred[v] == c;
      const bool in_gt = gt[v] == c;
      tp += (in_pred && in_gt) ? 1 : 0;
      fp += (in_pred && !in_gt) ? 1 : 0;
      fn += (!in_pred && in_gt) ? 1 : 0;
    }
    if (tp + fp + fn == 0) continue;
    out.per_class.push_back({c, iou_of(tp, fp, fn)});
    sum += out.per_class.back().iou;
  }
  if (!out.per_class.empty())
    out.mean = sum / static_cast<double>(out.per_class.size());
  return out;
}

RayQuerySet camera_rays(const std::vector<geo::CameraModel>& cams) {
  RayQuerySet set;
  for (const geo::CameraModel& cam : cams) {
    cam.validate();
    for (std::size_t u = 0; u < cam.rows; ++u) {
      for (std::size_t v = 0; v < cam.cols; ++v) {
        geo::Ray ray = geo::ray_through_pixel(cam, static_cast<double>(u),
                                              static_cast<double>(v));
        const double n = ray.dir.norm();
        ray.dir = {ray.dir.x / n, ray.dir.y / n, ray.dir.z / n};
        set.rays.push_back(ray);
      }
    }
  }
  return set;
}

RayQuerySet ego_fan(const geo::Vec3& origin, std::size_t count) {
  detail::require(count >= 1, "ego_fan: ray count must be positive");
  RayQuerySet set;
  set.rays.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double a = 2.0 * 3.14159265358979323846 * static_cast<double>(k) /
                     static_cast<double>(count);
    set.rays.push_back({origin, {std::cos(a), std::sin(a), 0.0}});
  }
  return set;
}

RayIoUResult ray_iou(const std::vector<std::uint8_t>& pred,
                     const std::vector<std::uint8_t>& gt,
                     const geo::VoxelGridSpec& grid, const RayQuerySet& rays,
                     std::size_t n_classes,
                     const std::vector<double>& thresholds) {
  grid.validate();
  detail::require(pred.size() == grid.voxel_count() && gt.size() == grid.voxel_count(),
                  "ray_iou: label grids do not match the grid spec");
  detail::require(!rays.rays.empty(), "ray_iou: empty ray set");
  detail::require(!thresholds.empty(), "ray_iou: empty threshold list");
  detail::require(n_classes >= 1, "ray_iou: need at least one class");

  RayIoUResult out;
  out.counts.assign(thresholds.size(), RayConfusion{});
  for (RayConfusion& c : out.counts) {
    c.tp.assign(n_classes, 0);
    c.fp.assign(n_classes, 0);
    c.fn.assign(n_classes, 0);
  }
  out.tp_voxels.assign(thresholds.size(),
                       std::vector<bool>(grid.voxel_count(), false));

  for (const geo::Ray& ray : rays.rays) {
    const scn::RayHit hg = scn::first_hit(gt, grid, ray);
    const scn::RayHit hp = scn::first_hit(pred, grid, ray);
    if (!hg.hit && !hp.hit) continue;
    if (hg.hit)
      detail::require(hg.cls < n_classes, "ray_iou: gt class id out of range");
    if (hp.hit)
      detail::require(hp.cls < n_classes, "ray_iou: pred class id out of range");

    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      const bool match = hg.hit && hp.hit && hg.cls == hp.cls &&
                         std::abs(hp.t - hg.t) <= thresholds[ti];
      if (match) {
        out.counts[ti].tp[hg.cls] += 1;
        out.tp_voxels[ti][grid.flatten(hg.voxel[0], hg.voxel[1], hg.voxel[2])] =
            true;
      } else {
        if (hp.hit) out.counts[ti].fp[hp.cls] += 1;
        if (hg.hit) out.counts[ti].fn[hg.cls] += 1;
      }
    }
  }

  out.per_threshold.assign(thresholds.size(), 0.0);
  for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
    double sum = 0.0;
    std::size_t contributing = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      const RayConfusion& cc = out.counts[ti];
      if (cc.tp[c] + cc.fp[c] + cc.fn[c] == 0) continue;
      sum += iou_of(cc.tp[c], cc.fp[c], cc.fn[c]);
      contributing += 1;
    }
    if (contributing > 0)
      out.per_threshold[ti] = sum / static_cast<double>(contributing);
    out.mean += out.per_threshold[ti];
  }
  out.mean /= static_cast<double>(thresholds.size());
  return out;
}

double mave(const std::vector<double>& pred_flow,
            const std::vector<double>& gt_flow,
            const std::vector<std::uint8_t>& gt_labels,
            const std::vector<std::uint8_t>& dynamic_classes,
            const std::vector<bool>* mask) {
  detail::require(pred_flow.size() == 2 * gt_labels.size() &&
                      gt_flow.size() == 2 * gt_labels.size(),
                  "mave: flow size must be twice the voxel count");
  detail::require(mask == nullptr || mask->size() == gt_labels.size(),
                  "mave: mask size does not match the grid");
  detail::require(!dynamic_classes.empty(), "mave: empty dynamic class set");

  double class_sum = 0.0;
  std::size_t contributing = 0;
  for (std::uint8_t c : dynamic_classes) {
    double err = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < gt_labels.size(); ++v) {
      if (gt_labels[v] != c) continue;
      if (mask != nullptr && !(*mask)[v]) continue;
      const double dx = pred_flow[2 * v] - gt_flow[2 * v];
      const double dy = pred_flow[2 * v + 1] - gt_flow[2 * v + 1];
      err += std::sqrt(dx * dx + dy * dy);
      n += 1;
    }
    if (n == 0) continue;
    class_sum += err / static_cast<double>(n);
    contributing += 1;
  }
  detail::require(contributing > 0, "mave: no contributing voxels in any class");
  return class_sum / static_cast<double>(contributing);
}

double occ_score(double ray_iou_percent, double mave_tp) {
  detail::require(ray_iou_percent >= 0.0 && ray_iou_percent <= 100.0,
                  "occ_score: ray IoU must be on the percent scale [0, 100]");
  detail::require(mave_tp >= 0.0, "occ_score: velocity error must be nonnegative");
  return 0.9 * ray_iou_percent + 0.1 * 100.0 * std::max(1.0 - mave_tp, 0.0);
}

void write_report(std::ostream& out, const Report& report) {
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  write_miou(out, "miou", report.miou_all);
  if (report.has_dynamic) write_miou(out, "miou_dynamic", report.miou_dynamic);
  for (std::size_t ti = 0; ti < report.thresholds.size(); ++ti)
    out << "ray_iou.tau." << report.thresholds[ti] << ' '
        << report.ray.per_threshold[ti] << '\n';
  out << "ray_iou.mean " << report.ray.mean << '\n';
  if (report.has_mave) out << "mave " << report.mave_all << '\n';
  if (report.has_mave_tp) {
    out << "mave_tp " << report.mave_tp << '\n';
    out << "occ_score " << report.occ << '\n';
  }
  out.precision(old_precision);
}

}  // namespace alocc::met
