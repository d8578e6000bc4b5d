// Metric suite tests: voxel IoU with hand confusion counts, published-row
// mean arithmetic frozen to machine precision, ray-cast IoU against both hand
// cases and a fine-stepping brute-force oracle, velocity errors with the
// two-level mean, and the composite score's closed form.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <vector>

#include "alocc/errors.hpp"
#include "alocc/geometry.hpp"
#include "alocc/labels.hpp"
#include "alocc/metrics.hpp"
#include "alocc/scenes.hpp"

using namespace alocc;

namespace {

// Independent hit oracle: march in fine steps until a sample falls in an
// occupied voxel, then bisect down to the entry face. Never consults the
// lattice walker.
struct OracleHit {
  bool hit = false;
  std::array<std::size_t, 3> voxel{};
  double t = 0.0;
  int cls = -1;
};

int label_at(const std::vector<std::uint8_t>& labels, const geo::VoxelGridSpec& g,
             const geo::Ray& ray, double t, std::array<std::size_t, 3>* voxel) {
  const geo::Vec3 p{ray.origin.x + t * ray.dir.x, ray.origin.y + t * ray.dir.y,
                    ray.origin.z + t * ray.dir.z};
  const geo::Vec3 q = g.world_to_lattice(p);
  const auto h = static_cast<std::int64_t>(std::floor(q.x + 0.5));
  const auto w = static_cast<std::int64_t>(std::floor(q.y + 0.5));
  const auto z = static_cast<std::int64_t>(std::floor(q.z + 0.5));
  if (!g.contains(h, w, z)) return -1;
  if (voxel != nullptr)
    *voxel = {static_cast<std::size_t>(h), static_cast<std::size_t>(w),
              static_cast<std::size_t>(z)};
  const int l = labels[g.flatten(static_cast<std::size_t>(h),
                                 static_cast<std::size_t>(w),
                                 static_cast<std::size_t>(z))];
  return l == kEmptyLabel ? -2 : l;
}

OracleHit oracle_hit(const std::vector<std::uint8_t>& labels,
                     const geo::VoxelGridSpec& g, const geo::Ray& ray) {
  OracleHit out;
  const geo::Vec3 center =
      g.voxel_center(g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2);
  const geo::Vec3 off{ray.origin.x - center.x, ray.origin.y - center.y,
                      ray.origin.z - center.z};
  const double diag =
      g.cell * std::sqrt(static_cast<double>(g.dims[0] * g.dims[0] +
                                             g.dims[1] * g.dims[1] +
                                             g.dims[2] * g.dims[2]));
  const double t_max = off.norm() + diag;
  const double step = g.cell / 1000.0;

  const auto occupied = [&](double t) {
    return label_at(labels, g, ray, t, nullptr) >= 0;
  };
  if (occupied(0.0)) {
    out.hit = true;
    out.t = 0.0;
    out.cls = label_at(labels, g, ray, 0.0, &out.voxel);
    return out;
  }
  double lo = 0.0, hi = 0.0;
  bool found = false;
  for (std::size_t k = 1; static_cast<double>(k) * step <= t_max; ++k) {
    if (occupied(static_cast<double>(k) * step)) {
      lo = static_cast<double>(k - 1) * step;
      hi = static_cast<double>(k) * step;
      found = true;
      break;
    }
  }
  if (!found) return out;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (occupied(mid) ? hi : lo) = mid;
  }
  out.hit = true;
  out.t = hi;
  out.cls = label_at(labels, g, ray, hi, &out.voxel);
  return out;
}

}  // namespace

TEST_CASE("class_mean reproduces published per-class aggregation exactly") {
  // 17-class row: the mean of the printed per-class values is 45.5176...,
  // which prints as 45.5 at one decimal.
  const std::vector<double> seventeen{15.3, 52.5, 30.8, 47.2, 55.9, 32.7,
                                      33.3, 32.4, 36.2, 38.9, 43.7, 84.9,
                                      48.5, 58.8, 61.9, 53.5, 47.3};
  const double mean_all = met::class_mean(seventeen);
  CHECK(std::abs(mean_all - 45.51764705882353) <= 1e-12);
  CHECK(std::abs(mean_all - 45.5) <= 0.05);

  // 8-class dynamic subset: the exact mean is 39.3625. The printed one-decimal
  // figure (39.3) sits 0.0625 away, so only the exact value is asserted
  // tightly and the printed one at its own precision.
  const std::vector<double> dynamic{30.8, 47.2, 55.9, 32.7,
                                    33.3, 32.4, 38.9, 43.7};
  const double mean_dyn = met::class_mean(dynamic);
  CHECK(std::abs(mean_dyn - 39.3625) <= 1e-12);
  CHECK(std::abs(mean_dyn - 39.3) <= 0.1);

  CHECK_THROWS_AS(met::class_mean({}), ContractError);
}

TEST_CASE("miou counts voxel confusion per class") {
  const std::vector<std::uint8_t> gt{0, 0, 1, kEmptyLabel};
  const std::vector<std::uint8_t> pred{0, 1, 1, 1};

  // class 0: TP 1 (index 0), FN 1 (index 1) -> 1/2.
  // class 1: TP 1 (index 2), FP 2 (indices 1, 3) -> 1/3.
  // class 2: absent from both grids -> excluded.
  const met::MeanIoU m = met::miou(pred, gt, {0, 1, 2});
  REQUIRE(m.per_class.size() == 2);
  CHECK(m.per_class[0].cls == 0);
  CHECK(m.per_class[0].iou == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.per_class[1].cls == 1);
  CHECK(m.per_class[1].iou == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(m.mean == doctest::Approx(5.0 / 12.0).epsilon(1e-12));

  SUBCASE("identical grids score 1 for every present class") {
    const met::MeanIoU id = met::miou(gt, gt, {0, 1, 2});
    REQUIRE(id.per_class.size() == 2);
    CHECK(id.per_class[0].iou == 1.0);
    CHECK(id.per_class[1].iou == 1.0);
    CHECK(id.mean == 1.0);
  }

  SUBCASE("no contributing class yields an empty result") {
    const std::vector<std::uint8_t> blank(4, kEmptyLabel);
    const met::MeanIoU none = met::miou(blank, blank, {0, 1});
    CHECK(none.per_class.empty());
    CHECK(none.mean == 0.0);
  }

  SUBCASE("argument validation") {
    CHECK_THROWS_AS(met::miou(pred, {0, 0}, {0}), ContractError);
    CHECK_THROWS_AS(met::miou(pred, gt, {}), ContractError);
    CHECK_THROWS_AS(met::miou(pred, gt, {kEmptyLabel}), ContractError);
  }
}

TEST_CASE("ray query constructors produce unit directions") {
  SUBCASE("one normalized ray per camera pixel") {
    const geo::CameraModel cam = geo::camera_look_at(
        {-2.0, 1.5, 1.5}, {1.5, 1.5, 1.5}, 2.0, 2.0, 1.0, 1.0, 3, 3);
    const met::RayQuerySet set = met::camera_rays({cam, cam});
    REQUIRE(set.rays.size() == 18);
    for (const geo::Ray& r : set.rays)
      CHECK(std::abs(r.dir.norm() - 1.0) <= 1e-12);
    // Pixel (1,1) is the principal point, so its ray is the optical axis.
    CHECK(set.rays[4].dir.x == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(set.rays[4].dir.y) <= 1e-12);
    CHECK(std::abs(set.rays[4].dir.z) <= 1e-12);
  }

  SUBCASE("horizontal fan sweeps counter-clockwise from +x") {
    const met::RayQuerySet fan = met::ego_fan({1.0, 2.0, 0.5}, 4);
    REQUIRE(fan.rays.size() == 4);
    for (const geo::Ray& r : fan.rays) {
      CHECK(r.dir.z == 0.0);
      CHECK(std::abs(r.dir.norm() - 1.0) <= 1e-12);
      CHECK(r.origin.x == 1.0);
    }
    CHECK(fan.rays[0].dir.x == 1.0);
    CHECK(fan.rays[0].dir.y == 0.0);
    CHECK(fan.rays[1].dir.y == 1.0);
    CHECK(std::abs(fan.rays[1].dir.x) <= 1e-12);
    CHECK_THROWS_AS(met::ego_fan({0, 0, 0}, 0), ContractError);
  }
}

TEST_CASE("ray_iou splits matches by class and depth threshold") {
  geo::VoxelGridSpec g;
  g.origin = {0.0, 0.0, 0.0};
  g.cell = 1.0;
  g.dims = {8, 1, 1};
  std::vector<std::uint8_t> gt(8, kEmptyLabel), pred(8, kEmptyLabel);

  met::RayQuerySet one;
  one.rays.push_back({{-1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
  const std::vector<double> taus{1.0, 2.0, 4.0};

  SUBCASE("a surface pushed 3 m deeper matches only at the 4 m threshold") {
    gt[1] = 0;    // front face x = 0.5, depth 1.5
    pred[4] = 0;  // front face x = 3.5, depth 4.5
    const met::RayIoUResult r = met::ray_iou(pred, gt, g, one, 1, taus);
    CHECK(r.per_threshold == std::vector<double>{0.0, 0.0, 1.0});
    CHECK(r.mean == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r.counts[0].fp[0] == 1);
    CHECK(r.counts[0].fn[0] == 1);
    CHECK(r.counts[2].tp[0] == 1);
    // The TP voxel mask marks the ground-truth surface voxel.
    CHECK(r.tp_voxels[2][g.flatten(1, 0, 0)]);
    CHECK_FALSE(r.tp_voxels[2][g.flatten(4, 0, 0)]);
    CHECK_FALSE(r.tp_voxels[1][g.flatten(1, 0, 0)]);
  }

  SUBCASE("a class mismatch at equal depth is FP and FN, never TP") {
    gt[1] = 0;
    pred[1] = 1;
    const met::RayIoUResult r = met::ray_iou(pred, gt, g, one, 2, taus);
    for (std::size_t ti = 0; ti < 3; ++ti) {
      CHECK(r.counts[ti].fp[1] == 1);
      CHECK(r.counts[ti].fn[0] == 1);
      CHECK(r.per_threshold[ti] == 0.0);
    }
  }

  SUBCASE("an all-empty prediction turns every hit into a false negative") {
    gt[1] = 0;
    const met::RayIoUResult r = met::ray_iou(pred, gt, g, one, 1, taus);
    CHECK(r.mean == 0.0);
    CHECK(r.counts[0].fn[0] == 1);
    CHECK(r.counts[0].fp[0] == 0);
  }

  SUBCASE("identical grids score 1 at every threshold") {
    gt[1] = 0;
    gt[5] = 1;
    const met::RayIoUResult r = met::ray_iou(gt, gt, g, one, 2, taus);
    CHECK(r.per_threshold == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(r.mean == 1.0);
  }

  SUBCASE("argument validation") {
    CHECK_THROWS_AS(met::ray_iou(pred, gt, g, met::RayQuerySet{}, 1, taus),
                    ContractError);
    CHECK_THROWS_AS(met::ray_iou(pred, gt, g, one, 1, {}), ContractError);
    CHECK_THROWS_AS(met::ray_iou({0, 0}, gt, g, one, 1, taus), ContractError);
  }
}

TEST_CASE("ray_iou matches a brute-force oracle on random grids exactly") {
  geo::VoxelGridSpec g;
  g.origin = {-1.4, -1.4, 0.0};
  g.cell = 0.7;
  g.dims = {4, 4, 4};
  const std::vector<double> taus{1.0, 2.0, 4.0};
  const std::size_t n_classes = 3;

  std::mt19937_64 rng(1812);
  std::uniform_int_distribution<int> coin(0, 3);
  std::uniform_int_distribution<int> axis_pick(0, 2);
  std::uniform_int_distribution<int> lane(0, 3);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);

  const auto random_labels = [&] {
    std::vector<std::uint8_t> labels(g.voxel_count());
    for (std::uint8_t& l : labels) {
      const int c = coin(rng);
      l = c == 3 ? kEmptyLabel : static_cast<std::uint8_t>(c);
    }
    return labels;
  };

  // Axis-parallel rays with lateral jitter stay strictly inside one voxel
  // lane, so every traversed voxel has a full-cell chord and the stepping
  // oracle cannot skip any. Depth deltas are multiples of 0.7, never equal
  // to a threshold.
  const auto random_axis_ray = [&] {
    const int a = axis_pick(rng);
    const double lo = -1.4 - 2.0 * g.cell;
    double o[3], d[3] = {0.0, 0.0, 0.0};
    for (int k = 0; k < 3; ++k)
      o[k] = -1.4 + 0.7 * static_cast<double>(lane(rng)) + jitter(rng) * g.cell;
    o[a] = lo;
    d[a] = 1.0;
    return geo::Ray{{o[0], o[1], o[2]}, {d[0], d[1], d[2]}};
  };

  for (int scene = 0; scene < 20; ++scene) {
    const std::vector<std::uint8_t> gt = random_labels();
    const std::vector<std::uint8_t> pred = random_labels();
    met::RayQuerySet rays;
    for (int r = 0; r < 64; ++r) rays.rays.push_back(random_axis_ray());

    const met::RayIoUResult fast = met::ray_iou(pred, gt, g, rays, n_classes, taus);

    std::vector<met::RayConfusion> slow(taus.size());
    for (auto& c : slow) {
      c.tp.assign(n_classes, 0);
      c.fp.assign(n_classes, 0);
      c.fn.assign(n_classes, 0);
    }
    for (const geo::Ray& ray : rays.rays) {
      const OracleHit hg = oracle_hit(gt, g, ray);
      const OracleHit hp = oracle_hit(pred, g, ray);
      for (std::size_t ti = 0; ti < taus.size(); ++ti) {
        const bool match = hg.hit && hp.hit && hg.cls == hp.cls &&
                           std::abs(hp.t - hg.t) <= taus[ti];
        if (match) {
          slow[ti].tp[static_cast<std::size_t>(hg.cls)] += 1;
        } else {
          if (hp.hit) slow[ti].fp[static_cast<std::size_t>(hp.cls)] += 1;
          if (hg.hit) slow[ti].fn[static_cast<std::size_t>(hg.cls)] += 1;
        }
      }
    }
    for (std::size_t ti = 0; ti < taus.size(); ++ti) {
      CHECK(fast.counts[ti].tp == slow[ti].tp);
      CHECK(fast.counts[ti].fp == slow[ti].fp);
      CHECK(fast.counts[ti].fn == slow[ti].fn);
    }
  }
}

TEST_CASE("mave averages L2 errors per class, then across classes") {
  const std::vector<std::uint8_t> labels{1, 2, 2, kEmptyLabel};
  const std::vector<double> gt(8, 0.0);
  // class 1 error {1.0}; class 2 errors {2.0, 4.0} -> class means 1 and 3.
  const std::vector<double> pred{1.0, 0.0, 0.0, 2.0, 4.0, 0.0, 9.0, 9.0};

  CHECK(met::mave(pred, gt, labels, {1, 2}) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(met::mave(gt, gt, labels, {1, 2}) == 0.0);

  SUBCASE("classes without voxels drop out of the outer mean") {
    CHECK(met::mave(pred, gt, labels, {0, 1}) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("an all-true mask reproduces the unmasked value") {
    const std::vector<bool> all(4, true);
    CHECK(met::mave(pred, gt, labels, {1, 2}, &all) ==
          met::mave(pred, gt, labels, {1, 2}));
  }

  SUBCASE("a mask restricts the contributing voxels") {
    const std::vector<bool> no_last{true, true, false, true};
    CHECK(met::mave(pred, gt, labels, {1, 2}, &no_last) ==
          doctest::Approx(1.5).epsilon(1e-12));
  }

  SUBCASE("no contributing voxels anywhere is an error") {
    CHECK_THROWS_AS(met::mave(pred, gt, labels, {0}), ContractError);
    const std::vector<bool> none(4, false);
    CHECK_THROWS_AS(met::mave(pred, gt, labels, {1, 2}, &none), ContractError);
    CHECK_THROWS_AS(met::mave(pred, gt, labels, {}), ContractError);
  }

  SUBCASE("size validation") {
    CHECK_THROWS_AS(met::mave({1.0, 2.0}, gt, labels, {1}), ContractError);
    const std::vector<bool> short_mask(3, true);
    CHECK_THROWS_AS(met::mave(pred, gt, labels, {1}, &short_mask), ContractError);
  }
}

TEST_CASE("occ_score follows the composite closed form") {
  // Published pairs: exact formula values print as 42.1 / 43.0 after the
  // inputs themselves were rounded for the table.
  CHECK(std::abs(met::occ_score(40.5, 0.427) - 42.18) <= 1e-12);
  CHECK(std::abs(met::occ_score(40.5, 0.427) - 42.1) <= 0.15);
  CHECK(std::abs(met::occ_score(41.9, 0.481) - 42.90) <= 1e-12);
  CHECK(std::abs(met::occ_score(41.9, 0.481) - 43.0) <= 0.15);

  // Velocity errors of 1 m/s or more zero the velocity term.
  CHECK(met::occ_score(0.0, 1.0) == 0.0);
  CHECK(met::occ_score(0.0, 7.5) == 0.0);
  CHECK(met::occ_score(100.0, 0.0) == 100.0);
  CHECK(met::occ_score(50.0, 0.5) == doctest::Approx(50.0).epsilon(1e-12));

  CHECK_THROWS_AS(met::occ_score(-0.1, 0.0), ContractError);
  CHECK_THROWS_AS(met::occ_score(100.1, 0.0), ContractError);
  CHECK_THROWS_AS(met::occ_score(50.0, -1.0), ContractError);
}

TEST_CASE("write_report emits one key-value pair per line") {
  met::Report rep;
  rep.miou_all.per_class = {{0, 1.0}, {2, 0.5}};
  rep.miou_all.mean = 0.75;
  rep.thresholds = {1.0, 2.0, 4.0};
  rep.ray.per_threshold = {0.25, 0.5, 1.0};
  rep.ray.mean = 7.0 / 12.0;
  rep.has_mave = true;
  rep.mave_all = 0.125;
  rep.has_mave_tp = true;
  rep.mave_tp = 0.0625;
  rep.occ = met::occ_score(100.0 * rep.ray.mean, rep.mave_tp);

  std::ostringstream out;
  met::write_report(out, rep);
  const std::string text = out.str();

  CHECK(text.find("miou.mean 0.75\n") != std::string::npos);
  CHECK(text.find("miou.class.0 1\n") != std::string::npos);
  CHECK(text.find("miou.class.2 0.5\n") != std::string::npos);
  CHECK(text.find("ray_iou.tau.1 0.25\n") != std::string::npos);
  CHECK(text.find("ray_iou.tau.4 1\n") != std::string::npos);
  CHECK(text.find("ray_iou.mean ") != std::string::npos);
  CHECK(text.find("mave 0.125\n") != std::string::npos);
  CHECK(text.find("mave_tp 0.0625\n") != std::string::npos);
  CHECK(text.find("occ_score ") != std::string::npos);
  CHECK(text.find("miou_dynamic") == std::string::npos);

  // Every line is exactly "key value".
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    REQUIRE(!line.empty());
    const auto space = line.find(' ');
    REQUIRE(space != std::string::npos);
    CHECK(line.find(' ', space + 1) == std::string::npos);
  }
}

TEST_CASE("ray_iou on a rendered scene is exact for identical grids") {
  scn::SceneSpec spec;
  spec.grid.origin = {0.0, 0.0, 0.0};
  spec.grid.cell = 1.0;
  spec.grid.dims = {4, 4, 4};
  spec.n_classes = 2;
  spec.ground_class = 0;
  spec.depth_bins = {0.5, 6.5, 12};
  scn::SceneObject box;
  box.center = {1.5, 1.5, 1.5};
  box.size = {2.0, 2.0, 2.0};
  box.cls = 1;
  spec.objects.push_back(box);
  spec.cameras.push_back(geo::camera_look_at({-2.0, 1.5, 1.5}, {1.5, 1.5, 1.5},
                                             2.0, 2.0, 1.0, 1.0, 3, 3));
  const scn::SceneData data = scn::generate(spec);

  met::RayQuerySet rays = met::camera_rays(spec.cameras);
  const met::RayQuerySet fan = met::ego_fan({1.5, 1.5, 1.5}, 16);
  rays.rays.insert(rays.rays.end(), fan.rays.begin(), fan.rays.end());

  const met::RayIoUResult r = met::ray_iou(data.labels_cur, data.labels_cur,
                                           spec.grid, rays, 2, {1.0, 2.0, 4.0});
  CHECK(r.mean == 1.0);
  for (double v : r.per_threshold) CHECK(v == 1.0);
}
