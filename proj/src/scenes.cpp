#include "alocc/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "alocc/errors.hpp"

namespace alocc::scn {

namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

json parse_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw DataError("scene: not valid JSON");
  return j;
}

const json& member(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw DataError(std::string("scene: missing field '") + key + "'");
  return j.at(key);
}

template <typename T>
T field(const json& j, const char* key) {
  try {
    return member(j, key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("scene: bad field '") + key + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  return field<T>(j, key);
}

geo::Vec3 vec3_field(const json& j, const char* key) {
  const auto a = field<std::vector<double>>(j, key);
  if (a.size() != 3)
    throw DataError(std::string("scene: '") + key + "' must hold 3 numbers");
  return {a[0], a[1], a[2]};
}

geo::CameraModel parse_camera(const json& j) {
  geo::CameraModel cam;
  if (j.contains("look_at")) {
    const json& l = j.at("look_at");
    return geo::camera_look_at(vec3_field(l, "position"), vec3_field(l, "target"),
                               field<double>(l, "fx"), field<double>(l, "fy"),
                               field<double>(l, "cx"), field<double>(l, "cy"),
                               field<std::size_t>(l, "rows"),
                               field<std::size_t>(l, "cols"));
  }
  const auto k = field<std::vector<double>>(j, "intrinsics");
  const auto pose = field<std::vector<double>>(j, "cam_to_ego");
  if (k.size() != 9) throw DataError("scene: 'intrinsics' must hold 9 numbers");
  if (pose.size() != 16) throw DataError("scene: 'cam_to_ego' must hold 16 numbers");
  std::copy(k.begin(), k.end(), cam.intrinsics.m.begin());
  std::copy(pose.begin(), pose.end(), cam.cam_to_ego.m.begin());
  cam.rows = field<std::size_t>(j, "rows");
  cam.cols = field<std::size_t>(j, "cols");
  return cam;
}

SceneObject parse_object(const json& j) {
  SceneObject obj;
  const auto shape = field<std::string>(j, "shape");
  if (shape == "box") {
    obj.shape = SceneObject::Shape::kBox;
    obj.size = vec3_field(j, "size");
    obj.yaw = field_or<double>(j, "yaw", 0.0);
  } else if (shape == "sphere") {
    obj.shape = SceneObject::Shape::kSphere;
    obj.radius = field<double>(j, "radius");
  } else {
    throw DataError("scene: unknown shape '" + shape + "'");
  }
  obj.center = vec3_field(j, "center");
  const auto cls = field<std::size_t>(j, "class");
  if (cls >= kEmptyLabel) throw DataError("scene: class id too large");
  obj.cls = static_cast<std::uint8_t>(cls);
  const auto vel = field_or<std::vector<double>>(j, "velocity", {0.0, 0.0});
  if (vel.size() != 2) throw DataError("scene: 'velocity' must hold 2 numbers");
  obj.vx = vel[0];
  obj.vy = vel[1];
  return obj;
}

// Visits the voxels a ray crosses, in order, in shifted lattice coordinates
// where voxel (h,w,z) covers the unit cube at (h,w,z). The callback gets the
// cell and its parameter interval; returning false stops the walk.
template <typename Visit>
void walk_ray(const geo::VoxelGridSpec& grid, const geo::Ray& ray,
              const Visit& visit) {
  detail::require(ray.dir.norm() > 1e-12, "ray: zero direction");
  const geo::Vec3 o_lat = grid.world_to_lattice(ray.origin);
  const double o[3] = {o_lat.x + 0.5, o_lat.y + 0.5, o_lat.z + 0.5};
  const double d[3] = {ray.dir.x / grid.cell, ray.dir.y / grid.cell,
                       ray.dir.z / grid.cell};
  const double ext[3] = {static_cast<double>(grid.dims[0]),
                         static_cast<double>(grid.dims[1]),
                         static_cast<double>(grid.dims[2])};

  double t_enter = 0.0, t_exit = kInf;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < 0.0 || o[a] >= ext[a]) return;
      continue;
    }
    double t0 = (0.0 - o[a]) / d[a];
    double t1 = (ext[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (t_enter > t_exit) return;

  std::int64_t cell[3];
  double pos[3], t_next[3], t_delta[3];
  std::int64_t step[3];
  for (int a = 0; a < 3; ++a) {
    pos[a] = o[a] + d[a] * t_enter;
    cell[a] = std::clamp(static_cast<std::int64_t>(std::floor(pos[a])),
                         std::int64_t{0}, static_cast<std::int64_t>(ext[a]) - 1);
    if (d[a] > 0.0) {
      step[a] = 1;
      t_next[a] = t_enter + (static_cast<double>(cell[a] + 1) - pos[a]) / d[a];
      t_delta[a] = 1.0 / d[a];
    } else if (d[a] < 0.0) {
      step[a] = -1;
      t_next[a] = t_enter + (static_cast<double>(cell[a]) - pos[a]) / d[a];
      t_delta[a] = -1.0 / d[a];
    } else {
      step[a] = 0;
      t_next[a] = kInf;
      t_delta[a] = kInf;
    }
  }

  double t_cur = t_enter;
  while (true) {
    int m = 0;
    if (t_next[1] < t_next[m]) m = 1;
    if (t_next[2] < t_next[m]) m = 2;
    if (!visit(cell, t_cur, t_next[m])) return;
    t_cur = t_next[m];
    cell[m] += step[m];
    if (cell[m] < 0 || cell[m] >= static_cast<std::int64_t>(ext[m])) return;
    t_next[m] += t_delta[m];
  }
}

std::size_t flat_cell(const geo::VoxelGridSpec& grid, const std::int64_t c[3]) {
  return grid.flatten(static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]),
                      static_cast<std::size_t>(c[2]));
}

}  // namespace

bool SceneObject::contains(const geo::Vec3& p, double dt_back) const {
  const geo::Vec3 at{center.x - vx * dt_back, center.y - vy * dt_back, center.z};
  const geo::Vec3 rel{p.x - at.x, p.y - at.y, p.z - at.z};
  if (shape == Shape::kSphere) return rel.norm() <= radius;
  const geo::Vec3 local = geo::rotation_z(-yaw).apply(rel);
  return std::abs(local.x) <= 0.5 * size.x && std::abs(local.y) <= 0.5 * size.y &&
         std::abs(local.z) <= 0.5 * size.z;
}

void SceneSpec::validate() const {
  grid.validate();
  depth_bins.validate();
  ego.validate();
  detail::require(n_classes >= 1 && n_classes < kEmptyLabel,
                  "scene: class count must be in [1, 255)");
  detail::require(ground_class < static_cast<int>(n_classes),
                  "scene: ground class out of range");
  detail::require(dt > 0.0, "scene: frame interval must be positive");
  detail::require(!cameras.empty(), "scene: at least one camera required");
  for (const auto& cam : cameras) cam.validate();
  for (const auto& obj : objects) {
    detail::require(obj.cls < n_classes, "scene: object class out of range");
    if (obj.shape == SceneObject::Shape::kBox) {
      detail::require(obj.size.x > 0.0 && obj.size.y > 0.0 && obj.size.z > 0.0,
                      "scene: box sizes must be positive");
    } else {
      detail::require(obj.radius > 0.0, "scene: sphere radius must be positive");
    }
  }
}

SceneSpec parse_scene(const std::string& text) {
  const json j = parse_json_text(text);
  SceneSpec spec;
  const json& g = member(j, "grid");
  spec.grid.origin = vec3_field(g, "origin");
  spec.grid.cell = field<double>(g, "cell");
  const auto dims = field<std::vector<std::size_t>>(g, "dims");
  if (dims.size() != 3) throw DataError("scene: 'dims' must hold 3 extents");
  std::copy(dims.begin(), dims.end(), spec.grid.dims.begin());

  spec.n_classes = field<std::size_t>(j, "n_classes");
  spec.ground_class = field_or<int>(j, "ground_class", -1);
  spec.dt = field_or<double>(j, "dt", 0.5);

  const json& bins = member(j, "depth_bins");
  spec.depth_bins.d_min = field<double>(bins, "min");
  spec.depth_bins.d_max = field<double>(bins, "max");
  spec.depth_bins.count = field<std::size_t>(bins, "count");

  if (j.contains("ego_motion") && !j.at("ego_motion").is_null()) {
    const json& e = j.at("ego_motion");
    spec.ego.prev_to_cur = geo::Mat4::from_rt(
        geo::rotation_z(field_or<double>(e, "yaw", 0.0)),
        e.contains("translation") ? vec3_field(e, "translation")
                                  : geo::Vec3{0.0, 0.0, 0.0});
  }

  const json objects = field_or<json>(j, "objects", json::array());
  if (!objects.is_array()) throw DataError("scene: 'objects' must be a list");
  for (const json& o : objects) spec.objects.push_back(parse_object(o));

  const json& cameras = member(j, "cameras");
  if (!cameras.is_array()) throw DataError("scene: 'cameras' must be a list");
  for (const json& c : cameras) spec.cameras.push_back(parse_camera(c));

  spec.validate();
  return spec;
}

SceneSpec load_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("scene: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scene(buf.str());
}

SceneData generate(const SceneSpec& spec) {
  spec.validate();
  const auto& g = spec.grid;
  SceneData out;
  out.labels_cur.assign(g.voxel_count(), kEmptyLabel);
  out.labels_prev.assign(g.voxel_count(), kEmptyLabel);
  out.flow.assign(g.voxel_count() * 2, 0.0);

  for (std::size_t h = 0; h < g.dims[0]; ++h) {
    for (std::size_t w = 0; w < g.dims[1]; ++w) {
      for (std::size_t z = 0; z < g.dims[2]; ++z) {
        const std::size_t v = g.flatten(h, w, z);
        const geo::Vec3 center = g.voxel_center(h, w, z);
        if (spec.ground_class >= 0 && z == 0) {
          out.labels_cur[v] = static_cast<std::uint8_t>(spec.ground_class);
          out.labels_prev[v] = static_cast<std::uint8_t>(spec.ground_class);
        }
        int winner = -1;
        for (std::size_t i = 0; i < spec.objects.size(); ++i)
          if (spec.objects[i].contains(center, 0.0)) winner = static_cast<int>(i);
        if (winner >= 0) {
          const SceneObject& obj = spec.objects[static_cast<std::size_t>(winner)];
          out.labels_cur[v] = obj.cls;
          out.flow[2 * v] = obj.vx;
          out.flow[2 * v + 1] = obj.vy;
        }
        // The previous frame's grid voxel, expressed in the current frame,
        // tested against the object poses one frame back.
        const geo::Vec3 back_then = spec.ego.prev_to_cur.apply_point(center);
        int prev_winner = -1;
        for (std::size_t i = 0; i < spec.objects.size(); ++i)
          if (spec.objects[i].contains(back_then, spec.dt))
            prev_winner = static_cast<int>(i);
        if (prev_winner >= 0)
          out.labels_prev[v] = spec.objects[static_cast<std::size_t>(prev_winner)].cls;
      }
    }
  }
  return out;
}

RayHit first_hit(const std::vector<std::uint8_t>& labels,
                 const geo::VoxelGridSpec& grid, const geo::Ray& ray) {
  grid.validate();
  detail::require(labels.size() == grid.voxel_count(),
                  "first_hit: label count does not match the grid");
  RayHit hit;
  walk_ray(grid, ray, [&](const std::int64_t c[3], double t_in, double) {
    const std::uint8_t cls = labels[flat_cell(grid, c)];
    if (cls == kEmptyLabel) return true;
    hit.hit = true;
    hit.voxel = {static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]),
                 static_cast<std::size_t>(c[2])};
    hit.t = t_in;
    hit.cls = cls;
    return false;
  });
  return hit;
}

double constant_class_run(const std::vector<std::uint8_t>& labels,
                          const geo::VoxelGridSpec& grid, const geo::Ray& ray) {
  grid.validate();
  detail::require(labels.size() == grid.voxel_count(),
                  "constant_class_run: label count does not match the grid");
  bool found = false;
  std::uint8_t run_cls = kEmptyLabel;
  double t_start = 0.0, t_end = 0.0;
  walk_ray(grid, ray, [&](const std::int64_t c[3], double t_in, double t_out) {
    const std::uint8_t cls = labels[flat_cell(grid, c)];
    if (!found) {
      if (cls == kEmptyLabel) return true;
      found = true;
      run_cls = cls;
      t_start = t_in;
      t_end = t_out;
      return true;
    }
    if (cls != run_cls) return false;
    t_end = t_out;
    return true;
  });
  if (!found) return 0.0;
  return (t_end - t_start) * ray.dir.norm();
}

RenderedView render_view(const std::vector<std::uint8_t>& labels,
                         const geo::VoxelGridSpec& grid,
                         const geo::CameraModel& cam) {
  cam.validate();
  RenderedView view;
  view.rows = cam.rows;
  view.cols = cam.cols;
  view.depth.assign(cam.pixel_count(), kInf);
  view.labels.assign(cam.pixel_count(), kEmptyLabel);
  for (std::size_t u = 0; u < cam.rows; ++u) {
    for (std::size_t v = 0; v < cam.cols; ++v) {
      const geo::Ray ray = geo::ray_through_pixel(cam, static_cast<double>(u),
                                                  static_cast<double>(v));
      const RayHit hit = first_hit(labels, grid, ray);
      if (!hit.hit) continue;
      view.depth[u * cam.cols + v] = hit.t;
      view.labels[u * cam.cols + v] = hit.cls;
    }
  }
  return view;
}

}  // namespace alocc::scn
