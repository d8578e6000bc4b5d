#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "alocc/geometry.hpp"
#include "alocc/labels.hpp"

namespace alocc::scn {

// One solid in the scene. Boxes are axis-sized and rotated by `yaw` about
// world z; spheres use `radius`. `vx, vy` is a constant ground-plane velocity
// in m/s: the object sits at `center` in the current frame and at
// center - (vx, vy, 0) * dt one frame earlier.
struct SceneObject {
  enum class Shape { kBox, kSphere };

  Shape shape = Shape::kBox;
  geo::Vec3 center{};
  geo::Vec3 size{};     // box edge lengths
  double radius = 0.0;  // sphere radius
  double yaw = 0.0;
  std::uint8_t cls = 0;
  double vx = 0.0;
  double vy = 0.0;

  // Membership of a world point against the pose `dt_back` seconds ago.
  bool contains(const geo::Vec3& p, double dt_back) const;
};

// Declarative scene description, loaded from JSON. Objects later in the list
// win where they overlap earlier ones; the optional ground plane paints the
// z = 0 voxel layer and loses to every object.
struct SceneSpec {
  geo::VoxelGridSpec grid;
  std::size_t n_classes = 1;
  int ground_class = -1;  // < 0: no ground plane
  double dt = 0.5;        // seconds between the two frames
  geo::DepthBinSpec depth_bins;
  geo::EgoMotion ego;  // previous ego frame -> current ego frame
  std::vector<SceneObject> objects;
  std::vector<geo::CameraModel> cameras;

  void validate() const;
};

// Both throw DataError on malformed or incomplete JSON.
SceneSpec parse_scene(const std::string& text);
SceneSpec load_scene(const std::string& path);

// Voxelized scene at the two frames plus per-voxel ground-truth velocity.
// Current-frame voxels covered by a moving object carry its (vx, vy); all
// other voxels carry zero.
struct SceneData {
  std::vector<std::uint8_t> labels_cur;
  std::vector<std::uint8_t> labels_prev;
  std::vector<double> flow;  // voxel_count * 2, interleaved (x, y), m/s
};

SceneData generate(const SceneSpec& spec);

// First occupied voxel along a ray, found by exact lattice traversal. `t` is
// the ray parameter at the voxel's entry face (0 when the origin starts
// inside an occupied voxel), so its unit depends on the ray: metric length
// for unit directions, camera-frame depth for pixel rays.
struct RayHit {
  bool hit = false;
  std::array<std::size_t, 3> voxel{};
  double t = 0.0;
  std::uint8_t cls = kEmptyLabel;
};

RayHit first_hit(const std::vector<std::uint8_t>& labels,
                 const geo::VoxelGridSpec& grid, const geo::Ray& ray);

// Euclidean length of the contiguous run of the first-hit class along the
// ray (the stretch a surface at the hit plausibly occludes); 0 on a miss.
double constant_class_run(const std::vector<std::uint8_t>& labels,
                          const geo::VoxelGridSpec& grid, const geo::Ray& ray);

// Per-pixel first-hit depth and class maps for a camera. Misses read as
// +infinity / kEmptyLabel.
struct RenderedView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> depth;          // camera-frame z at the first surface
  std::vector<std::uint8_t> labels;
};

RenderedView render_view(const std::vector<std::uint8_t>& labels,
                         const geo::VoxelGridSpec& grid,
                         const geo::CameraModel& cam);

}  // namespace alocc::scn
