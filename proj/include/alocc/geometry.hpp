#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "alocc/tape.hpp"
#include "alocc/tensor.hpp"

namespace alocc::geo {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const;
  Vec3 normalized() const;  // throws NumericError on a near-zero vector
};

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity();
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
  Vec3 apply(const Vec3& v) const;
  Mat3 mul(const Mat3& o) const;
  Mat3 transposed() const;
  Mat3 inverse() const;  // throws ContractError if singular
  bool is_orthonormal(double tol) const;
};

// Counter-clockwise rotation by `angle` radians about the world z axis.
Mat3 rotation_z(double angle);

// Row-major 4x4 rigid transform (rotation + translation).
struct Mat4 {
  std::array<double, 16> m{};

  static Mat4 identity();
  static Mat4 from_rt(const Mat3& rotation, const Vec3& translation);
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 4 + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 4 + c)]; }
  Mat3 rotation() const;
  Vec3 translation() const;
  Vec3 apply_point(const Vec3& p) const;
  Vec3 apply_dir(const Vec3& d) const;
  Mat4 mul(const Mat4& o) const;
  // Inverse assuming rigidity: R^T, -R^T t. Validated by the callers that
  // construct these transforms.
  Mat4 rigid_inverse() const;
  bool is_rigid(double tol) const;
};

// Pinhole camera in ego coordinates. The camera looks along its +z axis;
// a pixel (u,v) at depth d maps to the camera-frame point d * K^-1 (u,v,1),
// so "depth" is the camera-frame z coordinate, not ray length.
struct CameraModel {
  Mat3 intrinsics;   // K, invertible
  Mat4 cam_to_ego;   // rigid, rotation orthonormal within 1e-9
  std::size_t rows = 0;  // image height, u in [0, rows)
  std::size_t cols = 0;  // image width, v in [0, cols)

  void validate() const;
  std::size_t pixel_count() const { return rows * cols; }
};

// Convenience constructor: camera at `position` looking at `target`, image
// x axis (rows) roughly vertical, y axis (cols) horizontal. `fx, fy, cx, cy`
// fill the intrinsics. Throws if the view direction is near vertical.
CameraModel camera_look_at(const Vec3& position, const Vec3& target, double fx,
                           double fy, double cx, double cy, std::size_t rows,
                           std::size_t cols);

// Axis-aligned voxel lattice. Voxel (h,w,z) is centered at
// origin + (h,w,z) * cell, i.e. integer lattice coordinates are voxel centers
// and a voxel's cube extends half a cell on each side.
struct VoxelGridSpec {
  Vec3 origin;        // world position of voxel (0,0,0)'s center
  double cell = 0.0;  // edge length, > 0
  std::array<std::size_t, 3> dims{};  // (h, w, z) extents, all > 0

  void validate() const;
  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t flatten(std::size_t h, std::size_t w, std::size_t z) const {
    return (h * dims[1] + w) * dims[2] + z;
  }
  bool contains(std::int64_t h, std::int64_t w, std::int64_t z) const {
    return h >= 0 && w >= 0 && z >= 0 && h < static_cast<std::int64_t>(dims[0]) &&
           w < static_cast<std::int64_t>(dims[1]) && z < static_cast<std::int64_t>(dims[2]);
  }
  // Continuous lattice coordinates of a world point: (p - origin) / cell.
  Vec3 world_to_lattice(const Vec3& p) const;
  Vec3 lattice_to_world(const Vec3& q) const;
  Vec3 voxel_center(std::size_t h, std::size_t w, std::size_t z) const;
};

// Uniform depth binning over [d_min, d_max): bin k covers
// [d_min + k*width, d_min + (k+1)*width) with its center in the middle.
struct DepthBinSpec {
  double d_min = 0.0;
  double d_max = 0.0;
  std::size_t count = 0;

  void validate() const;
  double width() const { return (d_max - d_min) / static_cast<double>(count); }
};

std::vector<double> uniform_depth_bins(const DepthBinSpec& spec);

// Linear split of a depth value across the two nearest bin centers; depths
// beyond the first/last center clamp to that edge bin. Returns one or two
// (bin, weight) pairs with weights summing to 1.
struct BinWeight {
  std::size_t bin;
  double weight;
};
std::vector<BinWeight> depth_to_bin_weights(const DepthBinSpec& spec, double depth);

// Rigid transform taking ego-frame coordinates at t-1 into ego-frame
// coordinates at t.
struct EgoMotion {
  Mat4 prev_to_cur = Mat4::identity();

  void validate() const;
};

// Continuous lattice coordinates of the pixel (u,v) at camera-frame depth d.
Vec3 ics_to_vcs(const CameraModel& cam, const VoxelGridSpec& grid, double u, double v,
                double d);

// Inverse of ics_to_vcs. Returns (u, v, d); d <= 0 means the point lies
// behind the camera plane and cannot be re-projected meaningfully.
struct PixelDepth {
  double u, v, d;
};
PixelDepth vcs_to_ics(const CameraModel& cam, const VoxelGridSpec& grid,
                      const Vec3& lattice);

// Affine map (u,v) -> lattice coordinates at a fixed depth d:
// lattice[a] = coeff[a][0]*u + coeff[a][1]*v + offset[a]. This is the
// tape-friendly form of ics_to_vcs used when pixel offsets are learnable.
struct PixelToLatticeAffine {
  std::array<std::array<double, 2>, 3> coeff{};
  std::array<double, 3> offset{};
};
PixelToLatticeAffine pixel_to_lattice_affine(const CameraModel& cam,
                                             const VoxelGridSpec& grid, double d);

// Ray through pixel (u,v): point(d) = origin + d * dir with d the
// camera-frame depth. dir is not unit length; scale by dir.norm() to convert
// the parameter to metric distance.
struct Ray {
  Vec3 origin;
  Vec3 dir;
};
Ray ray_through_pixel(const CameraModel& cam, double u, double v);

// Dimensions of the pooled top-down map for a grid and pooling factor; both
// horizontal extents must divide evenly.
std::array<std::size_t, 2> bev_dims(const VoxelGridSpec& grid, std::size_t factor);

// Continuous lattice (h,w) coordinates of a pooled cell's center.
std::array<double, 2> bev_cell_center_lattice(std::size_t i, std::size_t j,
                                              std::size_t factor);

// Re-samples a top-down feature map from the previous frame into the current
// frame under the ego motion. prev is [H', W', C] at the given pooling factor
// of the grid; samples that fall outside the map read as zero. The motion must
// be planar (no tilt); identity motion reproduces the input bit-exactly.
// Differentiable w.r.t. prev.
ng::Tensor warp_bev(ng::Tape& tape, const ng::Tensor& prev, const EgoMotion& motion,
                    const VoxelGridSpec& grid, std::size_t factor);

}  // namespace alocc::geo
