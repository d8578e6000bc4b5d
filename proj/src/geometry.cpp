#include "alocc/geometry.hpp"

#include <cmath>
#include <string>

namespace alocc::geo {

namespace {

constexpr double kOrthoTol = 1e-9;

}  // namespace

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  if (n < 1e-12) throw NumericError("normalized: near-zero vector");
  return {x / n, y / n, z / n};
}

Mat3 Mat3::identity() {
  Mat3 r;
  r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  return r;
}

Vec3 Mat3::apply(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::mul(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
      r(i, j) = acc;
    }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  return r;
}

Mat3 Mat3::inverse() const {
  const auto& a = m;
  const double c00 = a[4] * a[8] - a[5] * a[7];
  const double c01 = a[5] * a[6] - a[3] * a[8];
  const double c02 = a[3] * a[7] - a[4] * a[6];
  const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
  detail::require(std::abs(det) > 1e-12, "Mat3: matrix is singular");
  const double inv = 1.0 / det;
  Mat3 r;
  r.m = {c00 * inv,
         (a[2] * a[7] - a[1] * a[8]) * inv,
         (a[1] * a[5] - a[2] * a[4]) * inv,
         c01 * inv,
         (a[0] * a[8] - a[2] * a[6]) * inv,
         (a[2] * a[3] - a[0] * a[5]) * inv,
         c02 * inv,
         (a[1] * a[6] - a[0] * a[7]) * inv,
         (a[0] * a[4] - a[1] * a[3]) * inv};
  return r;
}

Mat3 rotation_z(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Mat3 r = Mat3::identity();
  r(0, 0) = c;
  r(0, 1) = -s;
  r(1, 0) = s;
  r(1, 1) = c;
  return r;
}

bool Mat3::is_orthonormal(double tol) const {
  const Mat3 gram = mul(transposed());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(gram(i, j) - want) > tol) return false;
    }
  return true;
}

Mat4 Mat4::identity() {
  Mat4 r;
  r.m = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  return r;
}

Mat4 Mat4::from_rt(const Mat3& rotation, const Vec3& translation) {
  Mat4 r = identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = rotation(i, j);
  r(0, 3) = translation.x;
  r(1, 3) = translation.y;
  r(2, 3) = translation.z;
  return r;
}

Mat3 Mat4::rotation() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(i, j);
  return r;
}

Vec3 Mat4::translation() const { return {(*this)(0, 3), (*this)(1, 3), (*this)(2, 3)}; }

Vec3 Mat4::apply_point(const Vec3& p) const {
  return rotation().apply(p) + translation();
}

Vec3 Mat4::apply_dir(const Vec3& d) const { return rotation().apply(d); }

Mat4 Mat4::mul(const Mat4& o) const {
  Mat4 r;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += (*this)(i, k) * o(k, j);
      r(i, j) = acc;
    }
  return r;
}

Mat4 Mat4::rigid_inverse() const {
  const Mat3 rt = rotation().transposed();
  const Vec3 t = translation();
  return from_rt(rt, rt.apply(t) * -1.0);
}

bool Mat4::is_rigid(double tol) const {
  if (!rotation().is_orthonormal(tol)) return false;
  const std::array<double, 4> bottom = {m[12], m[13], m[14], m[15]};
  return bottom[0] == 0.0 && bottom[1] == 0.0 && bottom[2] == 0.0 && bottom[3] == 1.0;
}

void CameraModel::validate() const {
  detail::require(rows > 0 && cols > 0, "camera: image size must be positive");
  intrinsics.inverse();  // throws if singular
  detail::require(cam_to_ego.is_rigid(kOrthoTol),
                  "camera: extrinsic must be rigid with orthonormal rotation");
}

CameraModel camera_look_at(const Vec3& position, const Vec3& target, double fx,
                           double fy, double cx, double cy, std::size_t rows,
                           std::size_t cols) {
  const Vec3 forward = (target - position).normalized();
  const Vec3 up{0.0, 0.0, 1.0};
  const Vec3 side = forward.cross(up);
  detail::require(side.norm() > 1e-6, "camera_look_at: view direction is vertical");
  // Camera axes in ego coordinates: z forward, y horizontal, x completing a
  // right-handed frame (pointing down-ish so image rows run top to bottom).
  const Vec3 y_axis = (forward.cross(up)).normalized() * -1.0;
  const Vec3 x_axis = y_axis.cross(forward);
  Mat3 rot;
  rot.m = {x_axis.x, y_axis.x, forward.x, x_axis.y, y_axis.y,
           forward.y, x_axis.z, y_axis.z, forward.z};
  CameraModel cam;
  cam.intrinsics = Mat3::identity();
  cam.intrinsics(0, 0) = fx;
  cam.intrinsics(1, 1) = fy;
  cam.intrinsics(0, 2) = cx;
  cam.intrinsics(1, 2) = cy;
  cam.cam_to_ego = Mat4::from_rt(rot, position);
  cam.rows = rows;
  cam.cols = cols;
  cam.validate();
  return cam;
}

void VoxelGridSpec::validate() const {
  detail::require(cell > 0.0, "grid: cell size must be positive");
  detail::require(dims[0] > 0 && dims[1] > 0 && dims[2] > 0,
                  "grid: all dimensions must be positive");
}

Vec3 VoxelGridSpec::world_to_lattice(const Vec3& p) const {
  return {(p.x - origin.x) / cell, (p.y - origin.y) / cell, (p.z - origin.z) / cell};
}

Vec3 VoxelGridSpec::lattice_to_world(const Vec3& q) const {
  return {origin.x + q.x * cell, origin.y + q.y * cell, origin.z + q.z * cell};
}

Vec3 VoxelGridSpec::voxel_center(std::size_t h, std::size_t w, std::size_t z) const {
  return lattice_to_world({static_cast<double>(h), static_cast<double>(w),
                           static_cast<double>(z)});
}

void DepthBinSpec::validate() const {
  detail::require(count > 0, "depth bins: need at least one bin");
  detail::require(d_min > 0.0 && d_max > d_min,
                  "depth bins: need 0 < d_min < d_max");
}

std::vector<double> uniform_depth_bins(const DepthBinSpec& spec) {
  spec.validate();
  std::vector<double> centers(spec.count);
  const double w = spec.width();
  for (std::size_t k = 0; k < spec.count; ++k)
    centers[k] = spec.d_min + (static_cast<double>(k) + 0.5) * w;
  return centers;
}

std::vector<BinWeight> depth_to_bin_weights(const DepthBinSpec& spec, double depth) {
  spec.validate();
  detail::require(std::isfinite(depth), "depth_to_bin_weights: depth must be finite");
  const double pos = (depth - spec.d_min) / spec.width() - 0.5;
  if (pos <= 0.0) return {{0, 1.0}};
  if (pos >= static_cast<double>(spec.count - 1)) return {{spec.count - 1, 1.0}};
  const double lo = std::floor(pos);
  const double frac = pos - lo;
  const std::size_t k = static_cast<std::size_t>(lo);
  if (frac == 0.0) return {{k, 1.0}};
  return {{k, 1.0 - frac}, {k + 1, frac}};
}

void EgoMotion::validate() const {
  detail::require(prev_to_cur.is_rigid(kOrthoTol),
                  "ego motion: transform must be rigid with orthonormal rotation");
}

Vec3 ics_to_vcs(const CameraModel& cam, const VoxelGridSpec& grid, double u, double v,
                double d) {
  const Vec3 cam_point = cam.intrinsics.inverse().apply({u, v, 1.0}) * d;
  return grid.world_to_lattice(cam.cam_to_ego.apply_point(cam_point));
}

PixelDepth vcs_to_ics(const CameraModel& cam, const VoxelGridSpec& grid,
                      const Vec3& lattice) {
  const Vec3 world = grid.lattice_to_world(lattice);
  const Vec3 cam_point = cam.cam_to_ego.rigid_inverse().apply_point(world);
  PixelDepth out{0.0, 0.0, cam_point.z};
  if (cam_point.z == 0.0) return out;
  const Vec3 pix = cam.intrinsics.apply(
      {cam_point.x / cam_point.z, cam_point.y / cam_point.z, 1.0});
  out.u = pix.x;
  out.v = pix.y;
  return out;
}

PixelToLatticeAffine pixel_to_lattice_affine(const CameraModel& cam,
                                             const VoxelGridSpec& grid, double d) {
  // lattice = (R_we (d K^-1 p) + t - origin) / cell with p = (u, v, 1):
  // linear in (u, v) once d is fixed.
  const Mat3 kinv = cam.intrinsics.inverse();
  const Mat3 rot = cam.cam_to_ego.rotation();
  const Mat3 a = rot.mul(kinv);
  const Vec3 t = cam.cam_to_ego.translation();
  PixelToLatticeAffine out;
  const double scale = d / grid.cell;
  const std::array<double, 3> origin = {grid.origin.x, grid.origin.y, grid.origin.z};
  const std::array<double, 3> trans = {t.x, t.y, t.z};
  for (int axis = 0; axis < 3; ++axis) {
    out.coeff[static_cast<std::size_t>(axis)] = {a(axis, 0) * scale,
                                                 a(axis, 1) * scale};
    out.offset[static_cast<std::size_t>(axis)] =
        a(axis, 2) * scale +
        (trans[static_cast<std::size_t>(axis)] - origin[static_cast<std::size_t>(axis)]) /
            grid.cell;
  }
  return out;
}

Ray ray_through_pixel(const CameraModel& cam, double u, double v) {
  Ray r;
  r.origin = cam.cam_to_ego.translation();
  r.dir = cam.cam_to_ego.apply_dir(cam.intrinsics.inverse().apply({u, v, 1.0}));
  return r;
}

std::array<std::size_t, 2> bev_dims(const VoxelGridSpec& grid, std::size_t factor) {
  detail::require(factor > 0, "bev: pooling factor must be positive");
  detail::require(grid.dims[0] % factor == 0 && grid.dims[1] % factor == 0,
                  "bev: grid extents must divide by the pooling factor");
  return {grid.dims[0] / factor, grid.dims[1] / factor};
}

std::array<double, 2> bev_cell_center_lattice(std::size_t i, std::size_t j,
                                              std::size_t factor) {
  const double half = (static_cast<double>(factor) - 1.0) / 2.0;
  return {static_cast<double>(i * factor) + half, static_cast<double>(j * factor) + half};
}

ng::Tensor warp_bev(ng::Tape& tape, const ng::Tensor& prev, const EgoMotion& motion,
                    const VoxelGridSpec& grid, std::size_t factor) {
  motion.validate();
  const auto dims = bev_dims(grid, factor);
  detail::require(prev.shape().size() == 3 && prev.shape()[0] == dims[0] &&
                      prev.shape()[1] == dims[1],
                  "warp_bev: map shape " + ng::shape_str(prev.shape()) +
                      " does not match the grid at this pooling factor");

  // Compose world->lattice, inverse motion, lattice->world into one affine
  // map acting directly on lattice coordinates. Composing first keeps the
  // identity motion an exact identity map, so integer sample positions stay
  // integers and the result is bit-identical to the input.
  const Mat4 inv = motion.prev_to_cur.rigid_inverse();
  const Mat3 rot = inv.rotation();
  detail::require(std::abs(rot(0, 2)) <= kOrthoTol && std::abs(rot(1, 2)) <= kOrthoTol &&
                      std::abs(rot(2, 0)) <= kOrthoTol && std::abs(rot(2, 1)) <= kOrthoTol,
                  "warp_bev: ego motion must be planar");
  const Vec3 t = inv.translation();
  const Vec3 shifted = {(rot(0, 0) * grid.origin.x + rot(0, 1) * grid.origin.y +
                         rot(0, 2) * grid.origin.z + t.x - grid.origin.x) /
                            grid.cell,
                        (rot(1, 0) * grid.origin.x + rot(1, 1) * grid.origin.y +
                         rot(1, 2) * grid.origin.z + t.y - grid.origin.y) /
                            grid.cell,
                        0.0};

  const double inv_f = 1.0 / static_cast<double>(factor);
  const double half = (static_cast<double>(factor) - 1.0) / 2.0;
  std::vector<double> coords;
  coords.reserve(dims[0] * dims[1] * 2);
  const bool is_identity = rot(0, 0) == 1.0 && rot(0, 1) == 0.0 && rot(1, 0) == 0.0 &&
                           rot(1, 1) == 1.0 && shifted.x == 0.0 && shifted.y == 0.0;
  for (std::size_t i = 0; i < dims[0]; ++i) {
    for (std::size_t j = 0; j < dims[1]; ++j) {
      if (is_identity) {
        coords.push_back(static_cast<double>(i));
        coords.push_back(static_cast<double>(j));
        continue;
      }
      const auto center = bev_cell_center_lattice(i, j, factor);
      const double h = rot(0, 0) * center[0] + rot(0, 1) * center[1] + shifted.x;
      const double w = rot(1, 0) * center[0] + rot(1, 1) * center[1] + shifted.y;
      coords.push_back((h - half) * inv_f);
      coords.push_back((w - half) * inv_f);
    }
  }
  const std::size_t channels = prev.shape()[2];
  const ng::Tensor flat = tape.bilinear_sample_2d(prev, coords);
  return flat.reshaped({dims[0], dims[1], channels});
}

}  // namespace alocc::geo
