#pragma once

#include <vector>

#include "faxbev/tensor.hpp"

namespace faxbev {

// World/vehicle frame convention: x forward, y left, z up; yaw is CCW about
// z and normalized to (-pi, pi].
struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  Pose2D() = default;
  Pose2D(double x_, double y_, double yaw_);
  static double normalize_yaw(double yaw);
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct Mat3 {
  double m[9] = {0};  // row-major

  static Mat3 identity();
  Vec3 mul(const Vec3& v) const;
  Mat3 transposed() const;
  Mat3 inverse() const;  // throws ConfigError if singular
  double det() const;
};

// Pinhole camera mounted on an agent: x_cam = R * p_agent + t. Camera frame
// is z forward, x right, y down.
struct CameraRig {
  Mat3 k;
  Mat3 r;
  Vec3 t;
  int image_h = 0;
  int image_w = 0;

  // K upper-triangular with positive focals, R orthonormal within 1e-6.
  void validate() const;
  Vec3 forward_axis() const;    // camera z in agent frame
  Vec3 origin_in_agent() const; // -R^T t
};

// Camera with yaw offset from the agent heading, centered fov, origin at the
// agent position raised by `height`.
CameraRig make_yaw_rig(double yaw, int image_h, int image_w, double fov_x_rad,
                       double fov_y_rad, double height = 1.6);

// Ego-centered raster: row 0 = front, column 0 = left, ego at the center.
struct BevGrid {
  int64_t h = 0;
  int64_t w = 0;
  double meters_per_cell = 0.0;

  double extent_m() const { return static_cast<double>(h) * meters_per_cell; }
  // center of cell (r, c) in ego coordinates
  void cell_center(double r, double c, double* x, double* y) const;
  // continuous cell coordinates of an ego-frame point
  void to_cell(double x, double y, double* r, double* c) const;
};

// Resamples a sender-frame BEV feature map into the ego frame (the spatial
// warp Gamma_xi). Bilinear with zero padding; differentiable w.r.t. feat.
Tensor warp_features(const Tensor& feat, const Pose2D& sender, const Pose2D& ego,
                     const BevGrid& grid);

// Unit ray direction (agent frame) and camera origin per feature pixel:
// [hf, wf, 6] = (dx, dy, dz, ox, oy, oz). Constant w.r.t. parameters.
Tensor camera_ray_features(const CameraRig& rig, int64_t feat_h, int64_t feat_w,
                           Dtype dt = Dtype::F32);

// Linear projection of the ray features to `C = proj.dim(1)` channels.
Tensor camera_positional_encoding(const CameraRig& rig, int64_t feat_h,
                                  int64_t feat_w, const Tensor& proj);

// validity[i] = distance(poses[i], poses[ego_index]) <= range_m (inclusive);
// the ego entry is always valid.
std::vector<char> in_comm_range(const std::vector<Pose2D>& poses, size_t ego_index,
                                double range_m);

}  // namespace faxbev
