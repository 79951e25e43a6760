#include "faxbev/geometry.hpp"

#include <cmath>

#include "faxbev/ops.hpp"

namespace faxbev {

Pose2D::Pose2D(double x_, double y_, double yaw_) : x(x_), y(y_), yaw(normalize_yaw(yaw_)) {}

double Pose2D::normalize_yaw(double yaw) {
  double two_pi = 2.0 * M_PI;
  yaw = std::fmod(yaw, two_pi);
  if (yaw <= -M_PI) yaw += two_pi;
  if (yaw > M_PI) yaw -= two_pi;
  return yaw;
}

Mat3 Mat3::identity() {
  Mat3 out;
  out.m[0] = out.m[4] = out.m[8] = 1.0;
  return out;
}

Vec3 Mat3::mul(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
          m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::transposed() const {
  Mat3 out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.m[i * 3 + j] = m[j * 3 + i];
  }
  return out;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Mat3 Mat3::inverse() const {
  double d = det();
  if (std::abs(d) < 1e-12) {
    throw ConfigError("Mat3::inverse: singular matrix (det = " + std::to_string(d) + ")");
  }
  double inv = 1.0 / d;
  Mat3 out;
  out.m[0] = (m[4] * m[8] - m[5] * m[7]) * inv;
  out.m[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
  out.m[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
  out.m[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
  out.m[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
  out.m[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
  out.m[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
  out.m[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
  out.m[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
  return out;
}

void CameraRig::validate() const {
  if (k.m[3] != 0.0 || k.m[6] != 0.0 || k.m[7] != 0.0) {
    throw ConfigError("CameraRig: K must be upper-triangular");
  }
  if (k.m[0] <= 0.0 || k.m[4] <= 0.0) {
    throw ConfigError("CameraRig: K focal entries must be positive");
  }
  // R^T R = I within 1e-6
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int l = 0; l < 3; ++l) acc += r.m[l * 3 + i] * r.m[l * 3 + j];
      double want = i == j ? 1.0 : 0.0;
      if (std::abs(acc - want) > 1e-6) {
        throw ConfigError("CameraRig: R is not orthonormal within 1e-6");
      }
    }
  }
  if (image_h < 1 || image_w < 1) throw ConfigError("CameraRig: empty image");
}

Vec3 CameraRig::forward_axis() const {
  // camera z axis expressed in the agent frame = third row of R
  return {r.m[6], r.m[7], r.m[8]};
}

Vec3 CameraRig::origin_in_agent() const {
  Vec3 v = r.transposed().mul(t);
  return {-v.x, -v.y, -v.z};
}

CameraRig make_yaw_rig(double yaw, int image_h, int image_w, double fov_x_rad,
                       double fov_y_rad, double height) {
  CameraRig rig;
  double cy = std::cos(yaw), sy = std::sin(yaw);
  // rows: right (x_cam), down (y_cam), forward (z_cam) in the agent frame
  rig.r.m[0] = sy;   rig.r.m[1] = -cy;  rig.r.m[2] = 0;
  rig.r.m[3] = 0;    rig.r.m[4] = 0;    rig.r.m[5] = -1;
  rig.r.m[6] = cy;   rig.r.m[7] = sy;   rig.r.m[8] = 0;
  Vec3 origin{0, 0, height};
  Vec3 rt = rig.r.mul(origin);
  rig.t = {-rt.x, -rt.y, -rt.z};
  double fx = (static_cast<double>(image_w) / 2.0) / std::tan(fov_x_rad / 2.0);
  double fy = (static_cast<double>(image_h) / 2.0) / std::tan(fov_y_rad / 2.0);
  rig.k.m[0] = fx;
  rig.k.m[4] = fy;
  rig.k.m[2] = static_cast<double>(image_w) / 2.0;
  rig.k.m[5] = static_cast<double>(image_h) / 2.0;
  rig.k.m[8] = 1.0;
  rig.image_h = image_h;
  rig.image_w = image_w;
  return rig;
}

void BevGrid::cell_center(double r, double c, double* x, double* y) const {
  *x = (static_cast<double>(h) / 2.0 - r - 0.5) * meters_per_cell;
  *y = (static_cast<double>(w) / 2.0 - c - 0.5) * meters_per_cell;
}

void BevGrid::to_cell(double x, double y, double* r, double* c) const {
  *r = static_cast<double>(h) / 2.0 - x / meters_per_cell - 0.5;
  *c = static_cast<double>(w) / 2.0 - y / meters_per_cell - 0.5;
}

Tensor warp_features(const Tensor& feat, const Pose2D& sender, const Pose2D& ego,
                     const BevGrid& grid) {
  if (feat.rank() != 3 || feat.dim(0) != grid.h || feat.dim(1) != grid.w) {
    throw ShapeError("warp_features: feature " + shape_str(feat.shape()) +
                     " does not match grid " + std::to_string(grid.h) + "x" +
                     std::to_string(grid.w));
  }
  if (!std::isfinite(sender.x) || !std::isfinite(sender.y) || !std::isfinite(sender.yaw) ||
      !std::isfinite(ego.x) || !std::isfinite(ego.y) || !std::isfinite(ego.yaw)) {
    throw ConfigError("warp_features: poses must be finite");
  }
  int64_t H = grid.h, W = grid.w, C = feat.dim(2);

  // ego cell -> world -> sender frame, precomputed per output cell
  double ce = std::cos(ego.yaw), se = std::sin(ego.yaw);
  double cs = std::cos(sender.yaw), ss = std::sin(sender.yaw);
  struct Tap {
    int64_t idx[4];
    double w[4];
    int count = 0;
  };
  std::vector<Tap> taps(static_cast<size_t>(H * W));
  for (int64_t r = 0; r < H; ++r) {
    for (int64_t c = 0; c < W; ++c) {
      double xe, ye;
      grid.cell_center(static_cast<double>(r), static_cast<double>(c), &xe, &ye);
      double xw = ego.x + ce * xe - se * ye;
      double yw = ego.y + se * xe + ce * ye;
      double dx = xw - sender.x, dy = yw - sender.y;
      double xs = cs * dx + ss * dy;
      double ys = -ss * dx + cs * dy;
      double rf, cf;
      grid.to_cell(xs, ys, &rf, &cf);
      Tap& tap = taps[static_cast<size_t>(r * W + c)];
      int64_t r0 = static_cast<int64_t>(std::floor(rf));
      int64_t c0 = static_cast<int64_t>(std::floor(cf));
      double ar = rf - static_cast<double>(r0);
      double ac = cf - static_cast<double>(c0);
      const double wts[4] = {(1 - ar) * (1 - ac), (1 - ar) * ac, ar * (1 - ac), ar * ac};
      const int64_t rows[4] = {r0, r0, r0 + 1, r0 + 1};
      const int64_t cols[4] = {c0, c0 + 1, c0, c0 + 1};
      for (int i = 0; i < 4; ++i) {
        if (rows[i] < 0 || rows[i] >= H || cols[i] < 0 || cols[i] >= W) continue;
        if (wts[i] == 0.0) continue;
        tap.idx[tap.count] = (rows[i] * W + cols[i]) * C;
        tap.w[tap.count] = wts[i];
        ++tap.count;
      }
    }
  }

  auto out = detail::make_node({H, W, C}, feat.dtype(), feat.requires_grad(),
                               {feat.node()});
  const double* pf = feat.values().data();
  double* po = out->values.data();
  for (int64_t p = 0; p < H * W; ++p) {
    const Tap& tap = taps[static_cast<size_t>(p)];
    double* o = po + p * C;
    for (int t = 0; t < tap.count; ++t) {
      const double* src = pf + tap.idx[t];
      double w = tap.w[t];
      for (int64_t ch = 0; ch < C; ++ch) o[ch] += w * src[ch];
    }
  }
  detail::finalize(*out);

  if (out->requires_grad) {
    auto nf = feat.node();
    out->backprop = [nf, taps, H, W, C](detail::Node& self) {
      double* gf = detail::ensure_grad(*nf).data();
      const double* g = self.grad.data();
      for (int64_t p = 0; p < H * W; ++p) {
        const Tap& tap = taps[static_cast<size_t>(p)];
        const double* gr = g + p * C;
        for (int t = 0; t < tap.count; ++t) {
          double* dst = gf + tap.idx[t];
          double w = tap.w[t];
          for (int64_t ch = 0; ch < C; ++ch) dst[ch] += w * gr[ch];
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor camera_ray_features(const CameraRig& rig, int64_t feat_h, int64_t feat_w,
                           Dtype dt) {
  rig.validate();
  Mat3 kinv = rig.k.inverse();
  Mat3 rt = rig.r.transposed();
  Vec3 origin = rig.origin_in_agent();
  std::vector<double> vals;
  vals.reserve(static_cast<size_t>(feat_h * feat_w * 6));
  double sx = static_cast<double>(rig.image_w) / static_cast<double>(feat_w);
  double sy = static_cast<double>(rig.image_h) / static_cast<double>(feat_h);
  for (int64_t iy = 0; iy < feat_h; ++iy) {
    for (int64_t ix = 0; ix < feat_w; ++ix) {
      double u = (static_cast<double>(ix) + 0.5) * sx;
      double v = (static_cast<double>(iy) + 0.5) * sy;
      Vec3 dc = kinv.mul({u, v, 1.0});
      Vec3 de = rt.mul(dc);
      double norm = std::sqrt(de.x * de.x + de.y * de.y + de.z * de.z);
      vals.push_back(de.x / norm);
      vals.push_back(de.y / norm);
      vals.push_back(de.z / norm);
      vals.push_back(origin.x);
      vals.push_back(origin.y);
      vals.push_back(origin.z);
    }
  }
  return Tensor::from_data({feat_h, feat_w, 6}, std::move(vals), dt);
}

Tensor camera_positional_encoding(const CameraRig& rig, int64_t feat_h,
                                  int64_t feat_w, const Tensor& proj) {
  if (proj.rank() != 2 || proj.dim(0) != 6) {
    throw ShapeError("camera_positional_encoding: proj must be [6, C], got " +
                     shape_str(proj.shape()));
  }
  Tensor rays = camera_ray_features(rig, feat_h, feat_w, proj.dtype());
  return linear(rays, proj);
}

std::vector<char> in_comm_range(const std::vector<Pose2D>& poses, size_t ego_index,
                                double range_m) {
  if (ego_index >= poses.size()) {
    throw UsageError("in_comm_range: ego index " + std::to_string(ego_index) +
                     " out of range for " + std::to_string(poses.size()) + " poses");
  }
  std::vector<char> valid(poses.size(), 0);
  const Pose2D& ego = poses[ego_index];
  for (size_t i = 0; i < poses.size(); ++i) {
    double dx = poses[i].x - ego.x, dy = poses[i].y - ego.y;
    valid[i] = (i == ego_index) || (std::sqrt(dx * dx + dy * dy) <= range_m);
  }
  return valid;
}

}  // namespace faxbev
