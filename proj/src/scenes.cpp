#include "faxbev/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace faxbev {

namespace {

constexpr double kLosEps = 1e-3;

struct Rgb {
  double r, g, b;
};
constexpr Rgb kSky{0.30, 0.45, 0.70};
constexpr Rgb kGround{0.32, 0.30, 0.28};
constexpr Rgb kVehicle{0.85, 0.12, 0.10};

}  // namespace

bool OrientedBox::contains(double x, double y) const {
  double c = std::cos(yaw), s = std::sin(yaw);
  double dx = x - cx, dy = y - cy;
  double bx = c * dx + s * dy;
  double by = -s * dx + c * dy;
  return std::abs(bx) < len / 2.0 && std::abs(by) < wid / 2.0;
}

double OrientedBox::segment_hit(double ax, double ay, double bx, double by) const {
  double c = std::cos(yaw), s = std::sin(yaw);
  auto to_box = [&](double x, double y, double* ox, double* oy) {
    double dx = x - cx, dy = y - cy;
    *ox = c * dx + s * dy;
    *oy = -s * dx + c * dy;
  };
  double ax_b, ay_b, bx_b, by_b;
  to_box(ax, ay, &ax_b, &ay_b);
  to_box(bx, by, &bx_b, &by_b);
  double dx = bx_b - ax_b, dy = by_b - ay_b;
  double t0 = 0.0, t1 = 1.0;
  const double lo[2] = {-len / 2.0, -wid / 2.0};
  const double hi[2] = {len / 2.0, wid / 2.0};
  const double o[2] = {ax_b, ay_b};
  const double d[2] = {dx, dy};
  for (int axis = 0; axis < 2; ++axis) {
    if (std::abs(d[axis]) < 1e-12) {
      if (o[axis] < lo[axis] || o[axis] > hi[axis]) return -1.0;
      continue;
    }
    double ta = (lo[axis] - o[axis]) / d[axis];
    double tb = (hi[axis] - o[axis]) / d[axis];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return -1.0;
  }
  return t0;
}

bool LayoutPoly::contains(double x, double y) const {
  // even-odd crossing rule
  bool inside = false;
  size_t n = xs.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    bool crosses = (ys[i] > y) != (ys[j] > y);
    if (crosses) {
      double t = (y - ys[j]) / (ys[i] - ys[j]);
      double xc = xs[j] + t * (xs[i] - xs[j]);
      if (x < xc) inside = !inside;
    }
  }
  return inside;
}

bool box_visible_from(const SceneSample& scene, size_t box_index, double ax, double ay) {
  const OrientedBox& box = scene.boxes[box_index];
  double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const int samples = 16;
  for (int i = 0; i < samples; ++i) {
    // walk the rectangle perimeter
    double u = static_cast<double>(i) / samples * 4.0;
    double bx, by;
    double hl = box.len / 2.0, hw = box.wid / 2.0;
    if (u < 1.0) {
      bx = -hl + 2 * hl * u;
      by = -hw;
    } else if (u < 2.0) {
      bx = hl;
      by = -hw + 2 * hw * (u - 1.0);
    } else if (u < 3.0) {
      bx = hl - 2 * hl * (u - 2.0);
      by = hw;
    } else {
      bx = -hl;
      by = hw - 2 * hw * (u - 3.0);
    }
    double px = box.cx + c * bx - s * by;
    double py = box.cy + s * bx + c * by;
    bool blocked = false;
    for (size_t b = 0; b < scene.boxes.size(); ++b) {
      if (b == box_index) continue;
      double t = scene.boxes[b].segment_hit(ax, ay, px, py);
      if (t >= 0.0 && t < 1.0 - kLosEps) {
        blocked = true;
        break;
      }
    }
    if (!blocked) return true;
  }
  return false;
}

namespace {

std::vector<CameraRig> default_rigs(const SceneGenConfig& cfg) {
  std::vector<CameraRig> rigs;
  double fx = cfg.fov_x_deg * M_PI / 180.0;
  double fy = cfg.fov_y_deg * M_PI / 180.0;
  for (int k = 0; k < cfg.cameras; ++k) {
    double yaw = 2.0 * M_PI * static_cast<double>(k) / cfg.cameras;
    rigs.push_back(make_yaw_rig(Pose2D::normalize_yaw(yaw), cfg.image_h, cfg.image_w, fx, fy));
  }
  return rigs;
}

bool clear_of_boxes(const std::vector<OrientedBox>& boxes, double x, double y,
                    double min_dist) {
  for (const OrientedBox& b : boxes) {
    double dx = b.cx - x, dy = b.cy - y;
    if (std::sqrt(dx * dx + dy * dy) < min_dist) return false;
  }
  return true;
}

bool clear_of_agents(const std::vector<AgentDef>& agents, double x, double y,
                     double min_dist) {
  for (const AgentDef& a : agents) {
    double dx = a.pose.x - x, dy = a.pose.y - y;
    if (std::sqrt(dx * dx + dy * dy) < min_dist) return false;
  }
  return true;
}

std::vector<LayoutPoly> make_layout(bool crossroad) {
  std::vector<LayoutPoly> layout;
  auto rect = [](double x0, double y0, double x1, double y1, int cls) {
    LayoutPoly p;
    p.xs = {x0, x1, x1, x0};
    p.ys = {y0, y0, y1, y1};
    p.cls = cls;
    return p;
  };
  layout.push_back(rect(-45, -7, 45, 7, 1));            // main road
  layout.push_back(rect(-45, -0.25, 45, 0.25, 2));      // center line
  if (crossroad) {
    layout.push_back(rect(-7, -45, 7, 45, 1));
    LayoutPoly lane = rect(-0.25, -45, 0.25, 45, 2);
    layout.push_back(lane);
  }
  return layout;
}

// Builds one candidate scene; the caller validates the occlusion guarantee.
SceneSample build_candidate(const SceneGenConfig& cfg, uint64_t seed, Rng& rng,
                            bool want_occlusion) {
  SceneSample scene;
  scene.seed = seed;
  bool crossroad = (rng.bits() & 1) != 0;
  scene.layout = make_layout(crossroad);
  auto rigs = default_rigs(cfg);

  int n_agents = static_cast<int>(rng.uniform_int(cfg.min_agents, cfg.max_agents));

  // ego on the main road
  AgentDef ego;
  ego.pose = Pose2D(rng.uniform(-3, 3), rng.uniform(-4.5, 4.5), rng.uniform(-0.15, 0.15));
  ego.rigs = rigs;
  scene.agents.push_back(ego);

  // occlusion construction: radial target, broadside occluder, side helper
  size_t helper_needed = 0;
  if (want_occlusion && n_agents >= 2) {
    double theta = rng.uniform(-M_PI, M_PI);
    double dt = rng.uniform(13.0, std::min(21.0, cfg.spawn_radius));
    double tx = ego.pose.x + dt * std::cos(theta);
    double ty = ego.pose.y + dt * std::sin(theta);
    OrientedBox target;
    target.cx = tx;
    target.cy = ty;
    target.yaw = Pose2D::normalize_yaw(theta + rng.uniform(-0.1, 0.1));
    target.len = rng.uniform(3.8, 5.0);
    target.wid = rng.uniform(1.7, 2.2);
    OrientedBox occluder;
    double frac = rng.uniform(0.38, 0.52);
    occluder.cx = ego.pose.x + frac * dt * std::cos(theta);
    occluder.cy = ego.pose.y + frac * dt * std::sin(theta);
    occluder.yaw = Pose2D::normalize_yaw(theta + M_PI / 2.0 + rng.uniform(-0.15, 0.15));
    occluder.len = rng.uniform(4.6, 5.4);
    occluder.wid = rng.uniform(1.8, 2.2);
    scene.boxes.push_back(target);
    scene.boxes.push_back(occluder);

    // helper viewing the target from the side
    double side = (rng.bits() & 1) ? 1.0 : -1.0;
    double hx = tx - side * rng.uniform(8.0, 12.0) * std::sin(theta);
    double hy = ty + side * rng.uniform(8.0, 12.0) * std::cos(theta);
    AgentDef helper;
    helper.pose = Pose2D(hx, hy, rng.uniform(-M_PI, M_PI));
    helper.rigs = rigs;
    scene.agents.push_back(helper);
    helper_needed = 1;
  }

  // remaining agents scattered near the ego
  while (scene.agents.size() < static_cast<size_t>(n_agents)) {
    double ang = rng.uniform(-M_PI, M_PI);
    double dist = rng.uniform(7.0, 18.0);
    double x = ego.pose.x + dist * std::cos(ang);
    double y = ego.pose.y + dist * std::sin(ang);
    if (!clear_of_agents(scene.agents, x, y, 4.0) || !clear_of_boxes(scene.boxes, x, y, 4.0)) {
      continue;
    }
    AgentDef a;
    a.pose = Pose2D(x, y, rng.uniform(-M_PI, M_PI));
    a.rigs = rigs;
    scene.agents.push_back(a);
  }
  (void)helper_needed;

  // scatter the remaining vehicles
  int extra = static_cast<int>(rng.uniform_int(cfg.min_boxes, cfg.max_boxes)) -
              static_cast<int>(scene.boxes.size());
  for (int i = 0; i < extra; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      double ang = rng.uniform(-M_PI, M_PI);
      double dist = rng.uniform(5.0, cfg.spawn_radius);
      double x = ego.pose.x + dist * std::cos(ang);
      double y = ego.pose.y + dist * std::sin(ang);
      if (!clear_of_boxes(scene.boxes, x, y, 6.0) || !clear_of_agents(scene.agents, x, y, 4.0)) {
        continue;
      }
      OrientedBox b;
      b.cx = x;
      b.cy = y;
      b.yaw = rng.uniform(-M_PI, M_PI);
      b.len = rng.uniform(3.8, 5.0);
      b.wid = rng.uniform(1.7, 2.2);
      scene.boxes.push_back(b);
      placed = true;
      break;
    }
    if (!placed) {
      throw ConfigError("generate_scene: box density too high to place boxes");
    }
  }
  return scene;
}

}  // namespace

SceneSample generate_scene(const SceneGenConfig& cfg, uint64_t seed) {
  if (cfg.min_agents < 1 || cfg.max_agents < cfg.min_agents || cfg.min_boxes < 0 ||
      cfg.max_boxes < cfg.min_boxes || cfg.occlusion_prob < 0 || cfg.occlusion_prob > 1) {
    throw ConfigError("generate_scene: invalid generator configuration");
  }
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
  bool want_occlusion = cfg.max_boxes >= 2 && rng.canonical() < cfg.occlusion_prob;

  for (int attempt = 0; attempt < 64; ++attempt) {
    SceneSample scene = build_candidate(cfg, seed, rng, want_occlusion);
    if (!want_occlusion || scene.agents.size() < 2) return scene;
    // boxes[0] = target, boxes[1] = occluder by construction
    bool hidden = !box_visible_from(scene, 0, scene.agents[0].pose.x, scene.agents[0].pose.y);
    bool seen = false;
    for (size_t a = 1; a < scene.agents.size() && !seen; ++a) {
      seen = box_visible_from(scene, 0, scene.agents[a].pose.x, scene.agents[a].pose.y);
    }
    if (hidden && seen) return scene;
  }
  throw ConfigError("generate_scene: could not realize the occlusion guarantee");
}

Tensor render_views(const SceneSample& scene, size_t agent_index,
                    const RenderConfig& cfg) {
  if (agent_index >= scene.agents.size()) {
    throw UsageError("render_views: agent index out of range");
  }
  const AgentDef& agent = scene.agents[agent_index];
  int64_t m = static_cast<int64_t>(agent.rigs.size());
  int64_t h = cfg.image_h, w = cfg.image_w;
  std::vector<double> img(static_cast<size_t>(m * h * w * 3), 0.0);

  double cy_a = std::cos(agent.pose.yaw), sy_a = std::sin(agent.pose.yaw);
  for (int64_t k = 0; k < m; ++k) {
    const CameraRig& rig = agent.rigs[static_cast<size_t>(k)];
    Mat3 kinv = rig.k.inverse();
    Mat3 rt = rig.r.transposed();
    double v_mid = rig.k.m[5];  // principal row: horizontal rays
    for (int64_t u = 0; u < w; ++u) {
      double uu = (static_cast<double>(u) + 0.5) * static_cast<double>(rig.image_w) /
                  static_cast<double>(w);
      Vec3 dc = kinv.mul({uu, v_mid, 1.0});
      Vec3 da = rt.mul(dc);
      double norm = std::hypot(da.x, da.y);
      double dax = da.x / norm, day = da.y / norm;
      // world-frame ray direction
      double dwx = cy_a * dax - sy_a * day;
      double dwy = sy_a * dax + cy_a * day;
      double bx = agent.pose.x + cfg.max_depth * dwx;
      double by = agent.pose.y + cfg.max_depth * dwy;
      double best = -1.0;
      for (const OrientedBox& box : scene.boxes) {
        double t = box.segment_hit(agent.pose.x, agent.pose.y, bx, by);
        if (t >= 0.0 && (best < 0.0 || t < best)) best = t;
      }
      double depth = best >= 0.0 ? best * cfg.max_depth : -1.0;
      int64_t span_lo = h, span_hi = h;  // empty
      double shade = 0.0;
      if (depth >= 0.0) {
        double hpx = std::min(static_cast<double>(h),
                              static_cast<double>(h) * 3.0 / std::max(depth, 1.0));
        span_lo = static_cast<int64_t>(std::floor(static_cast<double>(h) / 2.0 - hpx / 2.0));
        span_hi = static_cast<int64_t>(std::ceil(static_cast<double>(h) / 2.0 + hpx / 2.0));
        span_lo = std::max<int64_t>(0, span_lo);
        span_hi = std::min<int64_t>(h, span_hi);
        shade = 1.0 / (1.0 + 0.06 * depth);
      }
      for (int64_t v = 0; v < h; ++v) {
        Rgb color;
        if (v >= span_lo && v < span_hi) {
          color = {kVehicle.r * shade, kVehicle.g * shade, kVehicle.b * shade};
        } else if (v < h / 2) {
          color = kSky;
        } else {
          color = kGround;
        }
        size_t base = static_cast<size_t>(((k * h + v) * w + u) * 3);
        img[base] = color.r;
        img[base + 1] = color.g;
        img[base + 2] = color.b;
      }
    }
  }
  return Tensor::from_data({m, h, w, 3}, std::move(img), Dtype::F32);
}

BevLabel rasterize_labels(const SceneSample& scene, const Pose2D& ego,
                          const BevGrid& grid) {
  BevLabel label;
  label.h = grid.h;
  label.w = grid.w;
  label.dynamic_cls.assign(static_cast<size_t>(grid.h * grid.w), 0);
  label.static_cls.assign(static_cast<size_t>(grid.h * grid.w), 0);
  label.visible.assign(static_cast<size_t>(grid.h * grid.w), 1);

  std::vector<uint8_t> box_seen(scene.boxes.size(), 0);
  for (size_t b = 0; b < scene.boxes.size(); ++b) {
    for (const AgentDef& a : scene.agents) {
      if (box_visible_from(scene, b, a.pose.x, a.pose.y)) {
        box_seen[b] = 1;
        break;
      }
    }
  }

  double c = std::cos(ego.yaw), s = std::sin(ego.yaw);
  for (int64_t r = 0; r < grid.h; ++r) {
    for (int64_t col = 0; col < grid.w; ++col) {
      double xe, ye;
      grid.cell_center(static_cast<double>(r), static_cast<double>(col), &xe, &ye);
      double xw = ego.x + c * xe - s * ye;
      double yw = ego.y + s * xe + c * ye;
      size_t idx = static_cast<size_t>(r * grid.w + col);
      for (size_t b = 0; b < scene.boxes.size(); ++b) {
        if (scene.boxes[b].contains(xw, yw)) {
          label.dynamic_cls[idx] = 1;
          if (!box_seen[b]) label.visible[idx] = 0;
          break;
        }
      }
      for (const LayoutPoly& p : scene.layout) {
        if (p.contains(xw, yw)) {
          label.static_cls[idx] = std::max<uint8_t>(label.static_cls[idx],
                                                    static_cast<uint8_t>(p.cls));
        }
      }
    }
  }
  return label;
}

double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
           const std::vector<uint8_t>& visible, int class_id) {
  if (pred.size() != truth.size() || pred.size() != visible.size()) {
    throw ShapeError("iou: grid size mismatch (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  }
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!visible[i]) continue;
    bool p = pred[i] == class_id;
    bool t = truth[i] == class_id;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double iou(const std::vector<uint8_t>& pred, const BevLabel& label, int class_id) {
  return iou(pred, label.dynamic_cls, label.visible, class_id);
}

namespace {

void write_mat3(std::ostream& os, const Mat3& m) {
  char buf[64];
  for (int i = 0; i < 9; ++i) {
    std::snprintf(buf, sizeof(buf), " %.17g", m.m[i]);
    os << buf;
  }
}

Mat3 read_mat3(std::istream& is) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) is >> m.m[i];
  return m;
}

void expect_token(std::istream& is, const char* tok) {
  std::string t;
  is >> t;
  if (t != tok) {
    throw IoError(std::string("scene file: expected '") + tok + "', got '" + t + "'");
  }
}

}  // namespace

void write_scene(std::ostream& os, const SceneSample& scene) {
  char buf[256];
  os << "faxbev-scene v1\n";
  os << "seed " << scene.seed << "\n";
  os << "agents " << scene.agents.size() << "\n";
  for (size_t i = 0; i < scene.agents.size(); ++i) {
    const AgentDef& a = scene.agents[i];
    std::snprintf(buf, sizeof(buf), "agent %zu pose %.17g %.17g %.17g rigs %zu\n", i,
                  a.pose.x, a.pose.y, a.pose.yaw, a.rigs.size());
    os << buf;
    for (size_t k = 0; k < a.rigs.size(); ++k) {
      const CameraRig& rig = a.rigs[k];
      os << "rig " << k << " K";
      write_mat3(os, rig.k);
      os << " R";
      write_mat3(os, rig.r);
      std::snprintf(buf, sizeof(buf), " t %.17g %.17g %.17g image %d %d\n", rig.t.x,
                    rig.t.y, rig.t.z, rig.image_h, rig.image_w);
      os << buf;
    }
  }
  os << "boxes " << scene.boxes.size() << "\n";
  for (const OrientedBox& b : scene.boxes) {
    std::snprintf(buf, sizeof(buf), "box %.17g %.17g %.17g %.17g %.17g vehicle\n", b.cx,
                  b.cy, b.yaw, b.len, b.wid);
    os << buf;
  }
  os << "layout " << scene.layout.size() << "\n";
  for (const LayoutPoly& p : scene.layout) {
    os << "poly " << (p.cls == 1 ? "drivable" : "lane") << " " << p.xs.size();
    for (size_t i = 0; i < p.xs.size(); ++i) {
      std::snprintf(buf, sizeof(buf), " %.17g %.17g", p.xs[i], p.ys[i]);
      os << buf;
    }
    os << "\n";
  }
  os << "end\n";
  if (!os) throw IoError("scene write failed");
}

SceneSample read_scene(std::istream& is) {
  std::string tok;
  is >> tok;
  if (tok != "faxbev-scene") throw IoError("not a scene file");
  is >> tok;
  if (tok != "v1") throw IoError("unsupported scene version: " + tok);
  SceneSample scene;
  expect_token(is, "seed");
  is >> scene.seed;
  expect_token(is, "agents");
  size_t n_agents;
  is >> n_agents;
  for (size_t i = 0; i < n_agents; ++i) {
    expect_token(is, "agent");
    size_t idx;
    is >> idx;
    expect_token(is, "pose");
    AgentDef a;
    is >> a.pose.x >> a.pose.y >> a.pose.yaw;
    expect_token(is, "rigs");
    size_t n_rigs;
    is >> n_rigs;
    for (size_t k = 0; k < n_rigs; ++k) {
      expect_token(is, "rig");
      size_t ridx;
      is >> ridx;
      expect_token(is, "K");
      CameraRig rig;
      rig.k = read_mat3(is);
      expect_token(is, "R");
      rig.r = read_mat3(is);
      expect_token(is, "t");
      is >> rig.t.x >> rig.t.y >> rig.t.z;
      expect_token(is, "image");
      is >> rig.image_h >> rig.image_w;
      a.rigs.push_back(rig);
    }
    scene.agents.push_back(std::move(a));
  }
  expect_token(is, "boxes");
  size_t n_boxes;
  is >> n_boxes;
  for (size_t i = 0; i < n_boxes; ++i) {
    expect_token(is, "box");
    OrientedBox b;
    std::string cls;
    is >> b.cx >> b.cy >> b.yaw >> b.len >> b.wid >> cls;
    if (cls != "vehicle") throw IoError("scene file: unknown box class " + cls);
    scene.boxes.push_back(b);
  }
  expect_token(is, "layout");
  size_t n_polys;
  is >> n_polys;
  for (size_t i = 0; i < n_polys; ++i) {
    expect_token(is, "poly");
    LayoutPoly p;
    std::string cls;
    size_t n_pts;
    is >> cls >> n_pts;
    if (cls == "drivable") {
      p.cls = 1;
    } else if (cls == "lane") {
      p.cls = 2;
    } else {
      throw IoError("scene file: unknown layout class " + cls);
    }
    for (size_t j = 0; j < n_pts; ++j) {
      double x, y;
      is >> x >> y;
      p.xs.push_back(x);
      p.ys.push_back(y);
    }
    scene.layout.push_back(std::move(p));
  }
  expect_token(is, "end");
  if (!is) throw IoError("truncated scene file");
  return scene;
}

void save_scene(const std::string& path, const SceneSample& scene) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_scene(os, scene);
}

SceneSample load_scene(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_scene(is);
}

}  // namespace faxbev
