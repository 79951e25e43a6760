#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "faxbev/geometry.hpp"
#include "faxbev/tensor.hpp"

namespace faxbev {

// Oriented rectangle in world coordinates; len along the heading axis, wid
// across it (full extents, meters).
struct OrientedBox {
  double cx = 0, cy = 0, yaw = 0;
  double len = 0, wid = 0;

  bool contains(double x, double y) const;
  // nearest entry parameter of the segment a + t*(b-a), t in [0,1], or a
  // negative value when the segment misses the box
  double segment_hit(double ax, double ay, double bx, double by) const;
};

// Static layout polygon (convex, CCW); cls 1 = drivable, 2 = lane.
struct LayoutPoly {
  std::vector<double> xs, ys;
  int cls = 1;
  bool contains(double x, double y) const;
};

struct AgentDef {
  Pose2D pose;
  std::vector<CameraRig> rigs;
};

struct SceneSample {
  uint64_t seed = 0;
  std::vector<AgentDef> agents;  // agents[0] is ego
  std::vector<OrientedBox> boxes;
  std::vector<LayoutPoly> layout;
};

struct SceneGenConfig {
  int min_agents = 4;
  int max_agents = 4;
  int min_boxes = 2;
  int max_boxes = 4;
  double occlusion_prob = 0.8;
  double spawn_radius = 22.0;
  int image_h = 32;
  int image_w = 64;
  int cameras = 4;          // yaws 0/90/180/270 deg
  double fov_x_deg = 110.0;
  double fov_y_deg = 60.0;
};

// Reproducible world: agents on a road layout, vehicles placed without
// overlap, and (with probability occlusion_prob) a target vehicle fully
// occluded from the ego but visible to at least one other agent.
SceneSample generate_scene(const SceneGenConfig& cfg, uint64_t seed);

struct RenderConfig {
  int image_h = 32;
  int image_w = 64;
  double max_depth = 60.0;
};

// Column raycaster: per image column the nearest box hit sets a depth-shaded
// vehicle span around the horizon; ground below, sky above.
Tensor render_views(const SceneSample& scene, size_t agent_index,
                    const RenderConfig& cfg);

// True when `box` has at least one perimeter sample with a clear line of
// sight from the agent position (other boxes occlude).
bool box_visible_from(const SceneSample& scene, size_t box_index, double ax, double ay);

struct BevLabel {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> dynamic_cls;  // 0 background, 1 vehicle
  std::vector<uint8_t> static_cls;   // 0 background, 1 drivable, 2 lane
  std::vector<uint8_t> visible;      // cells excluded from evaluation when 0
};

// Oriented-rectangle and polygon fill in the ego frame. Vehicle cells of
// boxes that no agent can see are marked invisible; everything else is
// evaluated.
BevLabel rasterize_labels(const SceneSample& scene, const Pose2D& ego,
                          const BevGrid& grid);

// Visibility-masked intersection over union for one class; 1.0 when both
// sets are empty.
double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
           const std::vector<uint8_t>& visible, int class_id);
double iou(const std::vector<uint8_t>& pred, const BevLabel& label, int class_id);

// Human-readable versioned scene file.
void write_scene(std::ostream& os, const SceneSample& scene);
SceneSample read_scene(std::istream& is);
void save_scene(const std::string& path, const SceneSample& scene);
SceneSample load_scene(const std::string& path);

}  // namespace faxbev
