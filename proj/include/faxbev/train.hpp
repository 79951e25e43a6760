#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "faxbev/models.hpp"
#include "faxbev/scenes.hpp"

namespace faxbev {

// weighted_cross_entropy with rows dropped from the mean where keep = 0.
Tensor masked_weighted_cross_entropy(const Tensor& logits, const std::vector<int>& target,
                                     const std::vector<double>& class_weights,
                                     const std::vector<uint8_t>& keep);

struct SceneData {
  SceneSample scene;
  std::vector<AgentInputs> inputs;  // one per agent; [0] is ego
  BevLabel label;                   // at the ego pose, decoder resolution
};

struct DatasetConfig {
  SceneGenConfig scene;
  RenderConfig render;
  BevGrid label_grid{64, 64, 1.0};
};

SceneData make_scene_data(const SceneSample& scene, const RenderConfig& render,
                          const BevGrid& label_grid);
// Scenes from seeds seed0, seed0+1, ...
std::vector<SceneData> build_dataset(const DatasetConfig& cfg, uint64_t seed0, int count);

struct TrainConfig {
  int epochs = 12;
  double lr = 2e-3;
  double vehicle_weight = 8.0;
  uint64_t seed = 7;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double val_iou = -1.0;  // negative when not evaluated
};

struct EvalOptions {
  int drop_ego_cameras = 0;
  int max_agents = 1 << 30;
};

struct EvalResult {
  double vehicle_iou = 0.0;
  int64_t scenes = 0;
  int64_t payload_bytes = 0;  // per transmitted feature map
};

// Aggregate visibility-masked vehicle IoU over the scene set (global
// intersection / union, not a per-scene mean).
EvalResult evaluate_cobevt(CobevtModel& model, const std::vector<SceneData>& data,
                           const EvalOptions& opts = EvalOptions());
EvalResult evaluate_single(SingleAgentModel& model, const std::vector<SceneData>& data,
                           const EvalOptions& opts = EvalOptions());

// Adam + cosine annealing over the shuffled dataset. Aborts with NumericError
// on a non-finite loss. Logs one line per epoch when `log` is given.
std::vector<EpochLog> train_cobevt(CobevtModel& model, const std::vector<SceneData>& train,
                                   const std::vector<SceneData>& val,
                                   const TrainConfig& cfg, std::ostream* log = nullptr);
std::vector<EpochLog> train_single(SingleAgentModel& model,
                                   const std::vector<SceneData>& train,
                                   const std::vector<SceneData>& val,
                                   const TrainConfig& cfg, std::ostream* log = nullptr);

// Ego inputs with the first `drop` camera images zeroed.
AgentInputs drop_cameras(const AgentInputs& ego, int drop);

// argmax class per pixel of [H,W,K] logits
std::vector<uint8_t> argmax_classes(const Tensor& logits);

}  // namespace faxbev
