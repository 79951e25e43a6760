#include "faxbev/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "faxbev/optim.hpp"
#include "faxbev/ops.hpp"

namespace faxbev {

Tensor masked_weighted_cross_entropy(const Tensor& logits, const std::vector<int>& target,
                                     const std::vector<double>& class_weights,
                                     const std::vector<uint8_t>& keep) {
  int64_t k = logits.shape().back();
  int64_t rows = logits.numel() / k;
  if (static_cast<int64_t>(keep.size()) != rows) {
    throw ShapeError("masked_weighted_cross_entropy: keep mask size mismatch");
  }
  // zero weights on dropped rows via a per-row weight baked into the target
  // pathway: reuse the plain op on the kept rows only
  std::vector<int64_t> kept;
  for (int64_t r = 0; r < rows; ++r) {
    if (keep[static_cast<size_t>(r)]) kept.push_back(r);
  }
  if (kept.empty()) throw UsageError("masked_weighted_cross_entropy: empty mask");
  if (static_cast<int64_t>(kept.size()) == rows) {
    return weighted_cross_entropy(logits, target, class_weights);
  }
  Tensor flat = reshape(logits, {rows, k});
  std::vector<int> kept_target;
  kept_target.reserve(kept.size());
  for (int64_t r : kept) kept_target.push_back(target[static_cast<size_t>(r)]);
  return weighted_cross_entropy(gather_rows(flat, kept), kept_target, class_weights);
}

SceneData make_scene_data(const SceneSample& scene, const RenderConfig& render,
                          const BevGrid& label_grid) {
  SceneData data;
  data.scene = scene;
  for (size_t i = 0; i < scene.agents.size(); ++i) {
    AgentInputs in;
    in.images = render_views(scene, i, render);
    in.rigs = scene.agents[i].rigs;
    in.pose = scene.agents[i].pose;
    data.inputs.push_back(std::move(in));
  }
  data.label = rasterize_labels(scene, scene.agents[0].pose, label_grid);
  return data;
}

std::vector<SceneData> build_dataset(const DatasetConfig& cfg, uint64_t seed0, int count) {
  std::vector<SceneData> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneSample scene = generate_scene(cfg.scene, seed0 + static_cast<uint64_t>(i));
    out.push_back(make_scene_data(scene, cfg.render, cfg.label_grid));
  }
  return out;
}

std::vector<uint8_t> argmax_classes(const Tensor& logits) {
  int64_t k = logits.shape().back();
  int64_t rows = logits.numel() / k;
  std::vector<uint8_t> out(static_cast<size_t>(rows));
  const double* p = logits.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = p + r * k;
    int best = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = static_cast<int>(j);
    }
    out[static_cast<size_t>(r)] = static_cast<uint8_t>(best);
  }
  return out;
}

AgentInputs drop_cameras(const AgentInputs& ego, int drop) {
  if (drop <= 0) return ego;
  AgentInputs out = ego;
  int64_t m = ego.images.dim(0);
  drop = std::min<int64_t>(drop, m);
  std::vector<double> vals = ego.images.values();
  int64_t per_cam = ego.images.numel() / m;
  std::fill(vals.begin(), vals.begin() + drop * per_cam, 0.0);
  out.images = Tensor::from_data(ego.images.shape(), std::move(vals),
                                 ego.images.dtype());
  return out;
}

namespace {

std::vector<int> label_targets(const BevLabel& label) {
  std::vector<int> t(label.dynamic_cls.size());
  for (size_t i = 0; i < t.size(); ++i) t[i] = label.dynamic_cls[i];
  return t;
}

struct IouAccum {
  int64_t inter = 0, uni = 0;
  void add(const std::vector<uint8_t>& pred, const BevLabel& label, int cls) {
    for (size_t i = 0; i < pred.size(); ++i) {
      if (!label.visible[i]) continue;
      bool p = pred[i] == cls;
      bool t = label.dynamic_cls[i] == cls;
      inter += (p && t) ? 1 : 0;
      uni += (p || t) ? 1 : 0;
    }
  }
  double value() const {
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
};

std::vector<AgentInputs> apply_eval_options(const std::vector<AgentInputs>& inputs,
                                            const EvalOptions& opts) {
  std::vector<AgentInputs> out;
  size_t n = std::min<size_t>(inputs.size(), static_cast<size_t>(std::max(1, opts.max_agents)));
  for (size_t i = 0; i < n; ++i) out.push_back(inputs[i]);
  if (opts.drop_ego_cameras > 0) out[0] = drop_cameras(out[0], opts.drop_ego_cameras);
  return out;
}

template <typename Model, typename ForwardFn>
std::vector<EpochLog> train_loop(Model& model, ParamStore& store,
                                 const std::vector<SceneData>& train,
                                 const std::vector<SceneData>& val,
                                 const TrainConfig& cfg, std::ostream* log,
                                 ForwardFn&& fwd,
                                 const std::function<double()>& val_fn) {
  Adam adam(Adam::Options{cfg.lr, 0.9, 0.999, 1e-8});
  Rng shuffle_rng(cfg.seed);
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> weights = {1.0, cfg.vehicle_weight};
  int64_t total_steps = static_cast<int64_t>(cfg.epochs) * static_cast<int64_t>(train.size());
  int64_t step = 0;
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the run RNG keeps epochs deterministic per seed
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double loss_sum = 0.0;
    for (size_t idx : order) {
      const SceneData& sc = train[idx];
      store.zero_grads();
      Tensor logits = fwd(sc);
      Tensor loss = masked_weighted_cross_entropy(logits, label_targets(sc.label),
                                                  weights, sc.label.visible);
      double lv = loss.values()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("training aborted: non-finite loss at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(step));
      }
      loss_sum += lv;
      backward(loss);
      adam.set_lr(cosine_lr(step, total_steps, cfg.lr, cfg.lr * 0.05));
      adam.step(store);
      ++step;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(train.size());
    if (!val.empty()) entry.val_iou = val_fn();
    if (log) {
      (*log) << "epoch " << epoch << " loss " << entry.mean_loss;
      if (entry.val_iou >= 0) (*log) << " val_vehicle_iou " << entry.val_iou;
      (*log) << "\n";
    }
    logs.push_back(entry);
  }
  (void)model;
  return logs;
}

}  // namespace

EvalResult evaluate_cobevt(CobevtModel& model, const std::vector<SceneData>& data,
                           const EvalOptions& opts) {
  IouAccum acc;
  for (const SceneData& sc : data) {
    std::vector<AgentInputs> inputs = apply_eval_options(sc.inputs, opts);
    Tensor logits = model.forward(inputs, /*training=*/false);
    acc.add(argmax_classes(logits), sc.label, 1);
  }
  EvalResult res;
  res.vehicle_iou = acc.value();
  res.scenes = static_cast<int64_t>(data.size());
  res.payload_bytes = model.compressor().payload_bytes(model.config().fusebevt.h,
                                                       model.config().fusebevt.w);
  return res;
}

EvalResult evaluate_single(SingleAgentModel& model, const std::vector<SceneData>& data,
                           const EvalOptions& opts) {
  IouAccum acc;
  for (const SceneData& sc : data) {
    AgentInputs ego = sc.inputs[0];
    if (opts.drop_ego_cameras > 0) ego = drop_cameras(ego, opts.drop_ego_cameras);
    Tensor logits = model.forward(ego.images, ego.rigs, /*training=*/false);
    acc.add(argmax_classes(logits), sc.label, 1);
  }
  EvalResult res;
  res.vehicle_iou = acc.value();
  res.scenes = static_cast<int64_t>(data.size());
  return res;
}

std::vector<EpochLog> train_cobevt(CobevtModel& model, const std::vector<SceneData>& train,
                                   const std::vector<SceneData>& val,
                                   const TrainConfig& cfg, std::ostream* log) {
  return train_loop(model, model.store(), train, val, cfg, log,
                    [&](const SceneData& sc) { return model.forward(sc.inputs, true); },
                    [&] { return evaluate_cobevt(model, val).vehicle_iou; });
}

std::vector<EpochLog> train_single(SingleAgentModel& model,
                                   const std::vector<SceneData>& train,
                                   const std::vector<SceneData>& val,
                                   const TrainConfig& cfg, std::ostream* log) {
  return train_loop(model, model.store(), train, val, cfg, log,
                    [&](const SceneData& sc) {
                      return model.forward(sc.inputs[0].images, sc.inputs[0].rigs, true);
                    },
                    [&] { return evaluate_single(model, val).vehicle_iou; });
}

}  // namespace faxbev
