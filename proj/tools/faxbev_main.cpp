// faxbev command line: verification suites, complexity benchmarks, toy
// training, ablation evaluation, and tensor dumps.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "faxbev/bench.hpp"
#include "faxbev/gradcheck.hpp"
#include "faxbev/io.hpp"
#include "faxbev/models.hpp"
#include "faxbev/scenes.hpp"
#include "faxbev/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace faxbev;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsage = 2;

struct RunConfig {
  uint64_t seed = 7;
  std::string config_path;
  std::string out_dir;
  int scenes = 64;
  int val_scenes = 16;
  int epochs = 12;
  double lr = 2e-3;
  int64_t compression_rate = 1;
  int drop_cameras = 0;
  int max_agents = 4;
  std::string dtype = "f32";
  double occlusion_prob = 0.8;
  std::string checkpoint;
  std::string model = "cobevt";
  std::string scene_path;
  std::string what;
  std::string filter;
  double vehicle_weight = 8.0;
};

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw UsageError("unknown dtype '" + s + "' (expected f32 or f64)");
}

// key = value lines; flags override file values, so the file is applied only
// where the user did not pass the flag.
void apply_config_file(const std::string& path, RunConfig* rc, const CLI::App& cmd) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  auto unset = [&](const char* flag) {
    const CLI::Option* opt = cmd.get_option_no_throw(flag);
    return opt == nullptr || opt->count() == 0;
  };
  std::string key;
  while (is >> key) {
    if (key.empty() || key[0] == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (key == "seed" && unset("--seed")) is >> rc->seed;
    else if (key == "scenes" && unset("--scenes")) is >> rc->scenes;
    else if (key == "val_scenes" && unset("--val-scenes")) is >> rc->val_scenes;
    else if (key == "epochs" && unset("--epochs")) is >> rc->epochs;
    else if (key == "lr" && unset("--lr")) is >> rc->lr;
    else if (key == "compression_rate" && unset("--compression-rate")) is >> rc->compression_rate;
    else if (key == "drop_cameras" && unset("--drop-cameras")) is >> rc->drop_cameras;
    else if (key == "max_agents" && unset("--max-agents")) is >> rc->max_agents;
    else if (key == "dtype" && unset("--dtype")) is >> rc->dtype;
    else if (key == "occlusion_prob" && unset("--occlusion-prob")) is >> rc->occlusion_prob;
    else if (key == "vehicle_weight" && unset("--vehicle-weight")) is >> rc->vehicle_weight;
    else {
      std::string value;
      is >> value;  // tolerate unknown keys so configs can be shared across tools
    }
  }
}

void echo_config(const RunConfig& rc, const std::string& subcommand) {
  if (rc.out_dir.empty()) return;
  fs::create_directories(rc.out_dir);
  std::ofstream os(fs::path(rc.out_dir) / "config_resolved.txt");
  os << "subcommand " << subcommand << "\n";
  os << "seed " << rc.seed << "\n";
  os << "scenes " << rc.scenes << "\n";
  os << "val_scenes " << rc.val_scenes << "\n";
  os << "epochs " << rc.epochs << "\n";
  os << "lr " << rc.lr << "\n";
  os << "compression_rate " << rc.compression_rate << "\n";
  os << "drop_cameras " << rc.drop_cameras << "\n";
  os << "max_agents " << rc.max_agents << "\n";
  os << "dtype " << rc.dtype << "\n";
  os << "occlusion_prob " << rc.occlusion_prob << "\n";
  os << "vehicle_weight " << rc.vehicle_weight << "\n";
  if (!rc.checkpoint.empty()) os << "checkpoint " << rc.checkpoint << "\n";
  if (!rc.scene_path.empty()) os << "scene " << rc.scene_path << "\n";
  if (!rc.what.empty()) os << "what " << rc.what << "\n";
}

DatasetConfig toy_dataset_config(const RunConfig& rc, const CobevtConfig& model_cfg) {
  DatasetConfig dc;
  dc.scene.min_agents = rc.max_agents;
  dc.scene.max_agents = rc.max_agents;
  dc.scene.occlusion_prob = rc.occlusion_prob;
  dc.scene.image_h = static_cast<int>(model_cfg.sinbevt.image_h);
  dc.scene.image_w = static_cast<int>(model_cfg.sinbevt.image_w);
  dc.scene.cameras = model_cfg.sinbevt.num_cameras;
  dc.render.image_h = static_cast<int>(model_cfg.sinbevt.image_h);
  dc.render.image_w = static_cast<int>(model_cfg.sinbevt.image_w);
  int64_t out = model_cfg.sinbevt.out_size() * 8;
  dc.label_grid = BevGrid{out, out, model_cfg.bev_extent_m / static_cast<double>(out)};
  return dc;
}

int cmd_gradcheck(const RunConfig& rc) {
  std::vector<GradCheckResult> results = run_gradchecks(rc.filter, &std::cout);
  int failures = 0;
  double worst = 0.0;
  for (const GradCheckResult& r : results) {
    failures += r.passed ? 0 : 1;
    worst = std::max(worst, r.max_rel_err);
  }
  std::cout << results.size() << " checks, " << failures
            << " failures, worst rel err " << worst << "\n";
  return failures == 0 ? kExitOk : kExitVerificationFailure;
}

int cmd_bench_attention(const RunConfig& rc, const std::vector<int64_t>& sizes,
                        int64_t agents, int64_t window, int heads, int repeats) {
  BenchConfig cfg;
  if (!sizes.empty()) cfg.sizes = sizes;
  cfg.agents = agents;
  cfg.window = window;
  cfg.num_heads = heads;
  cfg.repeats = repeats;
  cfg.seed = rc.seed;
  std::vector<BenchRow> rows = bench_attention(cfg);
  std::string csv = bench_csv(rows);
  std::cout << csv;

  std::vector<std::pair<double, double>> fax_pts, dense_pts;
  for (const BenchRow& r : rows) {
    auto& dst = r.variant == "fax" ? fax_pts : dense_pts;
    dst.emplace_back(static_cast<double>(r.h * r.w), static_cast<double>(r.pair_count));
  }
  double fax_slope = fit_loglog_slope(fax_pts);
  double dense_slope = fit_loglog_slope(dense_pts);
  std::cout << "# slope fax " << fax_slope << " dense " << dense_slope << "\n";

  if (!rc.out_dir.empty()) {
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "bench_attention.csv");
    os << csv;
    os << "# slope fax " << fax_slope << " dense " << dense_slope << "\n";
  }
  return kExitOk;
}

int cmd_train_toy(const RunConfig& rc) {
  if (rc.out_dir.empty()) throw UsageError("train-toy requires --out");
  fs::create_directories(rc.out_dir);
  Dtype dt = parse_dtype(rc.dtype);

  CobevtConfig cfg = CobevtConfig::toy();
  cfg.compressor.rate = rc.compression_rate;
  cfg.fusebevt.n_max = rc.max_agents;
  cfg.validate();
  save_model_config((fs::path(rc.out_dir) / "model_config.txt").string(), cfg);

  DatasetConfig dc = toy_dataset_config(rc, cfg);
  std::cout << "building " << rc.scenes << " train + " << rc.val_scenes
            << " val scenes...\n";
  std::vector<SceneData> train = build_dataset(dc, rc.seed * 1000 + 1, rc.scenes);
  std::vector<SceneData> val = build_dataset(dc, rc.seed * 1000 + 500000, rc.val_scenes);

  TrainConfig tc;
  tc.epochs = rc.epochs;
  tc.lr = rc.lr;
  tc.seed = rc.seed;
  tc.vehicle_weight = rc.vehicle_weight;

  std::ofstream metrics(fs::path(rc.out_dir) / "metrics.jsonl");
  auto log_entries = [&metrics](const char* model, const std::vector<EpochLog>& logs) {
    for (const EpochLog& e : logs) {
      json rec{{"model", model}, {"epoch", e.epoch}, {"loss", e.mean_loss}};
      if (e.val_iou >= 0) rec["val_vehicle_iou"] = e.val_iou;
      metrics << rec.dump() << "\n";
    }
  };

  std::cout << "training single-agent baseline...\n";
  SingleAgentModel single(cfg.sinbevt, rc.seed + 1, dt);
  auto single_logs = train_single(single, train, val, tc, &std::cout);
  log_entries("single", single_logs);
  save_checkpoint((fs::path(rc.out_dir) / "single.ckpt").string(), single.store());

  std::cout << "training cooperative model...\n";
  CobevtModel coop(cfg, rc.seed, dt);
  auto coop_logs = train_cobevt(coop, train, val, tc, &std::cout);
  log_entries("cobevt", coop_logs);
  save_checkpoint((fs::path(rc.out_dir) / "cobevt.ckpt").string(), coop.store());

  EvalResult cr = evaluate_cobevt(coop, val);
  EvalResult sr = evaluate_single(single, val);
  json final{{"record", "final"},
             {"cobevt_val_vehicle_iou", cr.vehicle_iou},
             {"single_val_vehicle_iou", sr.vehicle_iou},
             {"payload_bytes", cr.payload_bytes}};
  metrics << final.dump() << "\n";
  std::cout << "final: cobevt " << cr.vehicle_iou << " vs single " << sr.vehicle_iou
            << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw UsageError("eval requires --checkpoint");
  fs::path ckpt(rc.checkpoint);
  CobevtConfig cfg = load_model_config((ckpt.parent_path() / "model_config.txt").string());
  cfg.compressor.rate = rc.compression_rate;
  Dtype dt = parse_dtype(rc.dtype);

  DatasetConfig dc = toy_dataset_config(rc, cfg);
  dc.scene.min_agents = std::max(1, rc.max_agents);
  dc.scene.max_agents = std::max(1, rc.max_agents);
  std::vector<SceneData> data = build_dataset(dc, rc.seed * 1000 + 900000, rc.scenes);

  EvalOptions opts;
  opts.drop_ego_cameras = rc.drop_cameras;
  opts.max_agents = rc.max_agents;

  json rec;
  if (rc.model == "single") {
    SingleAgentModel model(cfg.sinbevt, rc.seed, dt);
    load_checkpoint(rc.checkpoint, model.store());
    EvalResult r = evaluate_single(model, data, opts);
    rec = json{{"model", "single"}, {"scenes", r.scenes},
               {"drop_cameras", rc.drop_cameras}, {"vehicle_iou", r.vehicle_iou}};
  } else if (rc.model == "cobevt") {
    CobevtModel model(cfg, rc.seed, dt);
    load_checkpoint(rc.checkpoint, model.store());
    EvalResult r = evaluate_cobevt(model, data, opts);
    rec = json{{"model", "cobevt"},
               {"scenes", r.scenes},
               {"drop_cameras", rc.drop_cameras},
               {"max_agents", rc.max_agents},
               {"compression_rate", rc.compression_rate},
               {"payload_bytes", r.payload_bytes},
               {"vehicle_iou", r.vehicle_iou}};
  } else {
    throw UsageError("eval: --model must be cobevt or single");
  }
  std::cout << rec.dump() << "\n";
  if (!rc.out_dir.empty()) {
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "eval.jsonl", std::ios::app);
    os << rec.dump() << "\n";
  }
  return kExitOk;
}

void write_ppm(const std::string& path, int64_t h, int64_t w,
               const std::vector<std::array<uint8_t, 3>>& rgb) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (const auto& px : rgb) {
    os.write(reinterpret_cast<const char*>(px.data()), 3);
  }
}

std::vector<std::array<uint8_t, 3>> class_image(const std::vector<uint8_t>& cls) {
  static const std::array<uint8_t, 3> palette[3] = {
      {40, 40, 40}, {220, 60, 50}, {80, 170, 90}};
  std::vector<std::array<uint8_t, 3>> out(cls.size());
  for (size_t i = 0; i < cls.size(); ++i) out[i] = palette[cls[i] % 3];
  return out;
}

int cmd_dump(const RunConfig& rc) {
  if (rc.checkpoint.empty() || rc.scene_path.empty() || rc.out_dir.empty()) {
    throw UsageError("dump requires --checkpoint, --scene and --out");
  }
  fs::create_directories(rc.out_dir);
  fs::path ckpt(rc.checkpoint);
  CobevtConfig cfg = load_model_config((ckpt.parent_path() / "model_config.txt").string());
  Dtype dt = parse_dtype(rc.dtype);
  CobevtModel model(cfg, rc.seed, dt);
  load_checkpoint(rc.checkpoint, model.store());

  SceneSample scene = load_scene(rc.scene_path);
  RenderConfig render{static_cast<int>(cfg.sinbevt.image_h),
                      static_cast<int>(cfg.sinbevt.image_w), 60.0};
  int64_t out_sz = cfg.sinbevt.out_size() * 8;
  BevGrid label_grid{out_sz, out_sz, cfg.bev_extent_m / static_cast<double>(out_sz)};
  SceneData data = make_scene_data(scene, render, label_grid);
  fs::path out(rc.out_dir);

  if (rc.what == "predictions") {
    Tensor logits = model.forward(data.inputs, false);
    save_tdump((out / "predictions.tdump").string(), logits);
    std::vector<uint8_t> pred = argmax_classes(logits);
    write_ppm((out / "prediction.ppm").string(), label_grid.h, label_grid.w,
              class_image(pred));
    write_ppm((out / "label.ppm").string(), label_grid.h, label_grid.w,
              class_image(data.label.dynamic_cls));
    std::cout << "wrote predictions.tdump, prediction.ppm, label.ppm\n";
  } else if (rc.what == "warped-features") {
    AgentStack stack = model.build_stack(data.inputs, false);
    for (int64_t i = 0; i < stack.features.dim(0); ++i) {
      Tensor slot = reshape(slice(stack.features, 0, i, i + 1),
                            {cfg.fusebevt.h, cfg.fusebevt.w, cfg.fusebevt.dim});
      save_tdump((out / ("warped_agent" + std::to_string(i) + ".tdump")).string(), slot);
    }
    std::cout << "wrote " << stack.features.dim(0) << " warped feature dumps\n";
  } else if (rc.what == "attention-maps") {
    std::vector<Tensor> maps;
    PairCounter counter;
    counter.attn_capture = &maps;
    AgentStack stack = model.build_stack(data.inputs, false);
    model.fusebevt().forward(stack, &counter);
    for (size_t i = 0; i < maps.size(); ++i) {
      save_tdump((out / ("attention" + std::to_string(i) + ".tdump")).string(), maps[i]);
    }
    std::cout << "wrote " << maps.size() << " attention map dumps\n";
  } else {
    throw UsageError("dump: --what must be attention-maps, warped-features or predictions");
  }
  return kExitOk;
}

int cmd_gen_scene(const RunConfig& rc) {
  if (rc.out_dir.empty()) throw UsageError("gen-scene requires --out");
  fs::create_directories(rc.out_dir);
  SceneGenConfig sc;
  sc.min_agents = sc.max_agents = rc.max_agents;
  sc.occlusion_prob = rc.occlusion_prob;
  for (int i = 0; i < rc.scenes; ++i) {
    SceneSample scene = generate_scene(sc, rc.seed + static_cast<uint64_t>(i));
    save_scene((fs::path(rc.out_dir) / ("scene" + std::to_string(i) + ".txt")).string(),
               scene);
  }
  std::cout << "wrote " << rc.scenes << " scene files to " << rc.out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fused axial attention BEV pipeline (desk-scale)"};
  app.require_subcommand(1);

  RunConfig rc;
  std::vector<int64_t> bench_sizes;
  int64_t bench_agents = 2, bench_window = 8;
  int bench_heads = 4, bench_repeats = 3;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", rc.seed, "run seed");
    cmd->add_option("--config", rc.config_path, "key-value config file");
    cmd->add_option("--out", rc.out_dir, "output directory");
    cmd->add_option("--dtype", rc.dtype, "f32 or f64");
  };

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad);
  grad->add_option("--filter", rc.filter, "substring filter on check names");

  CLI::App* bench = app.add_subcommand("bench-attention",
                                       "attention pair-count / wall-time benchmark");
  add_common(bench);
  bench->add_option("--sizes", bench_sizes, "H=W sizes");
  bench->add_option("--agents", bench_agents, "agent count N");
  bench->add_option("--window", bench_window, "window and grid size");
  bench->add_option("--heads", bench_heads, "attention heads");
  bench->add_option("--repeats", bench_repeats, "timing repeats (median)");

  CLI::App* train = app.add_subcommand("train-toy", "train single-agent and cooperative models");
  add_common(train);
  train->add_option("--scenes", rc.scenes, "training scenes");
  train->add_option("--val-scenes", rc.val_scenes, "validation scenes");
  train->add_option("--epochs", rc.epochs, "epochs");
  train->add_option("--lr", rc.lr, "peak learning rate");
  train->add_option("--compression-rate", rc.compression_rate, "feature compression rate");
  train->add_option("--max-agents", rc.max_agents, "agents per scene");
  train->add_option("--occlusion-prob", rc.occlusion_prob, "occlusion probability");
  train->add_option("--vehicle-weight", rc.vehicle_weight, "cross-entropy vehicle weight");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint under ablations");
  add_common(eval);
  eval->add_option("--checkpoint", rc.checkpoint, "checkpoint path")->required();
  eval->add_option("--model", rc.model, "cobevt or single");
  eval->add_option("--scenes", rc.scenes, "evaluation scenes");
  eval->add_option("--compression-rate", rc.compression_rate, "feature compression rate");
  eval->add_option("--drop-cameras", rc.drop_cameras, "ego cameras to drop");
  eval->add_option("--max-agents", rc.max_agents, "agent cap");
  eval->add_option("--occlusion-prob", rc.occlusion_prob, "occlusion probability");

  CLI::App* dump = app.add_subcommand("dump", "tensor dumps and image grids");
  add_common(dump);
  dump->add_option("--what", rc.what, "attention-maps | warped-features | predictions")
      ->required();
  dump->add_option("--scene", rc.scene_path, "scene file")->required();
  dump->add_option("--checkpoint", rc.checkpoint, "checkpoint path")->required();

  CLI::App* gen = app.add_subcommand("gen-scene", "write synthetic scene files");
  add_common(gen);
  gen->add_option("--scenes", rc.scenes, "number of scenes");
  gen->add_option("--max-agents", rc.max_agents, "agents per scene");
  gen->add_option("--occlusion-prob", rc.occlusion_prob, "occlusion probability");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    if (!rc.config_path.empty()) apply_config_file(rc.config_path, &rc, *cmd);
    echo_config(rc, cmd->get_name());
    if (cmd == grad) return cmd_gradcheck(rc);
    if (cmd == bench) {
      return cmd_bench_attention(rc, bench_sizes, bench_agents, bench_window,
                                 bench_heads, bench_repeats);
    }
    if (cmd == train) return cmd_train_toy(rc);
    if (cmd == eval) return cmd_eval(rc);
    if (cmd == dump) return cmd_dump(rc);
    if (cmd == gen) return cmd_gen_scene(rc);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerificationFailure;
  }
}
