#include "faxbev/models.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace faxbev {

namespace {

Tensor make_weight(ParamStore& store, const std::string& name, Shape shape,
                   int64_t fan_in, Rng& rng, Dtype dt) {
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return store.add(name, Tensor::uniform(std::move(shape), -bound, bound, rng, dt, true));
}

Tensor make_zeros(ParamStore& store, const std::string& name, Shape shape, Dtype dt) {
  return store.add(name, Tensor::zeros(std::move(shape), dt, true));
}

Tensor make_ones(ParamStore& store, const std::string& name, Shape shape, Dtype dt) {
  return store.add(name, Tensor::full(std::move(shape), 1.0, dt, true));
}

BatchNormState make_bn_state(ParamStore& store, const std::string& prefix, int64_t c,
                             Dtype dt) {
  BatchNormState st;
  st.running_mean = store.add(prefix + ".running_mean", Tensor::zeros({c}, dt, false));
  st.running_var = store.add(prefix + ".running_var", Tensor::full({c}, 1.0, dt, false));
  return st;
}

}  // namespace

TinyImageEncoder::TinyImageEncoder(ParamStore& store, const std::string& prefix,
                                   const std::vector<int64_t>& channels, Rng& rng,
                                   Dtype dt) {
  int64_t cin = 3;
  for (size_t s = 0; s < channels.size(); ++s) {
    int64_t cout = channels[s];
    std::string base = prefix + ".stage" + std::to_string(s);
    w_.push_back(make_weight(store, base + ".weight", {3, 3, cin, cout}, 9 * cin, rng, dt));
    b_.push_back(make_zeros(store, base + ".bias", {cout}, dt));
    cin = cout;
  }
}

std::vector<Tensor> TinyImageEncoder::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(3) != 3) {
    throw ShapeError("TinyImageEncoder: images must be [M,h,w,3], got " +
                     shape_str(images.shape()));
  }
  if (images.dim(1) % 8 || images.dim(2) % 8) {
    throw ConfigError("TinyImageEncoder: image sides must be divisible by 8");
  }
  std::vector<Tensor> scales;
  Tensor x = images;
  for (size_t s = 0; s < w_.size(); ++s) {
    x = gelu(conv2d(x, w_[s], b_[s], /*stride=*/2, /*padding=*/1));
    scales.push_back(x);
  }
  return scales;
}

ResBottleneck::ResBottleneck(ParamStore& store, const std::string& prefix,
                             int64_t channels, int stride, Rng& rng, Dtype dt)
    : stride_(stride) {
  int64_t mid = std::max<int64_t>(1, channels / 4);
  w1_ = make_weight(store, prefix + ".conv1.weight", {1, 1, channels, mid}, channels, rng, dt);
  b1_ = make_zeros(store, prefix + ".conv1.bias", {mid}, dt);
  g1_ = make_ones(store, prefix + ".bn1.gamma", {mid}, dt);
  be1_ = make_zeros(store, prefix + ".bn1.beta", {mid}, dt);
  bn1_ = make_bn_state(store, prefix + ".bn1", mid, dt);
  w2_ = make_weight(store, prefix + ".conv2.weight", {3, 3, mid, mid}, 9 * mid, rng, dt);
  b2_ = make_zeros(store, prefix + ".conv2.bias", {mid}, dt);
  g2_ = make_ones(store, prefix + ".bn2.gamma", {mid}, dt);
  be2_ = make_zeros(store, prefix + ".bn2.beta", {mid}, dt);
  bn2_ = make_bn_state(store, prefix + ".bn2", mid, dt);
  w3_ = make_weight(store, prefix + ".conv3.weight", {1, 1, mid, channels}, mid, rng, dt);
  b3_ = make_zeros(store, prefix + ".conv3.bias", {channels}, dt);
  g3_ = make_ones(store, prefix + ".bn3.gamma", {channels}, dt);
  be3_ = make_zeros(store, prefix + ".bn3.beta", {channels}, dt);
  bn3_ = make_bn_state(store, prefix + ".bn3", channels, dt);
  if (stride_ != 1) {
    ws_ = make_weight(store, prefix + ".shortcut.weight", {1, 1, channels, channels},
                      channels, rng, dt);
    bs_ = make_zeros(store, prefix + ".shortcut.bias", {channels}, dt);
    gs_ = make_ones(store, prefix + ".bns.gamma", {channels}, dt);
    bes_ = make_zeros(store, prefix + ".bns.beta", {channels}, dt);
    bns_ = make_bn_state(store, prefix + ".bns", channels, dt);
  }
}

Tensor ResBottleneck::forward(const Tensor& x, bool training) {
  Tensor h = gelu(batch_norm(conv2d(x, w1_, b1_, 1, 0), g1_, be1_, bn1_, training));
  h = gelu(batch_norm(conv2d(h, w2_, b2_, stride_, 1), g2_, be2_, bn2_, training));
  h = batch_norm(conv2d(h, w3_, b3_, 1, 0), g3_, be3_, bn3_, training);
  Tensor shortcut = x;
  if (stride_ != 1) {
    shortcut = batch_norm(conv2d(x, ws_, bs_, stride_, 0), gs_, bes_, bns_, training);
  }
  return gelu(add(h, shortcut));
}

SinBevtConfig SinBevtConfig::toy() {
  SinBevtConfig cfg;
  cfg.dim = 32;
  cfg.num_heads = 4;
  cfg.enc_channels = {16, 24, 32};
  cfg.image_h = 32;
  cfg.image_w = 64;
  cfg.num_cameras = 4;
  cfg.stages = {
      {32, 8, 4, 8, true},
      {16, 4, 2, 4, true},
      {8, 4, 2, 4, false},
  };
  return cfg;
}

SinBevtConfig SinBevtConfig::micro() {
  SinBevtConfig cfg;
  cfg.dim = 8;
  cfg.num_heads = 2;
  cfg.enc_channels = {6, 8, 8};
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.num_cameras = 2;
  cfg.stages = {
      {8, 4, 4, 4, true},
      {4, 2, 2, 2, true},
      {2, 2, 2, 2, false},
  };
  return cfg;
}

void SinBevtConfig::validate() const {
  if (stages.size() != enc_channels.size()) {
    throw ConfigError("SinBevtConfig: need one stage per encoder scale");
  }
  if (image_h % 8 || image_w % 8) {
    throw ConfigError("SinBevtConfig: image sides must be divisible by 8");
  }
  if (num_heads < 1 || dim % num_heads) {
    throw ConfigError("SinBevtConfig: heads must divide dim");
  }
  int64_t expect = stages.empty() ? 0 : stages[0].bev_size;
  for (size_t s = 0; s < stages.size(); ++s) {
    const SinBevtStage& st = stages[s];
    int64_t fh = image_h >> (s + 1), fw = image_w >> (s + 1);
    if (st.bev_size != expect) {
      throw ConfigError("SinBevtConfig: stage " + std::to_string(s) +
                        " bev size " + std::to_string(st.bev_size) +
                        " does not continue the schedule (expected " +
                        std::to_string(expect) + ")");
    }
    if (st.bev_size % st.bev_win || fh % st.feat_win_h || fw % st.feat_win_w) {
      throw ConfigError("SinBevtConfig: stage " + std::to_string(s) +
                        " window sizes do not divide the maps");
    }
    int64_t bev_windows = (st.bev_size / st.bev_win) * (st.bev_size / st.bev_win);
    int64_t feat_windows = (fh / st.feat_win_h) * (fw / st.feat_win_w);
    if (bev_windows != feat_windows) {
      throw ConfigError("SinBevtConfig: stage " + std::to_string(s) +
                        " window counts differ: bev " + std::to_string(bev_windows) +
                        " vs feat " + std::to_string(feat_windows));
    }
    expect = st.downsample ? st.bev_size / 2 : st.bev_size;
  }
}

int64_t SinBevtConfig::out_size() const {
  const SinBevtStage& last = stages.back();
  return last.downsample ? last.bev_size / 2 : last.bev_size;
}

SinBevt::SinBevt(ParamStore& store, const std::string& prefix, const SinBevtConfig& cfg,
                 Rng& rng, Dtype dt)
    : cfg_(cfg) {
  cfg_.validate();
  encoder_ = TinyImageEncoder(store, prefix + ".encoder", cfg.enc_channels, rng, dt);
  int64_t h0 = cfg.stages[0].bev_size;
  double bound = std::sqrt(1.0 / static_cast<double>(cfg.dim));
  bev_embed_ = store.add(prefix + ".bev_embed",
                         Tensor::uniform({1, h0, h0, cfg.dim}, -bound, bound, rng, dt, true));
  AttentionConfig acfg{cfg.dim, cfg.num_heads};
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    const SinBevtStage& st = cfg.stages[s];
    std::string base = prefix + ".stage" + std::to_string(s);
    Stage stage;
    stage.in_w = make_weight(store, base + ".in.weight", {cfg.enc_channels[s], cfg.dim},
                             cfg.enc_channels[s], rng, dt);
    stage.in_b = make_zeros(store, base + ".in.bias", {cfg.dim}, dt);
    stage.pe_w = make_weight(store, base + ".pe.weight", {6, cfg.dim}, 6, rng, dt);
    int64_t tq = st.bev_win * st.bev_win;
    int64_t tk = cfg.num_cameras * st.feat_win_h * st.feat_win_w;
    stage.ca_local = FaxSubBlock::cross_attention(store, base + ".ca.local", acfg, tq,
                                                  tk, rng, dt);
    stage.ca_global = FaxSubBlock::cross_attention(store, base + ".ca.global", acfg, tq,
                                                   tk, rng, dt);
    stage.block1 = ResBottleneck(store, base + ".res1", cfg.dim, st.downsample ? 2 : 1,
                                 rng, dt);
    stage.block2 = ResBottleneck(store, base + ".res2", cfg.dim, 1, rng, dt);
    stages_.push_back(std::move(stage));
  }
}

Tensor SinBevt::forward(const Tensor& images, const std::vector<CameraRig>& rigs,
                        bool training, PairCounter* counter) {
  if (static_cast<int>(rigs.size()) != cfg_.num_cameras ||
      images.dim(0) != cfg_.num_cameras) {
    throw ShapeError("SinBevt: expected " + std::to_string(cfg_.num_cameras) +
                     " cameras, got " + std::to_string(images.dim(0)) + " images and " +
                     std::to_string(rigs.size()) + " rigs");
  }
  std::vector<Tensor> scales = encoder_.forward(images);
  Tensor bev = bev_embed_;
  for (size_t s = 0; s < stages_.size(); ++s) {
    const SinBevtStage& st = cfg_.stages[s];
    Stage& stage = stages_[s];
    Tensor feat = linear(scales[s], stage.in_w, stage.in_b);  // [M,fh,fw,C]
    int64_t fh = feat.dim(1), fw = feat.dim(2);
    std::vector<Tensor> pes;
    pes.reserve(rigs.size());
    for (const CameraRig& rig : rigs) {
      pes.push_back(camera_positional_encoding(rig, fh, fw, stage.pe_w));
    }
    Tensor pe = stack0(pes);
    PartitionSpec spec_bev(1, st.bev_size, st.bev_size, cfg_.dim, st.bev_win, st.bev_win);
    PartitionSpec spec_feat(cfg_.num_cameras, fh, fw, cfg_.dim, st.feat_win_h,
                            st.feat_win_w, st.feat_win_h, st.feat_win_w);
    bev = fax_ca_block(bev, feat, pe, stage.ca_local, stage.ca_global, spec_bev,
                       spec_feat, counter);
    Tensor flat = reshape(bev, {st.bev_size, st.bev_size, cfg_.dim});
    flat = stage.block1.forward(flat, training);
    flat = stage.block2.forward(flat, training);
    bev = reshape(flat, {1, flat.dim(0), flat.dim(1), cfg_.dim});
  }
  return reshape(bev, {bev.dim(1), bev.dim(2), cfg_.dim});
}

Compressor::Compressor(ParamStore& store, const std::string& prefix,
                       const CompressorConfig& cfg, Rng& rng, Dtype dt)
    : cfg_(cfg) {
  if (cfg.rate < 1 || (cfg.rate & (cfg.rate - 1)) || cfg.dim % cfg.rate) {
    throw ConfigError("Compressor: rate must be a power of two dividing dim, got rate " +
                      std::to_string(cfg.rate) + " for dim " + std::to_string(cfg.dim));
  }
  int64_t cz = cfg.dim / cfg.rate;
  enc_w_ = make_weight(store, prefix + ".enc.weight", {1, 1, cfg.dim, cz}, cfg.dim, rng, dt);
  enc_b_ = make_zeros(store, prefix + ".enc.bias", {cz}, dt);
  dec_w_ = make_weight(store, prefix + ".dec.weight", {1, 1, cz, cfg.dim}, cz, rng, dt);
  dec_b_ = make_zeros(store, prefix + ".dec.bias", {cfg.dim}, dt);
}

Tensor Compressor::compress(const Tensor& feat) const {
  return conv2d(feat, enc_w_, enc_b_, 1, 0);
}

Tensor Compressor::decompress(const Tensor& z) const {
  return conv2d(z, dec_w_, dec_b_, 1, 0);
}

int64_t Compressor::payload_bytes(int64_t h, int64_t w) const {
  return h * w * (cfg_.dim / cfg_.rate) * 4;
}

FuseBevt::FuseBevt(ParamStore& store, const std::string& prefix,
                   const FuseBevtConfig& cfg, Rng& rng, Dtype dt)
    : cfg_(cfg) {
  AttentionConfig acfg{cfg.dim, cfg.num_heads};
  // construction-time divisibility check
  PartitionSpec spec(cfg.n_max, cfg.h, cfg.w, cfg.dim, cfg.window, cfg.window);
  (void)spec;
  for (int l = 0; l < cfg.layers; ++l) {
    std::string base = prefix + ".block" + std::to_string(l);
    local_.push_back(FaxSubBlock::self_attention(store, base + ".local", acfg,
                                                 cfg.n_max, cfg.window, cfg.window,
                                                 rng, dt));
    global_.push_back(FaxSubBlock::self_attention(store, base + ".global", acfg,
                                                  cfg.n_max, cfg.window, cfg.window,
                                                  rng, dt));
  }
}

Tensor FuseBevt::forward(const AgentStack& stack, PairCounter* counter) {
  Shape want{cfg_.n_max, cfg_.h, cfg_.w, cfg_.dim};
  if (stack.features.shape() != want) {
    throw ShapeError("FuseBevt: stack " + shape_str(stack.features.shape()) +
                     " does not match config " + shape_str(want));
  }
  if (static_cast<int64_t>(stack.validity.size()) != cfg_.n_max) {
    throw ShapeError("FuseBevt: validity size mismatch");
  }
  if (!stack.validity[0]) {
    throw UsageError("FuseBevt: ego slot (0) must be valid");
  }
  bool all_valid = true;
  for (char v : stack.validity) all_valid = all_valid && v;

  PartitionSpec spec(cfg_.n_max, cfg_.h, cfg_.w, cfg_.dim, cfg_.window, cfg_.window);
  Tensor slot_mask;
  if (!all_valid) {
    std::vector<double> mvals(static_cast<size_t>(cfg_.n_max));
    for (int64_t a = 0; a < cfg_.n_max; ++a) {
      mvals[static_cast<size_t>(a)] = stack.validity[static_cast<size_t>(a)] ? 1.0 : 0.0;
    }
    slot_mask = Tensor::from_data({cfg_.n_max, 1, 1, 1}, std::move(mvals), Dtype::F64);
  }

  Tensor x = stack.features;
  for (int l = 0; l < cfg_.layers; ++l) {
    x = fax_sa_block(x, local_[static_cast<size_t>(l)], global_[static_cast<size_t>(l)],
                     spec, counter, all_valid ? nullptr : &stack.validity);
    // keep invalid slots at zero so they never leak through later residuals
    if (!all_valid) x = mul(x, slot_mask);
  }
  return reshape(slice(x, 0, 0, 1), {cfg_.h, cfg_.w, cfg_.dim});
}

Decoder::Decoder(ParamStore& store, const std::string& prefix, int64_t channels,
                 Rng& rng, Dtype dt) {
  int64_t cins[3] = {channels, channels, channels / 2};
  int64_t couts[3] = {channels, channels / 2, channels / 4};
  for (int s = 0; s < 3; ++s) {
    std::string base = prefix + ".up" + std::to_string(s);
    w_[s] = make_weight(store, base + ".conv.weight", {3, 3, cins[s], couts[s]},
                        9 * cins[s], rng, dt);
    b_[s] = make_zeros(store, base + ".conv.bias", {couts[s]}, dt);
    g_[s] = make_ones(store, base + ".bn.gamma", {couts[s]}, dt);
    be_[s] = make_zeros(store, base + ".bn.beta", {couts[s]}, dt);
    bn_[s] = make_bn_state(store, base + ".bn", couts[s], dt);
  }
  int64_t ch = channels / 4;
  head_dyn_w_ = make_weight(store, prefix + ".head_dynamic.weight", {1, 1, ch, 2}, ch, rng, dt);
  head_dyn_b_ = make_zeros(store, prefix + ".head_dynamic.bias", {2}, dt);
  head_stat_w_ = make_weight(store, prefix + ".head_static.weight", {1, 1, ch, 3}, ch, rng, dt);
  head_stat_b_ = make_zeros(store, prefix + ".head_static.bias", {3}, dt);
}

Tensor Decoder::forward(const Tensor& fused, int num_classes, bool training) {
  if (num_classes != 2 && num_classes != 3) {
    throw ConfigError("Decoder: head selects 2 (dynamic) or 3 (static) classes, got " +
                      std::to_string(num_classes));
  }
  Tensor x = fused;
  for (int s = 0; s < 3; ++s) {
    x = bilinear_upsample2x(x);
    x = gelu(batch_norm(conv2d(x, w_[s], b_[s], 1, 1), g_[s], be_[s], bn_[s], training));
  }
  if (num_classes == 2) return conv2d(x, head_dyn_w_, head_dyn_b_, 1, 0);
  return conv2d(x, head_stat_w_, head_stat_b_, 1, 0);
}

CobevtConfig CobevtConfig::toy() {
  CobevtConfig cfg;
  cfg.sinbevt = SinBevtConfig::toy();
  cfg.fusebevt = FuseBevtConfig{32, 4, 8, 8, 4, 3, 4};
  cfg.compressor = CompressorConfig{32, 1};
  cfg.comm_range_m = 70.0;
  cfg.bev_extent_m = 64.0;
  return cfg;
}

CobevtConfig CobevtConfig::micro() {
  CobevtConfig cfg;
  cfg.sinbevt = SinBevtConfig::micro();
  cfg.fusebevt = FuseBevtConfig{8, 2, 2, 2, 2, 2, 2};
  cfg.compressor = CompressorConfig{8, 2};
  cfg.comm_range_m = 70.0;
  cfg.bev_extent_m = 16.0;
  return cfg;
}

void CobevtConfig::validate() const {
  sinbevt.validate();
  if (fusebevt.dim != sinbevt.dim || fusebevt.h != sinbevt.out_size() ||
      fusebevt.w != sinbevt.out_size()) {
    throw ConfigError("CobevtConfig: FuseBEVT shape does not match SinBEVT output");
  }
  if (compressor.dim != sinbevt.dim) {
    throw ConfigError("CobevtConfig: compressor dim mismatch");
  }
}

BevGrid CobevtConfig::feature_grid() const {
  return BevGrid{fusebevt.h, fusebevt.w,
                 bev_extent_m / static_cast<double>(fusebevt.h)};
}

CobevtModel::CobevtModel(const CobevtConfig& cfg, uint64_t seed, Dtype dt)
    : cfg_(cfg), dt_(dt) {
  cfg_.validate();
  Rng rng(seed);
  sin_ = SinBevt(store_, "sinbevt", cfg.sinbevt, rng, dt);
  comp_ = Compressor(store_, "compressor", cfg.compressor, rng, dt);
  fuse_ = FuseBevt(store_, "fusebevt", cfg.fusebevt, rng, dt);
  dec_ = Decoder(store_, "decoder", cfg.fusebevt.dim, rng, dt);
}

AgentStack CobevtModel::build_stack(const std::vector<AgentInputs>& agents,
                                    bool training, PairCounter* counter) {
  if (agents.empty()) throw UsageError("CobevtModel: need at least one agent");
  int64_t n_max = cfg_.fusebevt.n_max;
  size_t n = std::min<size_t>(agents.size(), static_cast<size_t>(n_max));

  std::vector<Pose2D> poses;
  for (size_t i = 0; i < n; ++i) poses.push_back(agents[i].pose);
  std::vector<char> validity = in_comm_range(poses, 0, cfg_.comm_range_m);
  validity.resize(static_cast<size_t>(n_max), 0);
  poses.resize(static_cast<size_t>(n_max), Pose2D{});

  BevGrid grid = cfg_.feature_grid();
  std::vector<Tensor> slots;
  for (int64_t i = 0; i < n_max; ++i) {
    if (static_cast<size_t>(i) < n && validity[static_cast<size_t>(i)]) {
      Tensor feat = sin_.forward(agents[static_cast<size_t>(i)].images,
                                 agents[static_cast<size_t>(i)].rigs, training, counter);
      if (i == 0) {
        slots.push_back(feat);
      } else {
        Tensor recovered = comp_.decompress(comp_.compress(feat));
        slots.push_back(warp_features(recovered, agents[static_cast<size_t>(i)].pose,
                                      agents[0].pose, grid));
      }
    } else {
      slots.push_back(Tensor::zeros({cfg_.fusebevt.h, cfg_.fusebevt.w, cfg_.fusebevt.dim}, dt_));
    }
  }
  AgentStack stack;
  stack.features = stack0(slots);
  stack.validity = std::move(validity);
  stack.poses = std::move(poses);
  return stack;
}

Tensor CobevtModel::forward(const std::vector<AgentInputs>& agents, bool training,
                            int num_classes, PairCounter* counter) {
  AgentStack stack = build_stack(agents, training, counter);
  Tensor fused = fuse_.forward(stack, counter);
  return dec_.forward(fused, num_classes, training);
}

void write_model_config(std::ostream& os, const CobevtConfig& cfg) {
  os << "faxbev-model v1\n";
  os << "dim " << cfg.sinbevt.dim << "\n";
  os << "heads " << cfg.sinbevt.num_heads << "\n";
  os << "enc_channels";
  for (int64_t c : cfg.sinbevt.enc_channels) os << " " << c;
  os << "\n";
  os << "image " << cfg.sinbevt.image_h << " " << cfg.sinbevt.image_w << "\n";
  os << "cameras " << cfg.sinbevt.num_cameras << "\n";
  os << "stages " << cfg.sinbevt.stages.size() << "\n";
  for (const SinBevtStage& st : cfg.sinbevt.stages) {
    os << "stage " << st.bev_size << " " << st.bev_win << " " << st.feat_win_h << " "
       << st.feat_win_w << " " << (st.downsample ? "down" : "keep") << "\n";
  }
  os << "fuse_window " << cfg.fusebevt.window << "\n";
  os << "fuse_layers " << cfg.fusebevt.layers << "\n";
  os << "n_max " << cfg.fusebevt.n_max << "\n";
  os << "compression_rate " << cfg.compressor.rate << "\n";
  os << "comm_range " << cfg.comm_range_m << "\n";
  os << "bev_extent " << cfg.bev_extent_m << "\n";
  os << "end\n";
  if (!os) throw IoError("model config write failed");
}

CobevtConfig read_model_config(std::istream& is) {
  std::string tok;
  is >> tok;
  if (tok != "faxbev-model") throw IoError("not a model config file");
  is >> tok;
  if (tok != "v1") throw IoError("unsupported model config version: " + tok);
  CobevtConfig cfg = CobevtConfig::toy();
  cfg.sinbevt.stages.clear();
  cfg.sinbevt.enc_channels.clear();
  size_t n_stages = 0;
  while (is >> tok && tok != "end") {
    if (tok == "dim") {
      is >> cfg.sinbevt.dim;
    } else if (tok == "heads") {
      is >> cfg.sinbevt.num_heads;
    } else if (tok == "enc_channels") {
      // one channel count per stage; stages count appears later
      std::string line;
      std::getline(is, line);
      std::istringstream ls(line);
      int64_t c;
      while (ls >> c) cfg.sinbevt.enc_channels.push_back(c);
    } else if (tok == "image") {
      is >> cfg.sinbevt.image_h >> cfg.sinbevt.image_w;
    } else if (tok == "cameras") {
      is >> cfg.sinbevt.num_cameras;
    } else if (tok == "stages") {
      is >> n_stages;
    } else if (tok == "stage") {
      SinBevtStage st;
      std::string mode;
      is >> st.bev_size >> st.bev_win >> st.feat_win_h >> st.feat_win_w >> mode;
      st.downsample = mode == "down";
      cfg.sinbevt.stages.push_back(st);
    } else if (tok == "fuse_window") {
      is >> cfg.fusebevt.window;
    } else if (tok == "fuse_layers") {
      is >> cfg.fusebevt.layers;
    } else if (tok == "n_max") {
      is >> cfg.fusebevt.n_max;
    } else if (tok == "compression_rate") {
      is >> cfg.compressor.rate;
    } else if (tok == "comm_range") {
      is >> cfg.comm_range_m;
    } else if (tok == "bev_extent") {
      is >> cfg.bev_extent_m;
    } else {
      throw IoError("model config: unknown key '" + tok + "'");
    }
  }
  if (cfg.sinbevt.stages.size() != n_stages) {
    throw IoError("model config: stage count mismatch");
  }
  cfg.fusebevt.dim = cfg.sinbevt.dim;
  cfg.fusebevt.num_heads = cfg.sinbevt.num_heads;
  cfg.fusebevt.h = cfg.fusebevt.w = cfg.sinbevt.out_size();
  cfg.compressor.dim = cfg.sinbevt.dim;
  cfg.validate();
  return cfg;
}

void save_model_config(const std::string& path, const CobevtConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_model_config(os, cfg);
}

CobevtConfig load_model_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_model_config(is);
}

SingleAgentModel::SingleAgentModel(const SinBevtConfig& cfg, uint64_t seed, Dtype dt)
    : dt_(dt) {
  Rng rng(seed);
  sin_ = SinBevt(store_, "sinbevt", cfg, rng, dt);
  dec_ = Decoder(store_, "decoder", cfg.dim, rng, dt);
}

Tensor SingleAgentModel::forward(const Tensor& images, const std::vector<CameraRig>& rigs,
                                 bool training, int num_classes) {
  Tensor feat = sin_.forward(images, rigs, training);
  return dec_.forward(feat, num_classes, training);
}

}  // namespace faxbev
