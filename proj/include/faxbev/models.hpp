#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "faxbev/attention.hpp"
#include "faxbev/geometry.hpp"
#include "faxbev/ops.hpp"
#include "faxbev/tensor.hpp"

namespace faxbev {

// conv3x3(stride 2) + GELU, three stages; the stand-in image backbone.
class TinyImageEncoder {
 public:
  TinyImageEncoder() = default;
  TinyImageEncoder(ParamStore& store, const std::string& prefix,
                   const std::vector<int64_t>& channels, Rng& rng, Dtype dt);
  // images [M,h,w,3] -> scales [M,h/2,w/2,c0], [M,h/4,w/4,c1], [M,h/8,w/8,c2]
  std::vector<Tensor> forward(const Tensor& images) const;

 private:
  std::vector<Tensor> w_, b_;
};

// conv1x1(C -> C/4) -> conv3x3 -> conv1x1(-> C), BN+GELU, residual; stride 2
// downsamples and adds a projected shortcut.
class ResBottleneck {
 public:
  ResBottleneck() = default;
  ResBottleneck(ParamStore& store, const std::string& prefix, int64_t channels,
                int stride, Rng& rng, Dtype dt);
  Tensor forward(const Tensor& x, bool training);

 private:
  Tensor w1_, b1_, w2_, b2_, w3_, b3_, ws_, bs_;
  Tensor g1_, be1_, g2_, be2_, g3_, be3_, gs_, bes_;
  BatchNormState bn1_, bn2_, bn3_, bns_;
  int stride_ = 1;
};

struct SinBevtStage {
  int64_t bev_size = 0;   // square BEV resolution the FAX-CA runs at
  int64_t bev_win = 0;    // window (= grid) size on the BEV side
  int64_t feat_win_h = 0; // window (= grid) size on the feature side
  int64_t feat_win_w = 0;
  bool downsample = false;  // stride-2 in the first bottleneck after the CA
};

struct SinBevtConfig {
  int64_t dim = 32;
  int num_heads = 4;
  std::vector<int64_t> enc_channels = {16, 24, 32};
  std::vector<SinBevtStage> stages;
  int64_t image_h = 32, image_w = 64;
  int num_cameras = 4;

  static SinBevtConfig toy();    // 32 -> 16 -> 8 at C=32, images 32x64
  static SinBevtConfig micro();  // tiny shapes for oracles and grad checks
  void validate() const;
  int64_t out_size() const;  // BEV resolution of the returned feature
};

// Hierarchical camera-to-BEV transformer: learnable BEV embedding refined by
// one FAX-CA block per encoder scale, each followed by two bottlenecks.
class SinBevt {
 public:
  SinBevt() = default;
  SinBevt(ParamStore& store, const std::string& prefix, const SinBevtConfig& cfg,
          Rng& rng, Dtype dt);
  // images [M,h,w,3] with one rig per camera -> [H,W,C]
  Tensor forward(const Tensor& images, const std::vector<CameraRig>& rigs,
                 bool training, PairCounter* counter = nullptr);
  const SinBevtConfig& config() const { return cfg_; }

 private:
  SinBevtConfig cfg_;
  TinyImageEncoder encoder_;
  Tensor bev_embed_;  // [1, H0, W0, C]
  struct Stage {
    Tensor in_w, in_b;  // encoder channels -> C
    Tensor pe_w;        // [6, C]
    FaxSubBlock ca_local, ca_global;
    ResBottleneck block1, block2;
  };
  std::vector<Stage> stages_;
};

struct CompressorConfig {
  int64_t dim = 32;
  int64_t rate = 1;  // power-of-two channel reduction
};

// 1x1 convolutional autoencoder for feature transmission.
class Compressor {
 public:
  Compressor() = default;
  Compressor(ParamStore& store, const std::string& prefix, const CompressorConfig& cfg,
             Rng& rng, Dtype dt);
  Tensor compress(const Tensor& feat) const;    // [H,W,C] -> [H,W,C/r]
  Tensor decompress(const Tensor& z) const;     // [H,W,C/r] -> [H,W,C]
  // transmitted f32 payload for one feature map
  int64_t payload_bytes(int64_t h, int64_t w) const;
  const CompressorConfig& config() const { return cfg_; }

 private:
  CompressorConfig cfg_;
  Tensor enc_w_, enc_b_, dec_w_, dec_b_;
};

struct FuseBevtConfig {
  int64_t dim = 32;
  int num_heads = 4;
  int64_t h = 8, w = 8;
  int64_t window = 4;  // P = G
  int layers = 3;
  int64_t n_max = 4;
};

// Stacked per-agent BEV features h in R^{N x H x W x C}; validity slot 0 is
// the ego agent whose fused slice is returned.
struct AgentStack {
  Tensor features;
  std::vector<char> validity;
  std::vector<Pose2D> poses;
};

class FuseBevt {
 public:
  FuseBevt() = default;
  FuseBevt(ParamStore& store, const std::string& prefix, const FuseBevtConfig& cfg,
           Rng& rng, Dtype dt);
  // -> ego slice [H,W,C]
  Tensor forward(const AgentStack& stack, PairCounter* counter = nullptr);
  const FuseBevtConfig& config() const { return cfg_; }

 private:
  FuseBevtConfig cfg_;
  std::vector<FaxSubBlock> local_, global_;
};

// 3 x (bilinear upsample, conv3x3, BN, GELU) with channels C, C/2, C/4, then
// a 1x1 head: 2 classes (dynamic) or 3 (static).
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore& store, const std::string& prefix, int64_t channels, Rng& rng,
          Dtype dt);
  Tensor forward(const Tensor& fused, int num_classes, bool training);

 private:
  Tensor w_[3], b_[3], g_[3], be_[3];
  BatchNormState bn_[3];
  Tensor head_dyn_w_, head_dyn_b_, head_stat_w_, head_stat_b_;
};

struct CobevtConfig {
  SinBevtConfig sinbevt = SinBevtConfig::toy();
  FuseBevtConfig fusebevt;
  CompressorConfig compressor;
  double comm_range_m = 70.0;
  double bev_extent_m = 64.0;

  static CobevtConfig toy();
  static CobevtConfig micro();
  void validate() const;
  BevGrid feature_grid() const;  // grid of the fused BEV feature
};

struct AgentInputs {
  Tensor images;  // [M,h,w,3]
  std::vector<CameraRig> rigs;
  Pose2D pose;
};

// Full cooperative pipeline: per-agent SinBEVT, compress/decompress, warp to
// ego, range-gated stacking, FuseBEVT, decoder.
class CobevtModel {
 public:
  CobevtModel(const CobevtConfig& cfg, uint64_t seed, Dtype dt = Dtype::F32);

  // agents[0] is ego. Returns logits [8H, 8W, K].
  Tensor forward(const std::vector<AgentInputs>& agents, bool training,
                 int num_classes = 2, PairCounter* counter = nullptr);
  // Intermediate stages, exposed for the degenerate-pipeline identities.
  AgentStack build_stack(const std::vector<AgentInputs>& agents, bool training,
                         PairCounter* counter = nullptr);

  ParamStore& store() { return store_; }
  const CobevtConfig& config() const { return cfg_; }
  SinBevt& sinbevt() { return sin_; }
  Compressor& compressor() { return comp_; }
  FuseBevt& fusebevt() { return fuse_; }
  Decoder& decoder() { return dec_; }
  Dtype dtype() const { return dt_; }

 private:
  CobevtConfig cfg_;
  Dtype dt_;
  ParamStore store_;
  SinBevt sin_;
  Compressor comp_;
  FuseBevt fuse_;
  Decoder dec_;
};

// Versioned key-value text form of the model configuration.
void write_model_config(std::ostream& os, const CobevtConfig& cfg);
CobevtConfig read_model_config(std::istream& is);
void save_model_config(const std::string& path, const CobevtConfig& cfg);
CobevtConfig load_model_config(const std::string& path);

// Single-agent baseline: SinBEVT + decoder, no fusion stack.
class SingleAgentModel {
 public:
  SingleAgentModel(const SinBevtConfig& cfg, uint64_t seed, Dtype dt = Dtype::F32);
  Tensor forward(const Tensor& images, const std::vector<CameraRig>& rigs,
                 bool training, int num_classes = 2);
  ParamStore& store() { return store_; }
  SinBevt& sinbevt() { return sin_; }

 private:
  Dtype dt_;
  ParamStore store_;
  SinBevt sin_;
  Decoder dec_;
};

}  // namespace faxbev
