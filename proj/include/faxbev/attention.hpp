#pragma once

#include <memory>
#include <string>
#include <vector>

#include "faxbev/ops.hpp"
#include "faxbev/partition.hpp"
#include "faxbev/tensor.hpp"

namespace faxbev {

struct AttentionConfig {
  int64_t dim = 0;
  int num_heads = 1;

  int64_t head_dim() const {
    if (num_heads < 1 || dim % num_heads) {
      throw ConfigError("AttentionConfig: heads " + std::to_string(num_heads) +
                        " must divide dim " + std::to_string(dim));
    }
    return dim / num_heads;
  }
};

// Per-call score-pair instrumentation: incremented by groups*heads*Tq*Tk at
// every attention evaluation. When attn_capture is set, each evaluation also
// appends its post-softmax attention map [G, heads, Tq, Tk].
struct PairCounter {
  int64_t pairs = 0;
  std::vector<Tensor>* attn_capture = nullptr;
};

// Learnable per-head bias indexed by 3D token offsets (agent, row, col) for
// tokens ordered (n, a, b) lexicographically. Table shape is
// [heads, (2n-1)*(2th-1)*(2tw-1)]; the index map is fixed by the geometry.
class RelativeBiasTable {
 public:
  RelativeBiasTable() = default;
  RelativeBiasTable(ParamStore& store, const std::string& name, int heads,
                    int64_t n, int64_t th, int64_t tw, Dtype dt);

  // [heads, T, T] with T = n*th*tw
  Tensor bias() const;
  bool defined() const { return table_.defined(); }
  const Tensor& table() const { return table_; }
  const std::vector<int64_t>& index_map() const { return *index_; }

 private:
  Tensor table_;
  std::shared_ptr<std::vector<int64_t>> index_;
  int64_t tokens_ = 0;
};

// softmax(q kT / sqrt(d_k) + B (+ mask)) v per group and head, heads merged
// and projected by out_w/out_b. q: [G, Tq, C], k/v: [G, Tk, C],
// bias: [heads, Tq, Tk] or undefined, key_mask: broadcastable to
// [G, heads, Tq, Tk] (typically [1, 1, 1, Tk]) or undefined.
Tensor relative_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& bias, const Tensor& out_w,
                          const Tensor& out_b, const AttentionConfig& cfg,
                          PairCounter* counter = nullptr,
                          const Tensor& key_mask = {});

// Additive key mask [1, 1, 1, n*tokens_per_agent] with 0 for valid agents and
// a large negative constant for invalid ones; undefined when all valid.
Tensor agent_key_mask(const std::vector<char>& validity, int64_t tokens_per_agent);

// Parameters of one (LN, attention, LN, MLP) unit. Self-attention variants
// use the fused qkv projection; cross-attention variants carry separate
// q/k/v projections, a key/value LN, and a dense learned bias.
struct FaxSubBlock {
  AttentionConfig cfg;
  Tensor norm1_g, norm1_b;
  Tensor qkv_w;                  // [C, 3C] (self-attention)
  Tensor q_w, k_w, v_w;          // [C, C] each (cross-attention)
  Tensor norm_kv_g, norm_kv_b;   // (cross-attention)
  Tensor out_w, out_b;
  RelativeBiasTable rel_bias;    // (self-attention)
  Tensor ca_bias;                // [heads, Tq, Tk] (cross-attention)
  Tensor norm2_g, norm2_b;
  Tensor mlp_w1, mlp_w2;

  static FaxSubBlock self_attention(ParamStore& store, const std::string& prefix,
                                    const AttentionConfig& cfg, int64_t n,
                                    int64_t th, int64_t tw, Rng& rng, Dtype dt);
  static FaxSubBlock cross_attention(ParamStore& store, const std::string& prefix,
                                     const AttentionConfig& cfg, int64_t tq,
                                     int64_t tk, Rng& rng, Dtype dt);
};

// Local branch of a FAX-SA block over stacked features [N,H,W,C]:
//   x <- x + Fused-Unblock(Attn(Fused-Block(LN(x))))
//   x <- x + MLP(LN(x))
Tensor fax_local_sa(const Tensor& x, const FaxSubBlock& p, const PartitionSpec& spec,
                    PairCounter* counter = nullptr,
                    const std::vector<char>* validity = nullptr);

// Global branch, identical structure over the grid partition.
Tensor fax_global_sa(const Tensor& x, const FaxSubBlock& p, const PartitionSpec& spec,
                     PairCounter* counter = nullptr,
                     const std::vector<char>* validity = nullptr);

// Full FAX-SA block: local branch then global branch.
Tensor fax_sa_block(const Tensor& x, const FaxSubBlock& local,
                    const FaxSubBlock& global, const PartitionSpec& spec,
                    PairCounter* counter = nullptr,
                    const std::vector<char>* validity = nullptr);

// FAX-CA block: BEV queries [1,Hb,Wb,C] cross-attend to camera features
// [M,hf,wf,C] (positional encoding added to the key pathway only) window by
// window in the local branch and grid by grid in the global branch. Window
// and grid group counts of the two partitions must match.
Tensor fax_ca_block(const Tensor& bev_query, const Tensor& cam_feats,
                    const Tensor& pos_enc, const FaxSubBlock& local,
                    const FaxSubBlock& global, const PartitionSpec& spec_bev,
                    const PartitionSpec& spec_feat, PairCounter* counter = nullptr);

}  // namespace faxbev
