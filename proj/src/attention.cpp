#include "faxbev/attention.hpp"

#include <cmath>

namespace faxbev {

namespace {

constexpr double kMaskValue = -1e30;

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

}  // namespace

RelativeBiasTable::RelativeBiasTable(ParamStore& store, const std::string& name,
                                     int heads, int64_t n, int64_t th, int64_t tw,
                                     Dtype dt) {
  tokens_ = n * th * tw;
  int64_t size = (2 * n - 1) * (2 * th - 1) * (2 * tw - 1);
  table_ = store.add(name, Tensor::zeros({heads, size}, dt, true));
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<size_t>(tokens_ * tokens_));
  for (int64_t i = 0; i < tokens_; ++i) {
    int64_t ni = i / (th * tw), ai = (i / tw) % th, bi = i % tw;
    for (int64_t j = 0; j < tokens_; ++j) {
      int64_t nj = j / (th * tw), aj = (j / tw) % th, bj = j % tw;
      int64_t dn = ni - nj + n - 1;
      int64_t da = ai - aj + th - 1;
      int64_t db = bi - bj + tw - 1;
      idx->push_back((dn * (2 * th - 1) + da) * (2 * tw - 1) + db);
    }
  }
  index_ = std::move(idx);
}

Tensor RelativeBiasTable::bias() const {
  return bias_lookup(table_, index_, tokens_, tokens_);
}

Tensor relative_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& bias, const Tensor& out_w,
                          const Tensor& out_b, const AttentionConfig& cfg,
                          PairCounter* counter, const Tensor& key_mask) {
  int64_t dk = cfg.head_dim();
  int heads = cfg.num_heads;
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("relative_attention: q/k/v must be [groups, tokens, C]");
  }
  int64_t groups = q.dim(0), tq = q.dim(1), tk = k.dim(1);
  if (k.dim(0) != groups || v.dim(0) != groups || v.dim(1) != tk ||
      q.dim(2) != cfg.dim || k.dim(2) != cfg.dim || v.dim(2) != cfg.dim) {
    throw ShapeError("relative_attention: mismatched shapes q " +
                     shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }

  auto split_heads = [&](const Tensor& t, int64_t tokens) {
    return permute_axes(reshape(t, {groups, tokens, heads, dk}), {0, 2, 1, 3});
  };
  Tensor qh = split_heads(q, tq);                       // [G, h, Tq, dk]
  Tensor kh = split_heads(k, tk);                       // [G, h, Tk, dk]
  Tensor vh = split_heads(v, tk);
  Tensor kt = permute_axes(kh, {0, 1, 3, 2});           // [G, h, dk, Tk]

  Tensor scores = scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (counter) counter->pairs += groups * heads * tq * tk;
  if (bias.defined()) scores = add(scores, bias);       // [heads, Tq, Tk] broadcast
  if (key_mask.defined()) scores = add(scores, key_mask);

  Tensor attn = softmax_lastaxis(scores);
  if (counter && counter->attn_capture) counter->attn_capture->push_back(attn);
  Tensor ctx = matmul(attn, vh);                        // [G, h, Tq, dk]
  Tensor merged = reshape(permute_axes(ctx, {0, 2, 1, 3}), {groups, tq, cfg.dim});
  return linear(merged, out_w, out_b);
}

Tensor agent_key_mask(const std::vector<char>& validity, int64_t tokens_per_agent) {
  bool all_valid = true;
  for (char v : validity) all_valid = all_valid && v;
  if (all_valid) return {};
  int64_t n = static_cast<int64_t>(validity.size());
  std::vector<double> vals(static_cast<size_t>(n * tokens_per_agent), 0.0);
  for (int64_t a = 0; a < n; ++a) {
    if (!validity[static_cast<size_t>(a)]) {
      for (int64_t t = 0; t < tokens_per_agent; ++t) {
        vals[static_cast<size_t>(a * tokens_per_agent + t)] = kMaskValue;
      }
    }
  }
  return Tensor::from_data({1, 1, 1, n * tokens_per_agent}, std::move(vals), Dtype::F64);
}

FaxSubBlock FaxSubBlock::self_attention(ParamStore& store, const std::string& prefix,
                                        const AttentionConfig& cfg, int64_t n,
                                        int64_t th, int64_t tw, Rng& rng, Dtype dt) {
  FaxSubBlock p;
  p.cfg = cfg;
  int64_t c = cfg.dim;
  p.norm1_g = make_ones(store, prefix + ".norm1.gamma", {c}, dt);
  p.norm1_b = make_zeros(store, prefix + ".norm1.beta", {c}, dt);
  p.qkv_w = make_weight(store, prefix + ".attn.qkv.weight", {c, 3 * c}, c, rng, dt);
  p.out_w = make_weight(store, prefix + ".attn.out.weight", {c, c}, c, rng, dt);
  p.out_b = make_zeros(store, prefix + ".attn.out.bias", {c}, dt);
  p.rel_bias = RelativeBiasTable(store, prefix + ".attn.rel_bias", cfg.num_heads, n,
                                 th, tw, dt);
  p.norm2_g = make_ones(store, prefix + ".norm2.gamma", {c}, dt);
  p.norm2_b = make_zeros(store, prefix + ".norm2.beta", {c}, dt);
  p.mlp_w1 = make_weight(store, prefix + ".mlp.w1", {c, 2 * c}, c, rng, dt);
  p.mlp_w2 = make_weight(store, prefix + ".mlp.w2", {2 * c, c}, 2 * c, rng, dt);
  return p;
}

FaxSubBlock FaxSubBlock::cross_attention(ParamStore& store, const std::string& prefix,
                                         const AttentionConfig& cfg, int64_t tq,
                                         int64_t tk, Rng& rng, Dtype dt) {
  FaxSubBlock p;
  p.cfg = cfg;
  int64_t c = cfg.dim;
  p.norm1_g = make_ones(store, prefix + ".norm_q.gamma", {c}, dt);
  p.norm1_b = make_zeros(store, prefix + ".norm_q.beta", {c}, dt);
  p.norm_kv_g = make_ones(store, prefix + ".norm_kv.gamma", {c}, dt);
  p.norm_kv_b = make_zeros(store, prefix + ".norm_kv.beta", {c}, dt);
  p.q_w = make_weight(store, prefix + ".attn.q.weight", {c, c}, c, rng, dt);
  p.k_w = make_weight(store, prefix + ".attn.k.weight", {c, c}, c, rng, dt);
  p.v_w = make_weight(store, prefix + ".attn.v.weight", {c, c}, c, rng, dt);
  p.out_w = make_weight(store, prefix + ".attn.out.weight", {c, c}, c, rng, dt);
  p.out_b = make_zeros(store, prefix + ".attn.out.bias", {c}, dt);
  p.ca_bias = make_zeros(store, prefix + ".attn.bias", {cfg.num_heads, tq, tk}, dt);
  p.norm2_g = make_ones(store, prefix + ".norm2.gamma", {c}, dt);
  p.norm2_b = make_zeros(store, prefix + ".norm2.beta", {c}, dt);
  p.mlp_w1 = make_weight(store, prefix + ".mlp.w1", {c, 2 * c}, c, rng, dt);
  p.mlp_w2 = make_weight(store, prefix + ".mlp.w2", {2 * c, c}, 2 * c, rng, dt);
  return p;
}

namespace {

// Shared local/global self-attention body; only the partition differs.
Tensor fax_sa_branch(const Tensor& x, const FaxSubBlock& p, const PartitionSpec& spec,
                     bool grid, PairCounter* counter,
                     const std::vector<char>* validity) {
  Tensor tokens = grid ? fused_grid(layer_norm(x, p.norm1_g, p.norm1_b), spec)
                       : fused_block(layer_norm(x, p.norm1_g, p.norm1_b), spec);
  int64_t c = p.cfg.dim;
  Tensor qkv = linear(tokens, p.qkv_w);  // [G, T, 3C]
  Tensor q = slice(qkv, 2, 0, c);
  Tensor k = slice(qkv, 2, c, 2 * c);
  Tensor v = slice(qkv, 2, 2 * c, 3 * c);

  Tensor mask;
  if (validity) {
    int64_t per_agent = grid ? spec.gh * spec.gw : spec.ph * spec.pw;
    mask = agent_key_mask(*validity, per_agent);
  }
  Tensor attn = relative_attention(q, k, v, p.rel_bias.bias(), p.out_w, p.out_b,
                                   p.cfg, counter, mask);
  Tensor y = add(x, grid ? fused_ungrid(attn, spec) : fused_unblock(attn, spec));
  return add(y, mlp_block(layer_norm(y, p.norm2_g, p.norm2_b), p.mlp_w1, p.mlp_w2));
}

}  // namespace

Tensor fax_local_sa(const Tensor& x, const FaxSubBlock& p, const PartitionSpec& spec,
                    PairCounter* counter, const std::vector<char>* validity) {
  return fax_sa_branch(x, p, spec, false, counter, validity);
}

Tensor fax_global_sa(const Tensor& x, const FaxSubBlock& p, const PartitionSpec& spec,
                     PairCounter* counter, const std::vector<char>* validity) {
  return fax_sa_branch(x, p, spec, true, counter, validity);
}

Tensor fax_sa_block(const Tensor& x, const FaxSubBlock& local,
                    const FaxSubBlock& global, const PartitionSpec& spec,
                    PairCounter* counter, const std::vector<char>* validity) {
  return fax_global_sa(fax_local_sa(x, local, spec, counter, validity), global, spec,
                       counter, validity);
}

namespace {

Tensor fax_ca_branch(const Tensor& bev, const Tensor& cam, const Tensor& pe,
                     const FaxSubBlock& p, const PartitionSpec& spec_bev,
                     const PartitionSpec& spec_feat, bool grid, PairCounter* counter) {
  int64_t nb = grid ? spec_bev.num_grid_groups() : spec_bev.num_windows();
  int64_t nf = grid ? spec_feat.num_grid_groups() : spec_feat.num_windows();
  if (nb != nf) {
    throw ConfigError(std::string("fax_ca_block: ") + (grid ? "grid group" : "window") +
                      " counts differ: bev " + std::to_string(nb) + " vs feat " +
                      std::to_string(nf));
  }
  auto part = [&](const Tensor& t, const PartitionSpec& s) {
    return grid ? fused_grid(t, s) : fused_block(t, s);
  };
  Tensor bq = part(layer_norm(bev, p.norm1_g, p.norm1_b), spec_bev);
  Tensor feats = layer_norm(cam, p.norm_kv_g, p.norm_kv_b);
  Tensor key_in = pe.defined() ? add(feats, pe) : feats;
  Tensor q = linear(bq, p.q_w);
  Tensor k = linear(part(key_in, spec_feat), p.k_w);
  Tensor v = linear(part(feats, spec_feat), p.v_w);

  Tensor attn = relative_attention(q, k, v, p.ca_bias, p.out_w, p.out_b, p.cfg, counter);
  Tensor merged = grid ? fused_ungrid(attn, spec_bev) : fused_unblock(attn, spec_bev);
  Tensor y = add(bev, merged);
  return add(y, mlp_block(layer_norm(y, p.norm2_g, p.norm2_b), p.mlp_w1, p.mlp_w2));
}

}  // namespace

Tensor fax_ca_block(const Tensor& bev_query, const Tensor& cam_feats,
                    const Tensor& pos_enc, const FaxSubBlock& local,
                    const FaxSubBlock& global, const PartitionSpec& spec_bev,
                    const PartitionSpec& spec_feat, PairCounter* counter) {
  if (bev_query.rank() != 4 || bev_query.dim(0) != 1) {
    throw ShapeError("fax_ca_block: bev query must be [1,Hb,Wb,C], got " +
                     shape_str(bev_query.shape()));
  }
  Tensor x = fax_ca_branch(bev_query, cam_feats, pos_enc, local, spec_bev, spec_feat,
                           false, counter);
  return fax_ca_branch(x, cam_feats, pos_enc, global, spec_bev, spec_feat, true,
                       counter);
}

}  // namespace faxbev
