#pragma once

// Loop-based dense references for the windowed/grid attention stack. These
// deliberately avoid the tensor ops: plain nested loops over raw buffers,
// reading weights out of the parameter tensors by value.

#include <cmath>
#include <vector>

#include "faxbev/attention.hpp"
#include "faxbev/partition.hpp"

namespace faxbev::naive {

using Buf = std::vector<double>;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

// y = LN(x) per row of length c with affine
inline Buf layer_norm(const Buf& x, const Buf& g, const Buf& b, int64_t c,
                      double eps = 1e-5) {
  Buf y(x.size());
  int64_t rows = static_cast<int64_t>(x.size()) / c;
  for (int64_t r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (int64_t j = 0; j < c; ++j) mu += x[r * c + j];
    mu /= c;
    for (int64_t j = 0; j < c; ++j) {
      double d = x[r * c + j] - mu;
      var += d * d;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) {
      y[r * c + j] = (x[r * c + j] - mu) * inv * g[j] + b[j];
    }
  }
  return y;
}

// y[r, :] = x[r, :] @ w  (w is [cin, cout])
inline Buf matvec_rows(const Buf& x, const Buf& w, int64_t cin, int64_t cout) {
  int64_t rows = static_cast<int64_t>(x.size()) / cin;
  Buf y(static_cast<size_t>(rows * cout), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t i = 0; i < cin; ++i) {
      double v = x[r * cin + i];
      for (int64_t j = 0; j < cout; ++j) y[r * cout + j] += v * w[i * cout + j];
    }
  }
  return y;
}

struct TokenCoord {
  int64_t n, a, b;     // agent, row-in-window, col-in-window
  int64_t y, x;        // map coordinates
};

// window tokens for window index wi under the (n, p, q) lexicographic order
inline std::vector<TokenCoord> block_tokens(const PartitionSpec& s, int64_t wi) {
  int64_t wx = s.w / s.pw;
  int64_t i = wi / wx, j = wi % wx;
  std::vector<TokenCoord> toks;
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t p = 0; p < s.ph; ++p) {
      for (int64_t q = 0; q < s.pw; ++q) {
        toks.push_back({n, p, q, i * s.ph + p, j * s.pw + q});
      }
    }
  }
  return toks;
}

inline std::vector<TokenCoord> grid_tokens(const PartitionSpec& s, int64_t gi) {
  int64_t ux = s.w / s.gw;
  int64_t u = gi / ux, v = gi % ux;
  std::vector<TokenCoord> toks;
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t a = 0; a < s.gh; ++a) {
      for (int64_t b = 0; b < s.gw; ++b) {
        toks.push_back({n, a, b, a * (s.h / s.gh) + u, b * (s.w / s.gw) + v});
      }
    }
  }
  return toks;
}

// One self-attention branch (local windows or the strided grid) evaluated
// with explicit per-pair loops. Returns the updated [N,H,W,C] buffer.
inline Buf fax_sa_branch(const Buf& x, const FaxSubBlock& p, const PartitionSpec& spec,
                         bool grid, const std::vector<char>* validity = nullptr) {
  int64_t C = p.cfg.dim;
  int heads = p.cfg.num_heads;
  int64_t dk = C / heads;
  const Buf& qkv_w = p.qkv_w.values();
  const Buf& table = p.rel_bias.table().values();

  Buf normed = layer_norm(x, p.norm1_g.values(), p.norm1_b.values(), C);
  Buf attn_out(x.size(), 0.0);

  int64_t th = grid ? spec.gh : spec.ph;
  int64_t tw = grid ? spec.gw : spec.pw;
  int64_t groups = grid ? spec.num_grid_groups() : spec.num_windows();
  int64_t bias_w = 2 * tw - 1;
  int64_t bias_hw = (2 * th - 1) * bias_w;

  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    auto toks = grid ? grid_tokens(spec, gidx) : block_tokens(spec, gidx);
    int64_t T = static_cast<int64_t>(toks.size());
    // project q, k, v per token
    Buf q(T * C), k(T * C), v(T * C);
    for (int64_t t = 0; t < T; ++t) {
      const TokenCoord& tc = toks[static_cast<size_t>(t)];
      const double* in = normed.data() + ((tc.n * spec.h + tc.y) * spec.w + tc.x) * C;
      for (int64_t j = 0; j < C; ++j) {
        double acc_q = 0, acc_k = 0, acc_v = 0;
        for (int64_t d = 0; d < C; ++d) {
          acc_q += in[d] * qkv_w[d * 3 * C + j];
          acc_k += in[d] * qkv_w[d * 3 * C + C + j];
          acc_v += in[d] * qkv_w[d * 3 * C + 2 * C + j];
        }
        q[t * C + j] = acc_q;
        k[t * C + j] = acc_k;
        v[t * C + j] = acc_v;
      }
    }
    // per head attention with the 3D relative bias
    Buf ctx(T * C, 0.0);
    for (int h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < T; ++i) {
        Buf scores(static_cast<size_t>(T));
        double mx = -1e300;
        for (int64_t j = 0; j < T; ++j) {
          double s = 0;
          for (int64_t d = 0; d < dk; ++d) {
            s += q[i * C + h * dk + d] * k[j * C + h * dk + d];
          }
          s /= std::sqrt(static_cast<double>(dk));
          const TokenCoord& ti = toks[static_cast<size_t>(i)];
          const TokenCoord& tj = toks[static_cast<size_t>(j)];
          int64_t off = (ti.n - tj.n + spec.n - 1) * bias_hw +
                        (ti.a - tj.a + th - 1) * bias_w + (ti.b - tj.b + tw - 1);
          s += table[h * (2 * spec.n - 1) * bias_hw + off];
          if (validity && !(*validity)[static_cast<size_t>(tj.n)]) s += -1e30;
          scores[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double z = 0;
        for (int64_t j = 0; j < T; ++j) {
          scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
          z += scores[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < T; ++j) {
          double pw = scores[static_cast<size_t>(j)] / z;
          for (int64_t d = 0; d < dk; ++d) {
            ctx[i * C + h * dk + d] += pw * v[j * C + h * dk + d];
          }
        }
      }
    }
    // output projection and scatter into the map
    const Buf& ow = p.out_w.values();
    const Buf& ob = p.out_b.values();
    for (int64_t t = 0; t < T; ++t) {
      const TokenCoord& tc = toks[static_cast<size_t>(t)];
      double* dst = attn_out.data() + ((tc.n * spec.h + tc.y) * spec.w + tc.x) * C;
      for (int64_t j = 0; j < C; ++j) {
        double acc = ob[j];
        for (int64_t d = 0; d < C; ++d) acc += ctx[t * C + d] * ow[d * C + j];
        dst[j] = acc;
      }
    }
  }

  Buf y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + attn_out[i];
  // MLP residual
  Buf n2 = layer_norm(y, p.norm2_g.values(), p.norm2_b.values(), C);
  int64_t hidden = p.mlp_w1.dim(1);
  Buf h1 = matvec_rows(n2, p.mlp_w1.values(), C, hidden);
  for (double& v2 : h1) v2 = gelu(v2);
  Buf m = matvec_rows(h1, p.mlp_w2.values(), hidden, C);
  for (size_t i = 0; i < y.size(); ++i) y[i] += m[i];
  return y;
}

inline Buf fax_sa_block(const Buf& x, const FaxSubBlock& local, const FaxSubBlock& global,
                        const PartitionSpec& spec,
                        const std::vector<char>* validity = nullptr) {
  return fax_sa_branch(fax_sa_branch(x, local, spec, false, validity), global, spec,
                       true, validity);
}

// Cross-attention branch: BEV queries against camera-feature keys/values.
inline Buf fax_ca_branch(const Buf& bev, const Buf& cam, const Buf& pe,
                         const FaxSubBlock& p, const PartitionSpec& sb,
                         const PartitionSpec& sf, bool grid) {
  int64_t C = p.cfg.dim;
  int heads = p.cfg.num_heads;
  int64_t dk = C / heads;

  Buf bev_n = layer_norm(bev, p.norm1_g.values(), p.norm1_b.values(), C);
  Buf cam_n = layer_norm(cam, p.norm_kv_g.values(), p.norm_kv_b.values(), C);
  Buf key_in = cam_n;
  if (!pe.empty()) {
    for (size_t i = 0; i < key_in.size(); ++i) key_in[i] += pe[i];
  }

  int64_t groups = grid ? sb.num_grid_groups() : sb.num_windows();
  Buf attn_out(bev.size(), 0.0);
  const Buf& bias = p.ca_bias.values();

  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    auto qt = grid ? grid_tokens(sb, gidx) : block_tokens(sb, gidx);
    auto kt = grid ? grid_tokens(sf, gidx) : block_tokens(sf, gidx);
    int64_t tq = static_cast<int64_t>(qt.size());
    int64_t tk = static_cast<int64_t>(kt.size());
    Buf q(tq * C), k(tk * C), v(tk * C);
    for (int64_t t = 0; t < tq; ++t) {
      const TokenCoord& tc = qt[static_cast<size_t>(t)];
      const double* in = bev_n.data() + ((tc.n * sb.h + tc.y) * sb.w + tc.x) * C;
      for (int64_t j = 0; j < C; ++j) {
        double acc = 0;
        for (int64_t d = 0; d < C; ++d) acc += in[d] * p.q_w.values()[d * C + j];
        q[t * C + j] = acc;
      }
    }
    for (int64_t t = 0; t < tk; ++t) {
      const TokenCoord& tc = kt[static_cast<size_t>(t)];
      int64_t base = ((tc.n * sf.h + tc.y) * sf.w + tc.x) * C;
      for (int64_t j = 0; j < C; ++j) {
        double acc_k = 0, acc_v = 0;
        for (int64_t d = 0; d < C; ++d) {
          acc_k += key_in[base + d] * p.k_w.values()[d * C + j];
          acc_v += cam_n[base + d] * p.v_w.values()[d * C + j];
        }
        k[t * C + j] = acc_k;
        v[t * C + j] = acc_v;
      }
    }
    Buf ctx(tq * C, 0.0);
    for (int h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < tq; ++i) {
        Buf scores(static_cast<size_t>(tk));
        double mx = -1e300;
        for (int64_t j = 0; j < tk; ++j) {
          double s = 0;
          for (int64_t d = 0; d < dk; ++d) {
            s += q[i * C + h * dk + d] * k[j * C + h * dk + d];
          }
          s /= std::sqrt(static_cast<double>(dk));
          s += bias[(h * tq + i) * tk + j];
          scores[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double z = 0;
        for (int64_t j = 0; j < tk; ++j) {
          scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
          z += scores[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < tk; ++j) {
          double pw = scores[static_cast<size_t>(j)] / z;
          for (int64_t d = 0; d < dk; ++d) {
            ctx[i * C + h * dk + d] += pw * v[j * C + h * dk + d];
          }
        }
      }
    }
    const Buf& ow = p.out_w.values();
    const Buf& ob = p.out_b.values();
    for (int64_t t = 0; t < tq; ++t) {
      const TokenCoord& tc = qt[static_cast<size_t>(t)];
      double* dst = attn_out.data() + ((tc.n * sb.h + tc.y) * sb.w + tc.x) * C;
      for (int64_t j = 0; j < C; ++j) {
        double acc = ob[j];
        for (int64_t d = 0; d < C; ++d) acc += ctx[t * C + d] * ow[d * C + j];
        dst[j] = acc;
      }
    }
  }

  Buf y(bev.size());
  for (size_t i = 0; i < bev.size(); ++i) y[i] = bev[i] + attn_out[i];
  Buf n2 = layer_norm(y, p.norm2_g.values(), p.norm2_b.values(), C);
  int64_t hidden = p.mlp_w1.dim(1);
  Buf h1 = matvec_rows(n2, p.mlp_w1.values(), C, hidden);
  for (double& v2 : h1) v2 = gelu(v2);
  Buf m = matvec_rows(h1, p.mlp_w2.values(), hidden, C);
  for (size_t i = 0; i < y.size(); ++i) y[i] += m[i];
  return y;
}

inline Buf fax_ca_block(const Buf& bev, const Buf& cam, const Buf& pe,
                        const FaxSubBlock& local, const FaxSubBlock& global,
                        const PartitionSpec& sb, const PartitionSpec& sf) {
  return fax_ca_branch(fax_ca_branch(bev, cam, pe, local, sb, sf, false), cam, pe,
                       global, sb, sf, true);
}

}  // namespace faxbev::naive
