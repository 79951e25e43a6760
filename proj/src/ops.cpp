#include "faxbev/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "faxbev/parallel.hpp"

namespace faxbev {

namespace {

using detail::Node;

// Right-aligned broadcast of two shapes.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `s` extended to `out` rank, with 0 on broadcast axes.
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t stride = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    size_t oi = out.size() - s.size() + static_cast<size_t>(i);
    strides[oi] = (s[static_cast<size_t>(i)] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= s[static_cast<size_t>(i)];
  }
  return strides;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> strides(s.size(), 0);
  int64_t stride = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    strides[static_cast<size_t>(i)] = stride;
    stride *= s[static_cast<size_t>(i)];
  }
  return strides;
}

inline int64_t map_offset(int64_t flat, const std::vector<int64_t>& out_strides,
                          const std::vector<int64_t>& in_strides) {
  int64_t off = 0;
  for (size_t d = 0; d < out_strides.size(); ++d) {
    int64_t coord = flat / out_strides[d];
    flat -= coord * out_strides[d];
    off += coord * in_strides[d];
  }
  return off;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

enum class BinOp { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  bool rg = a.requires_grad() || b.requires_grad();
  auto out = detail::make_node(out_shape, promote(a.dtype(), b.dtype()), rg,
                               {a.node(), b.node()});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->values.data();
  int64_t n = out->numel();

  if (same_shape(a.shape(), b.shape())) {
    parallel_for(n, [&](int64_t lo, int64_t hi) {
      switch (op) {
        case BinOp::Add: for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i]; break;
        case BinOp::Sub: for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] - pb[i]; break;
        case BinOp::Mul: for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i]; break;
      }
    });
  } else {
    auto os = row_major_strides(out_shape);
    auto as = bcast_strides(a.shape(), out_shape);
    auto bs = bcast_strides(b.shape(), out_shape);
    parallel_for(n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) {
        double va = pa[map_offset(i, os, as)];
        double vb = pb[map_offset(i, os, bs)];
        po[i] = op == BinOp::Add ? va + vb : (op == BinOp::Sub ? va - vb : va * vb);
      }
    });
  }
  detail::finalize(*out);

  if (rg) {
    auto na = a.node();
    auto nb = b.node();
    out->backprop = [na, nb, op, out_shape](Node& self) {
      auto os = row_major_strides(out_shape);
      auto as = bcast_strides(na->shape, out_shape);
      auto bs = bcast_strides(nb->shape, out_shape);
      int64_t n = self.numel();
      const double* g = self.grad.data();
      if (na->requires_grad) {
        double* ga = detail::ensure_grad(*na).data();
        const double* pb = nb->values.data();
        for (int64_t i = 0; i < n; ++i) {
          double gi = g[i];
          if (op == BinOp::Mul) gi *= pb[map_offset(i, os, bs)];
          ga[map_offset(i, os, as)] += gi;
        }
      }
      if (nb->requires_grad) {
        double* gb = detail::ensure_grad(*nb).data();
        const double* pa = na->values.data();
        for (int64_t i = 0; i < n; ++i) {
          double gi = g[i];
          if (op == BinOp::Mul) gi *= pa[map_offset(i, os, as)];
          if (op == BinOp::Sub) gi = -gi;
          gb[map_offset(i, os, bs)] += gi;
        }
      }
    };
  }
  return Tensor(std::move(out));
}

constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;

inline double gelu_fwd(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluA * (x + kGeluB * x * x * x)));
}

inline double gelu_bwd(double x) {
  double u = kGeluA * (x + kGeluB * x * x * x);
  double t = std::tanh(u);
  double du = kGeluA * (1.0 + 3.0 * kGeluB * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Splits a matmul-style shape into (batch dims, m, k).
void split_matmul_shape(const Shape& s, const char* who, Shape* batch, int64_t* r,
                        int64_t* c) {
  if (s.size() < 2) {
    throw ShapeError(std::string("matmul: ") + who + " must have rank >= 2, got " +
                     shape_str(s));
  }
  batch->assign(s.begin(), s.end() - 2);
  *r = s[s.size() - 2];
  *c = s[s.size() - 1];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& x, double s) {
  auto out = detail::make_node(x.shape(), x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  int64_t n = out->numel();
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = px[i] * s;
  });
  detail::finalize(*out);
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, s](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      for (int64_t i = 0; i < self.numel(); ++i) gx[i] += g[i] * s;
    };
  }
  return Tensor(std::move(out));
}

Tensor gelu(const Tensor& x) {
  auto out = detail::make_node(x.shape(), x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  parallel_for(out->numel(), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = gelu_fwd(px[i]);
  });
  detail::finalize(*out);
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      const double* px = nx->values.data();
      for (int64_t i = 0; i < self.numel(); ++i) gx[i] += g[i] * gelu_bwd(px[i]);
    };
  }
  return Tensor(std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Shape abatch, bbatch;
  int64_t m, ka, kb, n;
  split_matmul_shape(a.shape(), "lhs", &abatch, &m, &ka);
  split_matmul_shape(b.shape(), "rhs", &bbatch, &kb, &n);
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Shape obatch = broadcast_shape(abatch, bbatch, "matmul");
  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  int64_t k = ka;
  int64_t batch = numel_of(obatch);
  auto ostr = row_major_strides(obatch);
  auto astr = bcast_strides(abatch, obatch);
  auto bstr = bcast_strides(bbatch, obatch);

  bool rg = a.requires_grad() || b.requires_grad();
  auto out = detail::make_node(out_shape, promote(a.dtype(), b.dtype()), rg,
                               {a.node(), b.node()});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->values.data();

  parallel_for(batch * m, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      int64_t bi = r / m, i = r % m;
      const double* A = pa + map_offset(bi, ostr, astr) * m * k + i * k;
      const double* B = pb + map_offset(bi, ostr, bstr) * k * n;
      double* C = po + bi * m * n + i * n;
      for (int64_t kk = 0; kk < k; ++kk) {
        double av = A[kk];
        if (av == 0.0) continue;
        const double* Br = B + kk * n;
        for (int64_t j = 0; j < n; ++j) C[j] += av * Br[j];
      }
    }
  });
  detail::finalize(*out);

  if (rg) {
    auto na = a.node();
    auto nb = b.node();
    out->backprop = [na, nb, obatch, ostr, astr, bstr, batch, m, k, n](Node& self) {
      const double* g = self.grad.data();
      const double* pa = na->values.data();
      const double* pb = nb->values.data();
      if (na->requires_grad) {
        double* ga = detail::ensure_grad(*na).data();
        // dA[i, kk] = sum_j g[i, j] * B[kk, j]; rows of dA are owned per
        // chunk, batches that alias a broadcast A stay within the chunk.
        parallel_for(m, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) {
            for (int64_t bi = 0; bi < batch; ++bi) {
              double* dA = ga + map_offset(bi, ostr, astr) * m * k + i * k;
              const double* B = pb + map_offset(bi, ostr, bstr) * k * n;
              const double* G = g + bi * m * n + i * n;
              for (int64_t kk = 0; kk < k; ++kk) {
                const double* Br = B + kk * n;
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j) acc += G[j] * Br[j];
                dA[kk] += acc;
              }
            }
          }
        });
      }
      if (nb->requires_grad) {
        double* gb = detail::ensure_grad(*nb).data();
        // dB[kk, j] = sum_i A[i, kk] * g[i, j]; parallel over kk rows.
        parallel_for(k, [&](int64_t lo, int64_t hi) {
          for (int64_t kk = lo; kk < hi; ++kk) {
            for (int64_t bi = 0; bi < batch; ++bi) {
              const double* A = pa + map_offset(bi, ostr, astr) * m * k;
              double* dB = gb + map_offset(bi, ostr, bstr) * k * n + kk * n;
              const double* G = g + bi * m * n;
              for (int64_t i = 0; i < m; ++i) {
                double av = A[i * k + kk];
                if (av == 0.0) continue;
                const double* Gr = G + i * n;
                for (int64_t j = 0; j < n; ++j) dB[j] += av * Gr[j];
              }
            }
          }
        });
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor softmax_lastaxis(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError("softmax_lastaxis: need a non-empty last axis, got " +
                     shape_str(x.shape()));
  }
  int64_t cols = x.shape().back();
  int64_t rows = x.numel() / cols;
  auto out = detail::make_node(x.shape(), x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const double* in = px + r * cols;
      double* o = po + r * cols;
      double mx = in[0];
      for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
      double s = 0.0;
      for (int64_t j = 0; j < cols; ++j) {
        o[j] = std::exp(in[j] - mx);
        s += o[j];
      }
      double inv = 1.0 / s;
      for (int64_t j = 0; j < cols; ++j) o[j] *= inv;
    }
  });
  detail::finalize(*out);
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, cols, rows](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      const double* y = self.values.data();
      parallel_for(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          const double* gr = g + r * cols;
          const double* yr = y + r * cols;
          double dot = 0.0;
          for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
          double* gxr = gx + r * cols;
          for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      });
    };
  }
  return Tensor(std::move(out));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  int64_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: channel count " + std::to_string(c) +
                     " does not match gamma " + shape_str(gamma.shape()) +
                     " / beta " + shape_str(beta.shape()));
  }
  int64_t rows = x.numel() / c;
  bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  auto out = detail::make_node(x.shape(), x.dtype(), rg,
                               {x.node(), gamma.node(), beta.node()});
  const double* px = x.values().data();
  const double* pg = gamma.values().data();
  const double* pbta = beta.values().data();
  double* po = out->values.data();
  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const double* in = px + r * c;
      double* o = po + r * c;
      double mu = 0.0;
      for (int64_t j = 0; j < c; ++j) mu += in[j];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        double d = in[j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      double inv = 1.0 / std::sqrt(var + eps);
      for (int64_t j = 0; j < c; ++j) o[j] = (in[j] - mu) * inv * pg[j] + pbta[j];
    }
  });
  detail::finalize(*out);

  if (rg) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    out->backprop = [nx, ng, nb, c, rows, eps](Node& self) {
      const double* g = self.grad.data();
      const double* px = nx->values.data();
      const double* pg = ng->values.data();
      double* gx = nx->requires_grad ? detail::ensure_grad(*nx).data() : nullptr;
      double* gg = ng->requires_grad ? detail::ensure_grad(*ng).data() : nullptr;
      double* gb = nb->requires_grad ? detail::ensure_grad(*nb).data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * c;
        const double* gr = g + r * c;
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += in[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          double d = in[j] - mu;
          var += d * d;
        }
        var /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(var + eps);
        // xhat_j = (x_j - mu) * inv
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          double xhat = (in[j] - mu) * inv;
          double dxhat = gr[j] * pg[j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
          if (gg) gg[j] += gr[j] * xhat;
          if (gb) gb[j] += gr[j];
        }
        if (gx) {
          mean_dxhat /= static_cast<double>(c);
          mean_dxhat_xhat /= static_cast<double>(c);
          double* gxr = gx + r * c;
          for (int64_t j = 0; j < c; ++j) {
            double xhat = (in[j] - mu) * inv;
            double dxhat = gr[j] * pg[j];
            gxr[j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
          }
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor mlp_block(const Tensor& x, const Tensor& w1, const Tensor& w2) {
  if (w1.rank() != 2 || w2.rank() != 2 || x.shape().back() != w1.dim(0) ||
      w1.dim(1) != w2.dim(0) || w2.dim(1) != x.shape().back()) {
    throw ShapeError("mlp_block: shapes do not chain, x " + shape_str(x.shape()) +
                     ", w1 " + shape_str(w1.shape()) + ", w2 " +
                     shape_str(w2.shape()));
  }
  return linear(gelu(linear(x, w1)), w2);
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  auto out = detail::make_node(new_shape, x.dtype(), x.requires_grad(), {x.node()});
  out->values = x.values();
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      for (int64_t i = 0; i < self.numel(); ++i) gx[i] += g[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor permute_axes(const Tensor& x, const std::vector<int>& perm) {
  size_t rank = x.shape().size();
  if (perm.size() != rank) {
    throw ShapeError("permute_axes: permutation size " + std::to_string(perm.size()) +
                     " for rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t d = 0; d < rank; ++d) {
    int p = perm[d];
    if (p < 0 || static_cast<size_t>(p) >= rank || seen[static_cast<size_t>(p)]) {
      throw ShapeError("permute_axes: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
    out_shape[d] = x.dim(p);
  }

  auto in_strides = row_major_strides(x.shape());
  auto out_strides = row_major_strides(out_shape);
  // in offset for each out axis
  std::vector<int64_t> src_strides(rank);
  for (size_t d = 0; d < rank; ++d) src_strides[d] = in_strides[static_cast<size_t>(perm[d])];

  auto out = detail::make_node(out_shape, x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  parallel_for(out->numel(), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = px[map_offset(i, out_strides, src_strides)];
  });

  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, out_strides, src_strides](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      int64_t n = self.numel();
      // bijection: each input slot written exactly once
      parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) gx[map_offset(i, out_strides, src_strides)] += g[i];
      });
    };
  }
  return Tensor(std::move(out));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  Shape out_shape = xs[0].shape();
  size_t rank = out_shape.size();
  if (axis < 0 || static_cast<size_t>(axis) >= rank) {
    throw ShapeError("concat: axis out of range");
  }
  int64_t total = 0;
  bool rg = false;
  Dtype dt = xs[0].dtype();
  for (const Tensor& t : xs) {
    if (t.rank() != static_cast<int>(rank)) {
      throw ShapeError("concat: rank mismatch");
    }
    for (size_t d = 0; d < rank; ++d) {
      if (d != static_cast<size_t>(axis) && t.dim(static_cast<int>(d)) != out_shape[d]) {
        throw ShapeError("concat: shape mismatch at axis " + std::to_string(d) +
                         ": " + shape_str(t.shape()) + " vs " + shape_str(out_shape));
      }
    }
    total += t.dim(axis);
    rg = rg || t.requires_grad();
    dt = promote(dt, t.dtype());
  }
  out_shape[static_cast<size_t>(axis)] = total;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= out_shape[d];

  std::vector<std::shared_ptr<Node>> parents;
  for (const Tensor& t : xs) parents.push_back(t.node());
  auto out = detail::make_node(out_shape, dt, rg, parents);
  double* po = out->values.data();
  int64_t out_row = total * inner;
  int64_t col0 = 0;
  for (const Tensor& t : xs) {
    int64_t w = t.dim(axis) * inner;
    const double* pt = t.values().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + o * out_row + col0, pt + o * w, static_cast<size_t>(w) * sizeof(double));
    }
    col0 += w;
  }
  detail::finalize(*out);

  if (rg) {
    std::vector<int64_t> widths;
    for (const Tensor& t : xs) widths.push_back(t.dim(axis) * inner);
    out->backprop = [widths, outer, out_row](Node& self) {
      const double* g = self.grad.data();
      int64_t col0 = 0;
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        Node* p = self.parents[pi].get();
        int64_t w = widths[pi];
        if (p->requires_grad) {
          double* gp = detail::ensure_grad(*p).data();
          for (int64_t o = 0; o < outer; ++o) {
            const double* gr = g + o * out_row + col0;
            double* gpr = gp + o * w;
            for (int64_t j = 0; j < w; ++j) gpr[j] += gr[j];
          }
        }
        col0 += w;
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end) {
  size_t rank = x.shape().size();
  if (axis < 0 || static_cast<size_t>(axis) >= rank || begin < 0 || end > x.dim(axis) ||
      begin >= end) {
    throw ShapeError("slice: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") on axis " + std::to_string(axis) +
                     " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - begin;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= x.shape()[d];
  int64_t in_row = x.dim(axis) * inner;
  int64_t out_row = (end - begin) * inner;

  auto out = detail::make_node(out_shape, x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(po + o * out_row, px + o * in_row + begin * inner,
                static_cast<size_t>(out_row) * sizeof(double));
  }
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, outer, inner, in_row, out_row, begin](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        const double* gr = g + o * out_row;
        double* gxr = gx + o * in_row + begin * inner;
        for (int64_t j = 0; j < out_row; ++j) gxr[j] += gr[j];
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor stack0(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("stack0: empty input list");
  std::vector<Tensor> expanded;
  expanded.reserve(xs.size());
  for (const Tensor& t : xs) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(t, s));
  }
  return concat(expanded, 0);
}

Tensor sum(const Tensor& x) {
  auto out = detail::make_node({1}, x.dtype(), x.requires_grad(), {x.node()});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out->values[0] = acc;
  detail::finalize(*out);
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      double g = self.grad[0];
      for (size_t i = 0; i < nx->values.size(); ++i) gx[i] += g;
    };
  }
  return Tensor(std::move(out));
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding) {
  if (w.rank() != 4) {
    throw ShapeError("conv2d: weight must be [kh,kw,Cin,Cout], got " +
                     shape_str(w.shape()));
  }
  int64_t kh = w.dim(0), kw = w.dim(1), cin = w.dim(2), cout = w.dim(3);
  if (!((kh == 1 && kw == 1) || (kh == 3 && kw == 3))) {
    throw ConfigError("conv2d: unsupported kernel size " + std::to_string(kh) + "x" +
                      std::to_string(kw) + " (only 1x1 and 3x3)");
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");

  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) {
    throw ShapeError("conv2d: input must be [H,W,Cin] or [B,H,W,Cin], got " +
                     shape_str(x.shape()));
  }
  int64_t B = batched ? x.dim(0) : 1;
  int64_t H = x.dim(batched ? 1 : 0), W = x.dim(batched ? 2 : 1);
  int64_t C = x.dim(batched ? 3 : 2);
  if (C != cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(C) +
                     " vs weight Cin " + std::to_string(cin));
  }
  int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: output would be empty");

  bool has_bias = bias.defined();
  if (has_bias && bias.numel() != cout) {
    throw ShapeError("conv2d: bias size " + std::to_string(bias.numel()) +
                     " vs Cout " + std::to_string(cout));
  }

  Shape out_shape = batched ? Shape{B, Ho, Wo, cout} : Shape{Ho, Wo, cout};
  bool rg = x.requires_grad() || w.requires_grad() || (has_bias && bias.requires_grad());
  std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  auto out = detail::make_node(out_shape, promote(x.dtype(), w.dtype()), rg, parents);

  const double* px = x.values().data();
  const double* pw = w.values().data();
  const double* pbias = has_bias ? bias.values().data() : nullptr;
  double* po = out->values.data();

  parallel_for(B * Ho, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      int64_t b = r / Ho, oy = r % Ho;
      const double* xb = px + b * H * W * C;
      double* orow = po + (b * Ho + oy) * Wo * cout;
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double* o = orow + ox * cout;
        if (pbias) {
          for (int64_t co = 0; co < cout; ++co) o[co] = pbias[co];
        }
        for (int64_t ky = 0; ky < kh; ++ky) {
          int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kx = 0; kx < kw; ++kx) {
            int64_t ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= W) continue;
            const double* xin = xb + (iy * W + ix) * C;
            const double* wk = pw + (ky * kw + kx) * cin * cout;
            for (int64_t ci = 0; ci < cin; ++ci) {
              double xv = xin[ci];
              if (xv == 0.0) continue;
              const double* wr = wk + ci * cout;
              for (int64_t co = 0; co < cout; ++co) o[co] += xv * wr[co];
            }
          }
        }
      }
    }
  });
  detail::finalize(*out);

  if (rg) {
    auto nx = x.node();
    auto nw = w.node();
    auto nbias = has_bias ? bias.node() : nullptr;
    out->backprop = [nx, nw, nbias, B, H, W, C, Ho, Wo, kh, kw, cin, cout, stride,
                     padding](Node& self) {
      const double* g = self.grad.data();
      const double* px = nx->values.data();
      const double* pw = nw->values.data();
      if (nx->requires_grad) {
        double* gx = detail::ensure_grad(*nx).data();
        parallel_for(B * H, [&](int64_t lo, int64_t hi) {
          for (int64_t r = lo; r < hi; ++r) {
            int64_t b = r / H, iy = r % H;
            double* gxrow = gx + (b * H + iy) * W * C;
            const double* gb = g + b * Ho * Wo * cout;
            for (int64_t ix = 0; ix < W; ++ix) {
              double* gxi = gxrow + ix * C;
              for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t num_y = iy + padding - ky;
                if (num_y < 0 || num_y % stride) continue;
                int64_t oy = num_y / stride;
                if (oy >= Ho) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  int64_t num_x = ix + padding - kx;
                  if (num_x < 0 || num_x % stride) continue;
                  int64_t ox = num_x / stride;
                  if (ox >= Wo) continue;
                  const double* go = gb + (oy * Wo + ox) * cout;
                  const double* wk = pw + (ky * kw + kx) * cin * cout;
                  for (int64_t ci = 0; ci < cin; ++ci) {
                    const double* wr = wk + ci * cout;
                    double acc = 0.0;
                    for (int64_t co = 0; co < cout; ++co) acc += go[co] * wr[co];
                    gxi[ci] += acc;
                  }
                }
              }
            }
          }
        });
      }
      if (nw->requires_grad) {
        double* gw = detail::ensure_grad(*nw).data();
        parallel_for(kh * kw * cin, [&](int64_t lo, int64_t hi) {
          for (int64_t t = lo; t < hi; ++t) {
            int64_t ky = t / (kw * cin);
            int64_t kx = (t / cin) % kw;
            int64_t ci = t % cin;
            double* gwr = gw + ((ky * kw + kx) * cin + ci) * cout;
            for (int64_t b = 0; b < B; ++b) {
              const double* xb = px + b * H * W * C;
              const double* gb = g + b * Ho * Wo * cout;
              for (int64_t oy = 0; oy < Ho; ++oy) {
                int64_t iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= H) continue;
                for (int64_t ox = 0; ox < Wo; ++ox) {
                  int64_t ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= W) continue;
                  double xv = xb[(iy * W + ix) * C + ci];
                  if (xv == 0.0) continue;
                  const double* go = gb + (oy * Wo + ox) * cout;
                  for (int64_t co = 0; co < cout; ++co) gwr[co] += xv * go[co];
                }
              }
            }
          }
        });
      }
      if (nbias && nbias->requires_grad) {
        double* gbias = detail::ensure_grad(*nbias).data();
        int64_t pixels = B * Ho * Wo;
        for (int64_t p = 0; p < pixels; ++p) {
          const double* go = g + p * cout;
          for (int64_t co = 0; co < cout; ++co) gbias[co] += go[co];
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor bilinear_upsample2x(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("bilinear_upsample2x: input must be [H,W,C], got " +
                     shape_str(x.shape()));
  }
  int64_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  int64_t Ho = 2 * H, Wo = 2 * W;
  auto out = detail::make_node({Ho, Wo, C}, x.dtype(), x.requires_grad(), {x.node()});

  // align_corners=false source coordinate with edge clamping
  auto src = [](int64_t o, int64_t n, int64_t* i0, int64_t* i1, double* w1) {
    double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (s < 0) s = 0;
    if (s > static_cast<double>(n - 1)) s = static_cast<double>(n - 1);
    *i0 = static_cast<int64_t>(s);
    *i1 = std::min(*i0 + 1, n - 1);
    *w1 = s - static_cast<double>(*i0);
  };

  const double* px = x.values().data();
  double* po = out->values.data();
  parallel_for(Ho, [&](int64_t lo, int64_t hi) {
    for (int64_t oy = lo; oy < hi; ++oy) {
      int64_t y0, y1;
      double wy;
      src(oy, H, &y0, &y1, &wy);
      for (int64_t ox = 0; ox < Wo; ++ox) {
        int64_t x0, x1;
        double wx;
        src(ox, W, &x0, &x1, &wx);
        const double* p00 = px + (y0 * W + x0) * C;
        const double* p01 = px + (y0 * W + x1) * C;
        const double* p10 = px + (y1 * W + x0) * C;
        const double* p11 = px + (y1 * W + x1) * C;
        double* o = po + (oy * Wo + ox) * C;
        for (int64_t c = 0; c < C; ++c) {
          double top = p00[c] * (1 - wx) + p01[c] * wx;
          double bot = p10[c] * (1 - wx) + p11[c] * wx;
          o[c] = top * (1 - wy) + bot * wy;
        }
      }
    }
  });
  detail::finalize(*out);

  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, H, W, C, Ho, Wo, src](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      for (int64_t oy = 0; oy < Ho; ++oy) {
        int64_t y0, y1;
        double wy;
        src(oy, H, &y0, &y1, &wy);
        for (int64_t ox = 0; ox < Wo; ++ox) {
          int64_t x0, x1;
          double wx;
          src(ox, W, &x0, &x1, &wx);
          const double* go = g + (oy * Wo + ox) * C;
          double* g00 = gx + (y0 * W + x0) * C;
          double* g01 = gx + (y0 * W + x1) * C;
          double* g10 = gx + (y1 * W + x0) * C;
          double* g11 = gx + (y1 * W + x1) * C;
          for (int64_t c = 0; c < C; ++c) {
            double v = go[c];
            g00[c] += v * (1 - wy) * (1 - wx);
            g01[c] += v * (1 - wy) * wx;
            g10[c] += v * wy * (1 - wx);
            g11[c] += v * wy * wx;
          }
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training, double eps) {
  int64_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c ||
      state.running_var.numel() != c) {
    throw ShapeError("batch_norm: channel mismatch for input " + shape_str(x.shape()));
  }
  int64_t rows = x.numel() / c;
  bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  auto out = detail::make_node(x.shape(), x.dtype(), rg,
                               {x.node(), gamma.node(), beta.node()});

  const double* px = x.values().data();
  const double* pg = gamma.values().data();
  const double* pb = beta.values().data();
  double* po = out->values.data();

  std::vector<double> mu(static_cast<size_t>(c), 0.0), var(static_cast<size_t>(c), 0.0);
  if (training) {
    for (int64_t r = 0; r < rows; ++r) {
      const double* in = px + r * c;
      for (int64_t j = 0; j < c; ++j) mu[static_cast<size_t>(j)] += in[j];
    }
    for (int64_t j = 0; j < c; ++j) mu[static_cast<size_t>(j)] /= static_cast<double>(rows);
    for (int64_t r = 0; r < rows; ++r) {
      const double* in = px + r * c;
      for (int64_t j = 0; j < c; ++j) {
        double d = in[j] - mu[static_cast<size_t>(j)];
        var[static_cast<size_t>(j)] += d * d;
      }
    }
    for (int64_t j = 0; j < c; ++j) var[static_cast<size_t>(j)] /= static_cast<double>(rows);
    // update running stats (population variance; documented)
    double m = state.momentum;
    auto& rm = state.running_mean.mutable_values();
    auto& rv = state.running_var.mutable_values();
    for (int64_t j = 0; j < c; ++j) {
      rm[static_cast<size_t>(j)] = (1 - m) * rm[static_cast<size_t>(j)] + m * mu[static_cast<size_t>(j)];
      rv[static_cast<size_t>(j)] = (1 - m) * rv[static_cast<size_t>(j)] + m * var[static_cast<size_t>(j)];
    }
    detail::quantize(rm, state.running_mean.dtype());
    detail::quantize(rv, state.running_var.dtype());
  } else {
    const auto& rm = state.running_mean.values();
    const auto& rv = state.running_var.values();
    mu.assign(rm.begin(), rm.end());
    var.assign(rv.begin(), rv.end());
  }

  std::vector<double> inv(static_cast<size_t>(c));
  for (int64_t j = 0; j < c; ++j) inv[static_cast<size_t>(j)] = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + eps);

  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const double* in = px + r * c;
      double* o = po + r * c;
      for (int64_t j = 0; j < c; ++j) {
        o[j] = (in[j] - mu[static_cast<size_t>(j)]) * inv[static_cast<size_t>(j)] * pg[j] + pb[j];
      }
    }
  });
  detail::finalize(*out);

  if (rg) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    out->backprop = [nx, ng, nb, c, rows, mu, inv, training](Node& self) {
      const double* g = self.grad.data();
      const double* px = nx->values.data();
      const double* pg = ng->values.data();
      double* gx = nx->requires_grad ? detail::ensure_grad(*nx).data() : nullptr;
      double* gg = ng->requires_grad ? detail::ensure_grad(*ng).data() : nullptr;
      double* gb = nb->requires_grad ? detail::ensure_grad(*nb).data() : nullptr;
      std::vector<double> sum_dy(static_cast<size_t>(c), 0.0);
      std::vector<double> sum_dy_xhat(static_cast<size_t>(c), 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * c;
        const double* gr = g + r * c;
        for (int64_t j = 0; j < c; ++j) {
          double xhat = (in[j] - mu[static_cast<size_t>(j)]) * inv[static_cast<size_t>(j)];
          sum_dy[static_cast<size_t>(j)] += gr[j];
          sum_dy_xhat[static_cast<size_t>(j)] += gr[j] * xhat;
        }
      }
      if (gg || gb) {
        for (int64_t j = 0; j < c; ++j) {
          if (gg) gg[j] += sum_dy_xhat[static_cast<size_t>(j)];
          if (gb) gb[j] += sum_dy[static_cast<size_t>(j)];
        }
      }
      if (gx) {
        double n = static_cast<double>(rows);
        for (int64_t r = 0; r < rows; ++r) {
          const double* in = px + r * c;
          const double* gr = g + r * c;
          double* gxr = gx + r * c;
          for (int64_t j = 0; j < c; ++j) {
            size_t js = static_cast<size_t>(j);
            if (training) {
              double xhat = (in[j] - mu[js]) * inv[js];
              gxr[j] += pg[j] * inv[js] *
                        (gr[j] - sum_dy[js] / n - xhat * sum_dy_xhat[js] / n);
            } else {
              gxr[j] += pg[j] * inv[js] * gr[j];
            }
          }
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor bias_lookup(const Tensor& table, std::shared_ptr<const std::vector<int64_t>> idx,
                   int64_t tq, int64_t tk) {
  if (table.rank() != 2) {
    throw ShapeError("bias_lookup: table must be [heads, size], got " +
                     shape_str(table.shape()));
  }
  if (static_cast<int64_t>(idx->size()) != tq * tk) {
    throw ShapeError("bias_lookup: index count " + std::to_string(idx->size()) +
                     " vs tq*tk " + std::to_string(tq * tk));
  }
  int64_t heads = table.dim(0), size = table.dim(1);
  auto out = detail::make_node({heads, tq, tk}, table.dtype(), table.requires_grad(),
                               {table.node()});
  const double* pt = table.values().data();
  double* po = out->values.data();
  const auto& ix = *idx;
  for (int64_t h = 0; h < heads; ++h) {
    const double* row = pt + h * size;
    double* o = po + h * tq * tk;
    for (int64_t i = 0; i < tq * tk; ++i) {
      int64_t off = ix[static_cast<size_t>(i)];
      o[i] = row[off];
    }
  }
  if (out->requires_grad) {
    auto nt = table.node();
    out->backprop = [nt, idx, tq, tk, heads, size](Node& self) {
      double* gt = detail::ensure_grad(*nt).data();
      const double* g = self.grad.data();
      const auto& ix = *idx;
      for (int64_t h = 0; h < heads; ++h) {
        double* row = gt + h * size;
        const double* gr = g + h * tq * tk;
        for (int64_t i = 0; i < tq * tk; ++i) row[ix[static_cast<size_t>(i)]] += gr[i];
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor gather_permutation(const Tensor& x,
                          std::shared_ptr<const std::vector<int64_t>> src,
                          Shape out_shape) {
  if (static_cast<int64_t>(src->size()) != x.numel() ||
      numel_of(out_shape) != x.numel()) {
    throw ShapeError("gather_permutation: index/shape size mismatch for input " +
                     shape_str(x.shape()));
  }
  auto out = detail::make_node(std::move(out_shape), x.dtype(), x.requires_grad(),
                               {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  const auto& map = *src;
  parallel_for(out->numel(), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) po[i] = px[map[static_cast<size_t>(i)]];
  });
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, src](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      const auto& map = *src;
      // src is a bijection, so parallel scatter is race-free
      parallel_for(self.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) gx[map[static_cast<size_t>(i)]] += g[i];
      });
    };
  }
  return Tensor(std::move(out));
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  if (x.rank() != 2) {
    throw ShapeError("gather_rows: input must be 2-D, got " + shape_str(x.shape()));
  }
  int64_t n = x.dim(0), c = x.dim(1);
  for (int64_t r : rows) {
    if (r < 0 || r >= n) throw ShapeError("gather_rows: row index out of range");
  }
  int64_t m = static_cast<int64_t>(rows.size());
  auto out = detail::make_node({m, c}, x.dtype(), x.requires_grad(), {x.node()});
  const double* px = x.values().data();
  double* po = out->values.data();
  for (int64_t i = 0; i < m; ++i) {
    std::memcpy(po + i * c, px + rows[static_cast<size_t>(i)] * c,
                static_cast<size_t>(c) * sizeof(double));
  }
  if (out->requires_grad) {
    auto nx = x.node();
    out->backprop = [nx, rows, c](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* g = self.grad.data();
      for (size_t i = 0; i < rows.size(); ++i) {
        const double* gr = g + static_cast<int64_t>(i) * c;
        double* gxr = gx + rows[i] * c;
        for (int64_t j = 0; j < c; ++j) gxr[j] += gr[j];
      }
    };
  }
  return Tensor(std::move(out));
}

namespace {

void check_targets(const std::vector<int>& target, int64_t rows, int64_t k,
                   const char* op) {
  if (static_cast<int64_t>(target.size()) != rows) {
    throw ShapeError(std::string(op) + ": " + std::to_string(target.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  for (int t : target) {
    if (t < 0 || t >= k) {
      throw UsageError(std::string(op) + ": class id " + std::to_string(t) +
                       " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& target,
                              const std::vector<double>& class_weights) {
  int64_t k = logits.shape().back();
  int64_t rows = logits.numel() / k;
  check_targets(target, rows, k, "weighted_cross_entropy");
  if (static_cast<int64_t>(class_weights.size()) != k) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(class_weights.size()) +
                     " weights for " + std::to_string(k) + " classes");
  }
  auto out = detail::make_node({1}, logits.dtype(), logits.requires_grad(),
                               {logits.node()});
  const double* px = logits.values().data();
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = px + r * k;
    double mx = in[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    double lse = mx + std::log(s);
    int t = target[static_cast<size_t>(r)];
    acc += -class_weights[static_cast<size_t>(t)] * (in[t] - lse);
  }
  out->values[0] = acc / static_cast<double>(rows);
  detail::finalize(*out);

  if (out->requires_grad) {
    auto nx = logits.node();
    out->backprop = [nx, target, class_weights, rows, k](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* px = nx->values.data();
      double g = self.grad[0] / static_cast<double>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * k;
        double* gxr = gx + r * k;
        double mx = in[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
        int t = target[static_cast<size_t>(r)];
        double w = class_weights[static_cast<size_t>(t)];
        for (int64_t j = 0; j < k; ++j) {
          double p = std::exp(in[j] - mx) / s;
          gxr[j] += g * w * (p - (j == t ? 1.0 : 0.0));
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor focal_loss(const Tensor& logits, const std::vector<int>& target, double gamma) {
  if (gamma < 0) throw ConfigError("focal_loss: gamma must be >= 0");
  int64_t k = logits.shape().back();
  int64_t rows = logits.numel() / k;
  check_targets(target, rows, k, "focal_loss");

  auto out = detail::make_node({1}, logits.dtype(), logits.requires_grad(),
                               {logits.node()});
  const double* px = logits.values().data();
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = px + r * k;
    double mx = in[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    int t = target[static_cast<size_t>(r)];
    double logp = in[t] - (mx + std::log(s));
    double p = std::exp(logp);
    acc += -std::pow(1.0 - p, gamma) * logp;
  }
  out->values[0] = acc / static_cast<double>(rows);
  detail::finalize(*out);

  if (out->requires_grad) {
    auto nx = logits.node();
    out->backprop = [nx, target, gamma, rows, k](Node& self) {
      double* gx = detail::ensure_grad(*nx).data();
      const double* px = nx->values.data();
      double g = self.grad[0] / static_cast<double>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * k;
        double* gxr = gx + r * k;
        double mx = in[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
        int t = target[static_cast<size_t>(r)];
        double logp = in[t] - (mx + std::log(s));
        double p = std::exp(logp);
        // d/dlogp of -(1-p)^g * logp with p = e^logp
        double one_m = 1.0 - p;
        double dLds = gamma * (one_m <= 0.0 ? 0.0 : std::pow(one_m, gamma - 1.0)) * p * logp -
                      (one_m <= 0.0 ? 0.0 : std::pow(one_m, gamma));
        for (int64_t j = 0; j < k; ++j) {
          double pj = std::exp(in[j] - mx) / s;
          double dsdx = (j == t ? 1.0 : 0.0) - pj;
          gxr[j] += g * dLds * dsdx;
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + " vs w " +
                     shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor flat = reshape(x, {x.numel() / x.shape().back(), x.shape().back()});
  return reshape(matmul(flat, w), out_shape);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = linear(x, w);
  if (!b.defined()) return y;
  if (b.numel() != w.dim(1)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs w " +
                     shape_str(w.shape()));
  }
  return add(y, b);
}

}  // namespace faxbev
