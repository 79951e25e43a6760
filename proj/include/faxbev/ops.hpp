#pragma once

#include <memory>
#include <vector>

#include "faxbev/tensor.hpp"

namespace faxbev {

// Elementwise with numpy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor gelu(const Tensor& x);  // tanh approximation

// Batched matrix product a[..., m, k] @ b[..., k, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax_lastaxis(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// x <- W2 * GELU(W1 * x) applied on the channel (last) axis; no biases.
Tensor mlp_block(const Tensor& x, const Tensor& w1, const Tensor& w2);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute_axes(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end);
// stack [x0, x1, ...] -> [N, ...]
Tensor stack0(const std::vector<Tensor>& xs);

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar

// x: [H,W,Cin] or [B,H,W,Cin]; w: [kh,kw,Cin,Cout]; bias: [Cout] or undefined.
// Kernels are restricted to 1x1 and 3x3; 3x3 uses padding 1 by convention.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding);

// align_corners=false; x: [H,W,C] -> [2H,2W,C]
Tensor bilinear_upsample2x(const Tensor& x);

// Per-channel batch statistics over all non-channel axes. Running buffers are
// plain state tensors (no grad) updated in training mode.
struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
};
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training, double eps = 1e-5);

// out[h, i, j] = table[h, idx[i*tk + j]]; backward scatter-adds into table.
Tensor bias_lookup(const Tensor& table, std::shared_ptr<const std::vector<int64_t>> idx,
                   int64_t tq, int64_t tk);

// out.flat[i] = x.flat[src[i]] where src is a bijection over [0, numel).
Tensor gather_permutation(const Tensor& x,
                          std::shared_ptr<const std::vector<int64_t>> src,
                          Shape out_shape);

// out[i, :] = x[rows[i], :] for 2-D x; rows may repeat.
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows);

// logits: [..., K]; target: flat class ids, one per logit row.
// mean over rows of -w[t] * log softmax(logits)[t]
Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& target,
                              const std::vector<double>& class_weights);
// mean over rows of -(1 - p_t)^gamma * log p_t
Tensor focal_loss(const Tensor& logits, const std::vector<int>& target,
                  double gamma = 2.0);

// y = x @ w (+ b); x: [..., Cin], w: [Cin, Cout], b: [Cout]
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace faxbev
