#include "faxbev/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "faxbev/attention.hpp"
#include "faxbev/geometry.hpp"
#include "faxbev/models.hpp"
#include "faxbev/ops.hpp"
#include "faxbev/partition.hpp"

namespace faxbev {

GradCheckResult check_gradient(const std::string& name, std::vector<Tensor> leaves,
                               const std::function<Tensor()>& loss_fn,
                               const GradCheckOptions& opts) {
  for (Tensor& l : leaves) {
    if (l.dtype() != Dtype::F64 || !l.requires_grad()) {
      throw UsageError("check_gradient(" + name + "): leaves must be f64 with grad");
    }
    l.zero_grad();
  }
  Tensor loss = loss_fn();
  backward(loss);

  GradCheckResult res;
  res.name = name;
  res.passed = true;
  Rng rng(opts.sample_seed);
  for (Tensor& leaf : leaves) {
    const std::vector<double>* g = leaf.grad();
    int64_t n = leaf.numel();
    std::vector<int64_t> coords;
    if (opts.max_coords_per_leaf > 0 && n > opts.max_coords_per_leaf) {
      for (int i = 0; i < opts.max_coords_per_leaf; ++i) {
        coords.push_back(rng.uniform_int(0, n - 1));
      }
    } else {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    }
    auto& vals = leaf.mutable_values();
    for (int64_t i : coords) {
      double orig = vals[static_cast<size_t>(i)];
      vals[static_cast<size_t>(i)] = orig + opts.h;
      double fp = loss_fn().values()[0];
      vals[static_cast<size_t>(i)] = orig - opts.h;
      double fm = loss_fn().values()[0];
      vals[static_cast<size_t>(i)] = orig;
      double fd = (fp - fm) / (2.0 * opts.h);
      double an = g ? (*g)[static_cast<size_t>(i)] : 0.0;
      double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      double rel = std::abs(fd - an) / denom;
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.coords;
    }
  }
  res.passed = res.max_rel_err < opts.tol;
  return res;
}

namespace {

Tensor randn_like(Shape shape, Rng& rng, double scale = 1.0) {
  return Tensor::uniform(std::move(shape), -scale, scale, rng, Dtype::F64, true);
}

// Generic scalar readout: sum of elementwise product with a fixed random
// probe, so every output element influences the loss.
Tensor probe_loss(const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  Tensor probe = Tensor::uniform(y.shape(), -1.0, 1.0, rng, Dtype::F64, false);
  return sum(mul(y, probe));
}

GradCheckResult simple_check(const std::string& name, std::vector<Tensor> leaves,
                             std::function<Tensor()> fwd, int max_coords = 0) {
  GradCheckOptions opts;
  opts.max_coords_per_leaf = max_coords;
  return check_gradient(name, std::move(leaves), std::move(fwd), opts);
}

}  // namespace

std::vector<NamedCheck> standard_gradchecks() {
  std::vector<NamedCheck> checks;
  auto add_check = [&](const std::string& name, std::function<GradCheckResult()> fn) {
    checks.push_back({name, std::move(fn)});
  };

  add_check("add", [] {
    Rng rng(11);
    Tensor a = randn_like({3, 4}, rng), b = randn_like({3, 4}, rng);
    return simple_check("add", {a, b}, [=] { return probe_loss(add(a, b), 1); });
  });
  add_check("add_broadcast", [] {
    Rng rng(12);
    Tensor a = randn_like({2, 3, 4}, rng), b = randn_like({4}, rng);
    return simple_check("add_broadcast", {a, b},
                        [=] { return probe_loss(add(a, b), 2); });
  });
  add_check("sub", [] {
    Rng rng(13);
    Tensor a = randn_like({5}, rng), b = randn_like({5}, rng);
    return simple_check("sub", {a, b}, [=] { return probe_loss(sub(a, b), 3); });
  });
  add_check("mul", [] {
    Rng rng(14);
    Tensor a = randn_like({3, 4}, rng), b = randn_like({3, 4}, rng);
    return simple_check("mul", {a, b}, [=] { return probe_loss(mul(a, b), 4); });
  });
  add_check("mul_broadcast", [] {
    Rng rng(15);
    Tensor a = randn_like({2, 3, 4}, rng), b = randn_like({3, 1}, rng);
    return simple_check("mul_broadcast", {a, b},
                        [=] { return probe_loss(mul(a, b), 5); });
  });
  add_check("scale", [] {
    Rng rng(16);
    Tensor a = randn_like({7}, rng);
    return simple_check("scale", {a}, [=] { return probe_loss(scale(a, -1.7), 6); });
  });
  add_check("gelu", [] {
    Rng rng(17);
    Tensor a = randn_like({40}, rng, 2.0);
    return simple_check("gelu", {a}, [=] { return probe_loss(gelu(a), 7); });
  });
  add_check("matmul", [] {
    Rng rng(18);
    Tensor a = randn_like({3, 4}, rng), b = randn_like({4, 5}, rng);
    return simple_check("matmul", {a, b}, [=] { return probe_loss(matmul(a, b), 8); });
  });
  add_check("matmul_batched", [] {
    Rng rng(19);
    Tensor a = randn_like({2, 3, 3, 4}, rng), b = randn_like({3, 4, 2}, rng);
    return simple_check("matmul_batched", {a, b},
                        [=] { return probe_loss(matmul(a, b), 9); });
  });
  add_check("softmax_lastaxis", [] {
    Rng rng(20);
    Tensor a = randn_like({4, 6}, rng, 2.0);
    return simple_check("softmax_lastaxis", {a},
                        [=] { return probe_loss(softmax_lastaxis(a), 10); });
  });
  add_check("layer_norm", [] {
    Rng rng(21);
    Tensor x = randn_like({5, 8}, rng), g = randn_like({8}, rng), b = randn_like({8}, rng);
    return simple_check("layer_norm", {x, g, b},
                        [=] { return probe_loss(layer_norm(x, g, b), 11); });
  });
  add_check("mlp_block", [] {
    Rng rng(22);
    Tensor x = randn_like({3, 6}, rng), w1 = randn_like({6, 12}, rng),
           w2 = randn_like({12, 6}, rng);
    return simple_check("mlp_block", {x, w1, w2},
                        [=] { return probe_loss(mlp_block(x, w1, w2), 12); });
  });
  add_check("reshape_permute", [] {
    Rng rng(23);
    Tensor x = randn_like({2, 3, 4}, rng);
    return simple_check("reshape_permute", {x}, [=] {
      return probe_loss(permute_axes(reshape(x, {4, 3, 2}), {2, 0, 1}), 13);
    });
  });
  add_check("concat_slice", [] {
    Rng rng(24);
    Tensor a = randn_like({2, 3}, rng), b = randn_like({2, 2}, rng);
    return simple_check("concat_slice", {a, b}, [=] {
      Tensor c = concat({a, b}, 1);
      return probe_loss(slice(c, 1, 1, 4), 14);
    });
  });
  add_check("conv2d_1x1", [] {
    Rng rng(25);
    Tensor x = randn_like({4, 5, 3}, rng), w = randn_like({1, 1, 3, 2}, rng),
           b = randn_like({2}, rng);
    return simple_check("conv2d_1x1", {x, w, b},
                        [=] { return probe_loss(conv2d(x, w, b, 1, 0), 15); });
  });
  add_check("conv2d_3x3", [] {
    Rng rng(26);
    Tensor x = randn_like({5, 5, 2}, rng), w = randn_like({3, 3, 2, 3}, rng),
           b = randn_like({3}, rng);
    return simple_check("conv2d_3x3", {x, w, b},
                        [=] { return probe_loss(conv2d(x, w, b, 1, 1), 16); });
  });
  add_check("conv2d_3x3_stride2", [] {
    Rng rng(27);
    Tensor x = randn_like({2, 6, 6, 2}, rng), w = randn_like({3, 3, 2, 2}, rng),
           b = randn_like({2}, rng);
    return simple_check("conv2d_3x3_stride2", {x, w, b},
                        [=] { return probe_loss(conv2d(x, w, b, 2, 1), 17); });
  });
  add_check("bilinear_upsample2x", [] {
    Rng rng(28);
    Tensor x = randn_like({3, 4, 2}, rng);
    return simple_check("bilinear_upsample2x", {x},
                        [=] { return probe_loss(bilinear_upsample2x(x), 18); });
  });
  add_check("batch_norm_train", [] {
    Rng rng(29);
    Tensor x = randn_like({6, 2, 3}, rng), g = randn_like({3}, rng), b = randn_like({3}, rng);
    return simple_check("batch_norm_train", {x, g, b}, [=] {
      BatchNormState st;
      st.running_mean = Tensor::zeros({3}, Dtype::F64);
      st.running_var = Tensor::full({3}, 1.0, Dtype::F64);
      return probe_loss(batch_norm(x, g, b, st, true), 19);
    });
  });
  add_check("batch_norm_eval", [] {
    Rng rng(30);
    Tensor x = randn_like({6, 2, 3}, rng), g = randn_like({3}, rng), b = randn_like({3}, rng);
    return simple_check("batch_norm_eval", {x, g, b}, [=] {
      BatchNormState st;
      Rng r2(330);
      st.running_mean = Tensor::uniform({3}, -0.5, 0.5, r2, Dtype::F64);
      st.running_var = Tensor::uniform({3}, 0.5, 1.5, r2, Dtype::F64);
      return probe_loss(batch_norm(x, g, b, st, false), 20);
    });
  });
  add_check("bias_lookup", [] {
    Rng rng(31);
    Tensor table = randn_like({2, 9}, rng);
    auto idx = std::make_shared<std::vector<int64_t>>(
        std::vector<int64_t>{0, 3, 5, 8, 1, 1, 2, 7, 6, 4, 0, 5, 3, 3, 2, 8});
    return simple_check("bias_lookup", {table},
                        [=] { return probe_loss(bias_lookup(table, idx, 4, 4), 21); });
  });
  add_check("fused_block_roundtrip", [] {
    Rng rng(32);
    PartitionSpec spec(2, 4, 4, 3, 2, 2);
    Tensor x = randn_like({2, 4, 4, 3}, rng);
    return simple_check("fused_block_roundtrip", {x}, [=] {
      return probe_loss(fused_ungrid(fused_grid(fused_unblock(fused_block(x, spec), spec), spec), spec), 22);
    });
  });
  add_check("weighted_cross_entropy", [] {
    Rng rng(33);
    Tensor logits = randn_like({3, 3, 4}, rng, 2.0);
    std::vector<int> target = {0, 2, 1, 3, 3, 0, 1, 2, 2};
    std::vector<double> w = {1.0, 2.0, 0.5, 1.5};
    return simple_check("weighted_cross_entropy", {logits},
                        [=] { return weighted_cross_entropy(logits, target, w); });
  });
  add_check("focal_loss", [] {
    Rng rng(34);
    Tensor logits = randn_like({3, 3, 3}, rng, 2.0);
    std::vector<int> target = {0, 2, 1, 1, 2, 0, 1, 0, 2};
    return simple_check("focal_loss", {logits},
                        [=] { return focal_loss(logits, target, 2.0); });
  });
  add_check("warp_features", [] {
    Rng rng(35);
    Tensor x = randn_like({6, 6, 2}, rng);
    BevGrid grid{6, 6, 1.0};
    Pose2D sender(1.3, -0.7, 0.4), ego(0.2, 0.1, -0.2);
    return simple_check("warp_features", {x},
                        [=] { return probe_loss(warp_features(x, sender, ego, grid), 23); });
  });
  add_check("relative_attention", [] {
    Rng rng(36);
    AttentionConfig cfg{4, 2};
    Tensor q = randn_like({2, 3, 4}, rng), k = randn_like({2, 5, 4}, rng),
           v = randn_like({2, 5, 4}, rng), bias = randn_like({2, 3, 5}, rng),
           ow = randn_like({4, 4}, rng), ob = randn_like({4}, rng);
    return simple_check("relative_attention", {q, k, v, bias, ow, ob}, [=] {
      return probe_loss(relative_attention(q, k, v, bias, ow, ob, cfg), 24);
    });
  });

  auto sa_leaves = [](const FaxSubBlock& p) {
    return std::vector<Tensor>{p.norm1_g, p.norm1_b, p.qkv_w, p.out_w, p.out_b,
                               p.rel_bias.table(), p.norm2_g, p.norm2_b, p.mlp_w1,
                               p.mlp_w2};
  };
  add_check("fax_local_sa", [sa_leaves] {
    Rng rng(37);
    ParamStore store;
    AttentionConfig cfg{4, 2};
    PartitionSpec spec(2, 4, 4, 4, 2, 2);
    FaxSubBlock p = FaxSubBlock::self_attention(store, "p", cfg, 2, 2, 2, rng, Dtype::F64);
    Tensor x = randn_like({2, 4, 4, 4}, rng);
    auto leaves = sa_leaves(p);
    leaves.push_back(x);
    return simple_check("fax_local_sa", leaves,
                        [=] { return probe_loss(fax_local_sa(x, p, spec), 25); }, 20);
  });
  add_check("fax_global_sa", [sa_leaves] {
    Rng rng(38);
    ParamStore store;
    AttentionConfig cfg{4, 2};
    PartitionSpec spec(2, 4, 4, 4, 2, 2);
    FaxSubBlock p = FaxSubBlock::self_attention(store, "p", cfg, 2, 2, 2, rng, Dtype::F64);
    Tensor x = randn_like({2, 4, 4, 4}, rng);
    auto leaves = sa_leaves(p);
    leaves.push_back(x);
    return simple_check("fax_global_sa", leaves,
                        [=] { return probe_loss(fax_global_sa(x, p, spec), 26); }, 20);
  });
  add_check("fax_sa_block", [sa_leaves] {
    Rng rng(39);
    ParamStore store;
    AttentionConfig cfg{4, 2};
    PartitionSpec spec(2, 4, 4, 4, 2, 2);
    FaxSubBlock pl = FaxSubBlock::self_attention(store, "l", cfg, 2, 2, 2, rng, Dtype::F64);
    FaxSubBlock pg = FaxSubBlock::self_attention(store, "g", cfg, 2, 2, 2, rng, Dtype::F64);
    Tensor x = randn_like({2, 4, 4, 4}, rng);
    auto leaves = sa_leaves(pl);
    auto lg = sa_leaves(pg);
    leaves.insert(leaves.end(), lg.begin(), lg.end());
    leaves.push_back(x);
    return simple_check("fax_sa_block", leaves, [=] {
      return probe_loss(fax_sa_block(x, pl, pg, spec), 27);
    }, 12);
  });
  add_check("fax_ca_block", [] {
    Rng rng(40);
    ParamStore store;
    AttentionConfig cfg{4, 2};
    PartitionSpec spec_bev(1, 4, 4, 4, 2, 2);
    PartitionSpec spec_feat(2, 4, 4, 4, 2, 2);
    int64_t tq = 4, tk = 2 * 4;
    FaxSubBlock pl = FaxSubBlock::cross_attention(store, "l", cfg, tq, tk, rng, Dtype::F64);
    FaxSubBlock pg = FaxSubBlock::cross_attention(store, "g", cfg, tq, tk, rng, Dtype::F64);
    Tensor bev = randn_like({1, 4, 4, 4}, rng);
    Tensor cam = randn_like({2, 4, 4, 4}, rng);
    Tensor pe = randn_like({2, 4, 4, 4}, rng);
    std::vector<Tensor> leaves{bev, cam, pe, pl.q_w, pl.k_w, pl.v_w, pl.ca_bias,
                               pl.out_w, pl.mlp_w1, pg.q_w, pg.k_w, pg.v_w, pg.mlp_w2};
    return simple_check("fax_ca_block", leaves, [=] {
      return probe_loss(fax_ca_block(bev, cam, pe, pl, pg, spec_bev, spec_feat), 28);
    }, 12);
  });
  add_check("cobevt_end_to_end", [] {
    CobevtConfig cfg = CobevtConfig::micro();
    CobevtModel model(cfg, 99, Dtype::F64);
    Rng rng(41);
    std::vector<AgentInputs> agents;
    for (int i = 0; i < 2; ++i) {
      AgentInputs a;
      a.images = Tensor::uniform({2, 16, 16, 3}, 0.0, 1.0, rng, Dtype::F64, false);
      double fov = 110.0 * M_PI / 180.0;
      a.rigs = {make_yaw_rig(0.0, 16, 16, fov, fov), make_yaw_rig(M_PI, 16, 16, fov, fov)};
      a.pose = i == 0 ? Pose2D(0, 0, 0) : Pose2D(3.0, 2.0, 0.5);
      agents.push_back(std::move(a));
    }
    std::vector<int> target;
    Rng trng(42);
    for (int i = 0; i < 16 * 16; ++i) target.push_back(static_cast<int>(trng.uniform_int(0, 1)));
    std::vector<Tensor> leaves;
    for (Parameter& p : model.store().items()) {
      if (p.tensor.requires_grad()) leaves.push_back(p.tensor);
    }
    GradCheckOptions opts;
    opts.max_coords_per_leaf = 2;
    return check_gradient("cobevt_end_to_end", leaves, [&model, agents, target]() mutable {
      Tensor logits = model.forward(agents, true);
      return weighted_cross_entropy(logits, target, {1.0, 2.0});
    }, opts);
  });

  return checks;
}

std::vector<GradCheckResult> run_gradchecks(const std::string& filter,
                                            std::ostream* log) {
  std::vector<GradCheckResult> results;
  bool matched = false;
  for (const NamedCheck& check : standard_gradchecks()) {
    if (!filter.empty() && check.name.find(filter) == std::string::npos) continue;
    matched = true;
    GradCheckResult r = check.run();
    if (log) {
      (*log) << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << "  max_rel_err="
             << r.max_rel_err << "  coords=" << r.coords << "\n";
    }
    results.push_back(std::move(r));
  }
  if (!matched) {
    throw UsageError("gradcheck: no registered check matches filter '" + filter + "'");
  }
  return results;
}

}  // namespace faxbev
