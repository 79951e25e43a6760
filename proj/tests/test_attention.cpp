#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "faxbev/attention.hpp"
#include "naive_oracles.hpp"
#include "test_util.hpp"

using namespace faxbev;
using namespace faxbev::testutil;

namespace {

Tensor rand_t(Shape shape, uint64_t seed, double lo = -1, double hi = 1,
              Dtype dt = Dtype::F64, bool rg = false) {
  Rng rng(seed);
  return Tensor::uniform(std::move(shape), lo, hi, rng, dt, rg);
}

void zero_out(Tensor t) { std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0); }

FaxSubBlock make_sa(ParamStore& store, const std::string& prefix, int64_t c, int heads,
                    int64_t n, int64_t th, int64_t tw, uint64_t seed, Dtype dt,
                    bool random_bias = true) {
  Rng rng(seed);
  FaxSubBlock p = FaxSubBlock::self_attention(store, prefix, {c, heads}, n, th, tw, rng, dt);
  if (random_bias) {
    Rng brng(seed + 1);
    auto& tv = p.rel_bias.table().mutable_values();
    for (double& v : tv) v = brng.uniform(-0.5, 0.5);
  }
  return p;
}

}  // namespace

TEST_CASE("relative_attention near-hard self match") {
  // orthogonal distinct rows scaled large: each query locks onto itself
  AttentionConfig cfg{4, 1};
  std::vector<double> rows = {30, 0, 0, 0, 0, 30, 0, 0, 0, 0, 30, 0};
  Tensor q = Tensor::from_data({1, 3, 4}, rows);
  Tensor v = Tensor::from_data({1, 3, 4},
                               {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  Tensor ow = Tensor::from_data({4, 4}, eye);
  Tensor ob = Tensor::zeros({4}, Dtype::F64);
  Tensor y = relative_attention(q, q, v, {}, ow, ob, cfg);
  CHECK(max_abs_diff(y, v) < 1e-5);
}

TEST_CASE("relative_attention identical keys ignore the query") {
  AttentionConfig cfg{4, 2};
  Tensor q = rand_t({1, 3, 4}, 11);
  Tensor k = Tensor::full({1, 5, 4}, 0.37, Dtype::F64);
  Tensor v = rand_t({1, 5, 4}, 12);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  Tensor ow = Tensor::from_data({4, 4}, eye);
  Tensor ob = Tensor::zeros({4}, Dtype::F64);
  Tensor y = relative_attention(q, k, v, {}, ow, ob, cfg);
  // mean of values, independent of q
  for (int t = 0; t < 3; ++t) {
    for (int c = 0; c < 4; ++c) {
      double mean = 0;
      for (int j = 0; j < 5; ++j) mean += v.values()[j * 4 + c];
      mean /= 5;
      CHECK(std::abs(y.values()[t * 4 + c] - mean) < 1e-10);
    }
  }
}

TEST_CASE("relative_attention random case vs naive pair loop") {
  AttentionConfig cfg{4, 2};
  Tensor q = rand_t({1, 6, 4}, 21), k = rand_t({1, 6, 4}, 22), v = rand_t({1, 6, 4}, 23);
  Tensor bias = rand_t({2, 6, 6}, 24);
  Tensor ow = rand_t({4, 4}, 25);
  Tensor ob = rand_t({4}, 26);
  PairCounter counter;
  Tensor got = relative_attention(q, k, v, bias, ow, ob, cfg, &counter);
  CHECK(counter.pairs == 1 * 2 * 6 * 6);

  int64_t dk = 2;
  std::vector<double> merged(6 * 4, 0.0);
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 6; ++i) {
      std::vector<double> s(6);
      double mx = -1e300;
      for (int j = 0; j < 6; ++j) {
        double acc = 0;
        for (int d = 0; d < dk; ++d) {
          acc += q.values()[i * 4 + h * dk + d] * k.values()[j * 4 + h * dk + d];
        }
        acc = acc / std::sqrt(2.0) + bias.values()[(h * 6 + i) * 6 + j];
        s[j] = acc;
        mx = std::max(mx, acc);
      }
      double z = 0;
      for (double& e : s) {
        e = std::exp(e - mx);
        z += e;
      }
      for (int j = 0; j < 6; ++j) {
        for (int d = 0; d < dk; ++d) {
          merged[i * 4 + h * dk + d] += s[j] / z * v.values()[j * 4 + h * dk + d];
        }
      }
    }
  }
  for (int i = 0; i < 6; ++i) {
    for (int c = 0; c < 4; ++c) {
      double want = ob.values()[c];
      for (int d = 0; d < 4; ++d) want += merged[i * 4 + d] * ow.values()[d * 4 + c];
      CHECK(std::abs(got.values()[i * 4 + c] - want) < 1e-5);
    }
  }

  CHECK_THROWS_AS(relative_attention(q, k, v, bias, ow, ob, AttentionConfig{4, 3}),
                  ConfigError);
}

TEST_CASE("fax_local_sa zero projections reduce to identity") {
  ParamStore store;
  FaxSubBlock p = make_sa(store, "p", 4, 2, 2, 2, 2, 31, Dtype::F64, false);
  zero_out(p.qkv_w);
  zero_out(p.out_w);
  zero_out(p.mlp_w1);
  zero_out(p.mlp_w2);
  PartitionSpec spec(2, 4, 4, 4, 2, 2);
  Tensor x = rand_t({2, 4, 4, 4}, 32);
  Tensor y = fax_local_sa(x, p, spec);
  CHECK(max_abs_diff(y, x) < 1e-12);
}

TEST_CASE("fax_local_sa with N=1 equals a 2D windowed path") {
  // with a single agent the 3D window is exactly a 2D window; compare
  // against the naive branch restricted to N=1
  ParamStore store;
  FaxSubBlock p = make_sa(store, "p", 4, 2, 1, 2, 2, 41, Dtype::F64);
  PartitionSpec spec(1, 4, 4, 4, 2, 2);
  Tensor x = rand_t({1, 4, 4, 4}, 42);
  Tensor got = fax_local_sa(x, p, spec);
  naive::Buf want = naive::fax_sa_branch(x.values(), p, spec, false);
  CHECK(max_abs_diff(got.values(), want) < 1e-10);
}

TEST_CASE("fax_local_sa and fax_global_sa match the naive oracle") {
  for (uint64_t seed : {51, 52, 53, 54, 55}) {
    ParamStore store;
    FaxSubBlock p = make_sa(store, "p", 4, 2, 2, 2, 2, seed, Dtype::F64);
    PartitionSpec spec(2, 4, 4, 4, 2, 2);
    Tensor x = rand_t({2, 4, 4, 4}, seed + 100);
    CHECK(max_abs_diff(fax_local_sa(x, p, spec).values(),
                       naive::fax_sa_branch(x.values(), p, spec, false)) < 1e-10);
    CHECK(max_abs_diff(fax_global_sa(x, p, spec).values(),
                       naive::fax_sa_branch(x.values(), p, spec, true)) < 1e-10);
  }
}

TEST_CASE("fax_sa_block composition and pair counting") {
  ParamStore store;
  FaxSubBlock pl = make_sa(store, "l", 4, 2, 2, 2, 2, 61, Dtype::F64);
  FaxSubBlock pg = make_sa(store, "g", 4, 2, 2, 2, 2, 62, Dtype::F64);
  PartitionSpec spec(2, 4, 4, 4, 2, 2);
  Tensor x = rand_t({2, 4, 4, 4}, 63);

  Tensor composed = fax_global_sa(fax_local_sa(x, pl, spec), pg, spec);
  Tensor block = fax_sa_block(x, pl, pg, spec);
  CHECK(max_abs_diff(composed, block) == 0.0);

  // zero weights on both sub-blocks -> identity
  for (Tensor t : {pl.qkv_w, pl.out_w, pl.mlp_w1, pl.mlp_w2, pg.qkv_w, pg.out_w,
                   pg.mlp_w1, pg.mlp_w2}) {
    zero_out(t);
  }
  zero_out(pl.rel_bias.table());
  zero_out(pg.rel_bias.table());
  CHECK(max_abs_diff(fax_sa_block(x, pl, pg, spec), x) < 1e-12);

  // score-pair count = HW*N^2*P^2*heads + HW*N^2*G^2*heads
  PairCounter counter;
  (void)fax_sa_block(x, pl, pg, spec, &counter);
  int64_t hw = 16, n2 = 4, heads = 2;
  CHECK(counter.pairs == hw * n2 * 4 * heads + hw * n2 * 4 * heads);
}

TEST_CASE("fax blocks on tiny random configs match the naive oracle end to end") {
  // N=2, H=W=4, C=4, P=2, G=2 over several seeds
  for (uint64_t seed : {71, 72, 73}) {
    ParamStore store;
    FaxSubBlock pl = make_sa(store, "l", 4, 2, 2, 2, 2, seed, Dtype::F64);
    FaxSubBlock pg = make_sa(store, "g", 4, 2, 2, 2, 2, seed + 10, Dtype::F64);
    PartitionSpec spec(2, 4, 4, 4, 2, 2);
    Tensor x = rand_t({2, 4, 4, 4}, seed + 20);
    naive::Buf want = naive::fax_sa_block(x.values(), pl, pg, spec);
    CHECK(max_abs_diff(fax_sa_block(x, pl, pg, spec).values(), want) < 1e-10);
  }
}

TEST_CASE("agent permutation equivariance with symmetrized bias") {
  ParamStore store;
  FaxSubBlock pl = make_sa(store, "l", 4, 2, 3, 2, 2, 81, Dtype::F64, false);
  FaxSubBlock pg = make_sa(store, "g", 4, 2, 3, 2, 2, 82, Dtype::F64, false);
  PartitionSpec spec(3, 4, 4, 4, 2, 2);
  Tensor x = rand_t({3, 4, 4, 4}, 83);
  Tensor y = fax_sa_block(x, pl, pg, spec);

  // permute agents 0<-2, 1<-0, 2<-1
  std::vector<int64_t> perm = {2, 0, 1};
  std::vector<double> xp(x.values().size());
  int64_t per = 4 * 4 * 4;
  for (int64_t a = 0; a < 3; ++a) {
    for (int64_t i = 0; i < per; ++i) {
      xp[static_cast<size_t>(a * per + i)] = x.values()[static_cast<size_t>(perm[a] * per + i)];
    }
  }
  Tensor yp = fax_sa_block(Tensor::from_data({3, 4, 4, 4}, xp, Dtype::F64), pl, pg, spec);
  for (int64_t a = 0; a < 3; ++a) {
    for (int64_t i = 0; i < per; ++i) {
      CHECK(std::abs(yp.values()[static_cast<size_t>(a * per + i)] -
                     y.values()[static_cast<size_t>(perm[a] * per + i)]) < 1e-9);
    }
  }
}

TEST_CASE("validity masking excludes invalid agents from attention") {
  ParamStore store;
  FaxSubBlock pl = make_sa(store, "l", 4, 2, 2, 2, 2, 91, Dtype::F64);
  PartitionSpec spec(2, 4, 4, 4, 2, 2);
  Tensor x = rand_t({2, 4, 4, 4}, 92);
  std::vector<char> validity = {1, 0};
  Tensor got = fax_local_sa(x, pl, spec, nullptr, &validity);
  naive::Buf want = naive::fax_sa_branch(x.values(), pl, spec, false, &validity);
  CHECK(max_abs_diff(got.values(), want) < 1e-10);
}

TEST_CASE("fax_ca_block zero value branch is the identity on the query") {
  ParamStore store;
  Rng rng(101);
  AttentionConfig cfg{4, 2};
  PartitionSpec sb(1, 8, 8, 4, 4, 4);
  PartitionSpec sf(2, 4, 4, 4, 2, 2);
  int64_t tq = 16, tk = 2 * 4;
  FaxSubBlock pl = FaxSubBlock::cross_attention(store, "l", cfg, tq, tk, rng, Dtype::F64);
  FaxSubBlock pg = FaxSubBlock::cross_attention(store, "g", cfg, tq, tk, rng, Dtype::F64);
  for (Tensor t : {pl.v_w, pl.mlp_w2, pg.v_w, pg.mlp_w2}) zero_out(t);
  Tensor bev = rand_t({1, 8, 8, 4}, 102);
  Tensor cam = rand_t({2, 4, 4, 4}, 103);
  Tensor pe = rand_t({2, 4, 4, 4}, 104);
  Tensor y = fax_ca_block(bev, cam, pe, pl, pg, sb, sf);
  CHECK(max_abs_diff(y, bev) < 1e-12);
}

TEST_CASE("fax_ca_block constant features give window-constant local output") {
  ParamStore store;
  Rng rng(111);
  AttentionConfig cfg{4, 1};
  PartitionSpec sb(1, 4, 4, 4, 2, 2);
  PartitionSpec sf(1, 4, 4, 4, 2, 2);
  FaxSubBlock pl = FaxSubBlock::cross_attention(store, "l", cfg, 4, 4, rng, Dtype::F64);
  Tensor bev = rand_t({1, 4, 4, 4}, 112);
  Tensor cam = Tensor::full({1, 4, 4, 4}, 0.43, Dtype::F64);
  // local branch alone: attention reads identical values everywhere, so the
  // attention contribution is the same for every query token in a window
  Tensor q_in = layer_norm(bev, pl.norm1_g, pl.norm1_b);
  Tensor feats = layer_norm(cam, pl.norm_kv_g, pl.norm_kv_b);
  Tensor q = linear(fused_block(q_in, sb), pl.q_w);
  Tensor k = linear(fused_block(feats, sf), pl.k_w);
  Tensor v = linear(fused_block(feats, sf), pl.v_w);
  Tensor attn = relative_attention(q, k, v, pl.ca_bias, pl.out_w, pl.out_b, cfg);
  for (int64_t w = 0; w < 4; ++w) {
    for (int64_t t = 1; t < 4; ++t) {
      for (int64_t c = 0; c < 4; ++c) {
        CHECK(std::abs(attn.at({w, t, c}) - attn.at({w, 0, c})) < 1e-9);
      }
    }
  }
}

TEST_CASE("fax_ca_block tiny config matches the naive cross-attention oracle") {
  // Hb=Wb=8, Pb=4; hf=wf=4, Pf=2; M=2, C=4
  for (uint64_t seed : {121, 122, 123}) {
    ParamStore store;
    Rng rng(seed);
    AttentionConfig cfg{4, 2};
    PartitionSpec sb(1, 8, 8, 4, 4, 4);
    PartitionSpec sf(2, 4, 4, 4, 2, 2);
    int64_t tq = 16, tk = 8;
    FaxSubBlock pl = FaxSubBlock::cross_attention(store, "l", cfg, tq, tk, rng, Dtype::F64);
    FaxSubBlock pg = FaxSubBlock::cross_attention(store, "g", cfg, tq, tk, rng, Dtype::F64);
    Rng brng(seed + 5);
    for (Tensor t : {pl.ca_bias, pg.ca_bias}) {
      for (double& v : t.mutable_values()) v = brng.uniform(-0.5, 0.5);
    }
    Tensor bev = rand_t({1, 8, 8, 4}, seed + 1);
    Tensor cam = rand_t({2, 4, 4, 4}, seed + 2);
    Tensor pe = rand_t({2, 4, 4, 4}, seed + 3);
    Tensor got = fax_ca_block(bev, cam, pe, pl, pg, sb, sf);
    naive::Buf want = naive::fax_ca_block(bev.values(), cam.values(), pe.values(), pl,
                                          pg, sb, sf);
    CHECK(max_abs_diff(got.values(), want) < 1e-10);
  }
}

TEST_CASE("fax_ca_block window count mismatch is a configuration error") {
  ParamStore store;
  Rng rng(131);
  AttentionConfig cfg{4, 2};
  PartitionSpec sb(1, 8, 8, 4, 2, 2);  // 16 windows
  PartitionSpec sf(2, 4, 4, 4, 2, 2);  // 4 windows
  FaxSubBlock pl = FaxSubBlock::cross_attention(store, "l", cfg, 4, 8, rng, Dtype::F64);
  FaxSubBlock pg = FaxSubBlock::cross_attention(store, "g", cfg, 4, 8, rng, Dtype::F64);
  Tensor bev = rand_t({1, 8, 8, 4}, 132);
  Tensor cam = rand_t({2, 4, 4, 4}, 133);
  CHECK_THROWS_WITH_AS(fax_ca_block(bev, cam, {}, pl, pg, sb, sf),
                       doctest::Contains("counts differ"), ConfigError);
}

TEST_CASE("gradient check through a full FAX-SA block") {
  ParamStore store;
  FaxSubBlock pl = make_sa(store, "l", 4, 2, 2, 2, 2, 141, Dtype::F64);
  FaxSubBlock pg = make_sa(store, "g", 4, 2, 2, 2, 2, 142, Dtype::F64);
  PartitionSpec spec(2, 4, 4, 4, 2, 2);
  Tensor x = rand_t({2, 4, 4, 4}, 143, -1, 1, Dtype::F64, true);

  Tensor probe = rand_t({2, 4, 4, 4}, 144);
  auto loss_fn = [&] { return sum(mul(fax_sa_block(x, pl, pg, spec), probe)); };
  Tensor loss = loss_fn();
  backward(loss);
  REQUIRE(x.grad() != nullptr);
  const double h = 1e-4;
  Rng pick(145);
  for (int probe_i = 0; probe_i < 20; ++probe_i) {
    int64_t i = pick.uniform_int(0, x.numel() - 1);
    auto& vals = x.mutable_values();
    double orig = vals[static_cast<size_t>(i)];
    vals[static_cast<size_t>(i)] = orig + h;
    double fp = loss_fn().values()[0];
    vals[static_cast<size_t>(i)] = orig - h;
    double fm = loss_fn().values()[0];
    vals[static_cast<size_t>(i)] = orig;
    double fd = (fp - fm) / (2 * h);
    double an = (*x.grad())[static_cast<size_t>(i)];
    CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}) < 1e-3);
  }
}
