#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "faxbev/ops.hpp"
#include "faxbev/tensor.hpp"
#include "test_util.hpp"

using namespace faxbev;
using namespace faxbev::testutil;

namespace {

Tensor rand_t(Shape shape, uint64_t seed, double lo = -1, double hi = 1,
              Dtype dt = Dtype::F64, bool rg = false) {
  Rng rng(seed);
  return Tensor::uniform(std::move(shape), lo, hi, rng, dt, rg);
}

}  // namespace

TEST_CASE("matmul identity and selector") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor y = matmul(eye, b);
  CHECK(max_abs_diff(y, b) == 0.0);

  Tensor sel = Tensor::from_data({1, 2}, {1, 0});
  Tensor col = Tensor::from_data({2, 1}, {5, 7});
  Tensor s = matmul(sel, col);
  CHECK(s.values()[0] == 5.0);
}

TEST_CASE("matmul random vs triple-loop oracle (f64)") {
  Tensor a = rand_t({3, 4}, 17);
  Tensor b = rand_t({4, 2}, 18);
  Tensor y = matmul(a, b);
  // independent triple loop
  std::vector<double> want(3 * 2, 0.0);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      for (int j = 0; j < 2; ++j) {
        want[i * 2 + j] += a.values()[i * 4 + k] * b.values()[k * 2 + j];
      }
    }
  }
  CHECK(max_abs_diff(y.values(), want) < 1e-12);
}

TEST_CASE("matmul batched broadcast shapes and errors") {
  Tensor a = rand_t({2, 3, 3, 4}, 21);
  Tensor b = rand_t({3, 4, 5}, 22);
  Tensor y = matmul(a, b);
  CHECK(y.shape() == Shape{2, 3, 3, 5});
  // each batch must equal the 2-D product of its slices
  for (int b0 = 0; b0 < 2; ++b0) {
    for (int b1 = 0; b1 < 3; ++b1) {
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 5; ++j) {
          double want = 0;
          for (int k = 0; k < 4; ++k) {
            want += a.values()[((b0 * 3 + b1) * 3 + i) * 4 + k] *
                    b.values()[(b1 * 4 + k) * 5 + j];
          }
          CHECK(std::abs(y.values()[((b0 * 3 + b1) * 3 + i) * 5 + j] - want) < 1e-12);
        }
      }
    }
  }
  CHECK_THROWS_AS(matmul(rand_t({2, 3}, 1), rand_t({4, 2}, 2)), ShapeError);
}

TEST_CASE("softmax examples") {
  Tensor u = softmax_lastaxis(Tensor::from_data({3}, {0, 0, 0}));
  for (double v : u.values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-12);

  Tensor hot = softmax_lastaxis(Tensor::from_data({2}, {1000, 0}));
  CHECK(std::abs(hot.values()[0] - 1.0) < 1e-6);
  CHECK(std::abs(hot.values()[1]) < 1e-6);

  Tensor x = rand_t({5}, 23, -3, 3);
  Tensor y = softmax_lastaxis(x);
  double z = 0;
  for (double v : x.values()) z += std::exp(v);
  for (int i = 0; i < 5; ++i) {
    CHECK(std::abs(y.values()[i] - std::exp(x.values()[i]) / z) < 1e-12);
  }
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::uniform({4, 7}, -5, 5, rng, Dtype::F64);
    Tensor y = softmax_lastaxis(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += y.values()[r * 7 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    Tensor shifted = softmax_lastaxis(add(x, Tensor::full({1}, 3.7, Dtype::F64)));
    CHECK(max_abs_diff(y, shifted) < 1e-6);
  }
}

TEST_CASE("layer_norm examples") {
  Tensor g1 = Tensor::full({4}, 1.0, Dtype::F64);
  Tensor b0 = Tensor::zeros({4}, Dtype::F64);
  Tensor constant = Tensor::full({2, 4}, 3.25, Dtype::F64);
  Tensor y = layer_norm(constant, g1, b0);
  for (double v : y.values()) CHECK(std::abs(v) < 1e-12);

  Tensor two = Tensor::from_data({2}, {1, 3});
  Tensor y2 = layer_norm(two, Tensor::full({2}, 1.0, Dtype::F64),
                         Tensor::zeros({2}, Dtype::F64), 0.0);
  CHECK(std::abs(y2.values()[0] + 1.0) < 1e-12);
  CHECK(std::abs(y2.values()[1] - 1.0) < 1e-12);

  Tensor x = rand_t({3, 8}, 41, -2, 2);
  Tensor g = rand_t({8}, 42);
  Tensor b = rand_t({8}, 43);
  Tensor got = layer_norm(x, g, b, 1e-5);
  for (int r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < 8; ++j) mu += x.values()[r * 8 + j];
    mu /= 8;
    for (int j = 0; j < 8; ++j) {
      double d = x.values()[r * 8 + j] - mu;
      var += d * d;
    }
    var /= 8;
    for (int j = 0; j < 8; ++j) {
      double want = (x.values()[r * 8 + j] - mu) / std::sqrt(var + 1e-5) * g.values()[j] +
                    b.values()[j];
      CHECK(std::abs(got.values()[r * 8 + j] - want) < 1e-10);
    }
  }
  CHECK_THROWS_AS(layer_norm(x, rand_t({7}, 2), b), ShapeError);
}

TEST_CASE("mlp_block zero weights, GELU fixed point, composed oracle") {
  Tensor x = rand_t({3, 4}, 51);
  Tensor w1z = Tensor::zeros({4, 8}, Dtype::F64, true);
  Tensor w2z = Tensor::zeros({8, 4}, Dtype::F64, true);
  Tensor zero = mlp_block(x, w1z, w2z);
  for (double v : zero.values()) CHECK(v == 0.0);

  CHECK(gelu(Tensor::zeros({1}, Dtype::F64)).values()[0] == 0.0);

  Tensor w1 = rand_t({4, 8}, 52);
  Tensor w2 = rand_t({8, 4}, 53);
  Tensor got = mlp_block(x, w1, w2);
  // independent loop composition
  auto gelu_ref = [](double v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  };
  for (int r = 0; r < 3; ++r) {
    std::vector<double> h(8, 0.0);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 8; ++j) h[j] += x.values()[r * 4 + i] * w1.values()[i * 8 + j];
    }
    for (double& v : h) v = gelu_ref(v);
    for (int j = 0; j < 4; ++j) {
      double want = 0;
      for (int i = 0; i < 8; ++i) want += h[i] * w2.values()[i * 4 + j];
      CHECK(std::abs(got.values()[r * 4 + j] - want) < 1e-6);
    }
  }
}

TEST_CASE("conv2d identity, box sum, nested-loop oracle") {
  // 1x1 identity channel mix
  Tensor x = rand_t({4, 4, 3}, 61);
  std::vector<double> eye(3 * 3, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tensor wid = Tensor::from_data({1, 1, 3, 3}, eye);
  Tensor y = conv2d(x, wid, {}, 1, 0);
  CHECK(max_abs_diff(y, x) == 0.0);

  // 3x3 ones on a one-hot image
  std::vector<double> hot(9, 0.0);
  hot[4] = 1.0;  // center
  Tensor img = Tensor::from_data({3, 3, 1}, hot);
  Tensor ones = Tensor::full({3, 3, 1, 1}, 1.0, Dtype::F64);
  Tensor box = conv2d(img, ones, {}, 1, 1);
  for (double v : box.values()) CHECK(v == 1.0);

  // random vs direct loops
  Tensor xr = rand_t({5, 5, 2}, 62);
  Tensor w = rand_t({3, 3, 2, 3}, 63);
  Tensor bias = rand_t({3}, 64);
  Tensor got = conv2d(xr, w, bias, 1, 1);
  for (int oy = 0; oy < 5; ++oy) {
    for (int ox = 0; ox < 5; ++ox) {
      for (int co = 0; co < 3; ++co) {
        double want = bias.values()[co];
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            int iy = oy - 1 + ky, ix = ox - 1 + kx;
            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
            for (int ci = 0; ci < 2; ++ci) {
              want += xr.values()[(iy * 5 + ix) * 2 + ci] *
                      w.values()[((ky * 3 + kx) * 2 + ci) * 3 + co];
            }
          }
        }
        CHECK(std::abs(got.values()[(oy * 5 + ox) * 3 + co] - want) < 1e-6);
      }
    }
  }
  CHECK_THROWS_AS(conv2d(xr, rand_t({2, 2, 2, 3}, 1), {}, 1, 0), ConfigError);
}

TEST_CASE("bilinear_upsample2x constant, broadcast, hand weights") {
  Tensor c = Tensor::full({3, 5, 2}, 1.5, Dtype::F64);
  Tensor up = bilinear_upsample2x(c);
  CHECK(up.shape() == Shape{6, 10, 2});
  for (double v : up.values()) CHECK(std::abs(v - 1.5) < 1e-12);

  Tensor one = Tensor::from_data({1, 1, 1}, {4.25});
  Tensor up1 = bilinear_upsample2x(one);
  CHECK(up1.shape() == Shape{2, 2, 1});
  for (double v : up1.values()) CHECK(v == 4.25);

  // 2x2 ramp [[0,1],[2,3]]: source coords per output index are
  // {-0.25, 0.25, 0.75, 1.25} -> clamped {0, 0.25, 0.75, 1}
  Tensor ramp = Tensor::from_data({2, 2, 1}, {0, 1, 2, 3});
  Tensor got = bilinear_upsample2x(ramp);
  const double row_w[4] = {0.0, 0.25, 0.75, 1.0};
  for (int oy = 0; oy < 4; ++oy) {
    for (int ox = 0; ox < 4; ++ox) {
      double top = 0 * (1 - row_w[ox]) + 1 * row_w[ox];
      double bot = 2 * (1 - row_w[ox]) + 3 * row_w[ox];
      double want = top * (1 - row_w[oy]) + bot * row_w[oy];
      CHECK(std::abs(got.values()[oy * 4 + ox] - want) < 1e-12);
    }
  }
}

TEST_CASE("backward basics: sum and quadratic") {
  Tensor x = rand_t({7}, 71, -2, 2, Dtype::F64, true);
  backward(sum(x));
  REQUIRE(x.grad() != nullptr);
  for (double g : *x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  backward(sum(mul(x, x)));
  for (int i = 0; i < 7; ++i) {
    CHECK(std::abs((*x.grad())[i] - 2 * x.values()[i]) < 1e-12);
  }

  CHECK_THROWS_AS(backward(x), UsageError);  // non-scalar loss
}

TEST_CASE("repeated backward accumulates") {
  Tensor x = rand_t({4}, 72, -1, 1, Dtype::F64, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  std::vector<double> once = *x.grad();
  backward(loss);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs((*x.grad())[i] - 2 * once[i]) < 1e-12);
  }
}

TEST_CASE("weighted_cross_entropy examples and oracle") {
  // uniform logits, K=2, unit weights -> ln 2
  Tensor logits = Tensor::zeros({2, 2, 2}, Dtype::F64);
  std::vector<int> target = {0, 1, 1, 0};
  Tensor l = weighted_cross_entropy(logits, target, {1, 1});
  CHECK(std::abs(l.values()[0] - std::log(2.0)) < 1e-12);

  // saturated correct prediction -> ~0
  Tensor sat = Tensor::from_data({2, 2}, {1000, -1000, -1000, 1000});
  Tensor l2 = weighted_cross_entropy(sat, {0, 1}, {1, 1});
  CHECK(l2.values()[0] < 1e-9);

  // random case vs per-pixel scalar oracle
  Tensor lr = rand_t({2, 2, 3}, 81, -2, 2);
  std::vector<int> t = {2, 0, 1, 2};
  std::vector<double> w = {1.0, 0.5, 2.0};
  Tensor got = weighted_cross_entropy(lr, t, w);
  double want = 0;
  for (int r = 0; r < 4; ++r) {
    double mx = -1e300, z = 0;
    for (int j = 0; j < 3; ++j) mx = std::max(mx, lr.values()[r * 3 + j]);
    for (int j = 0; j < 3; ++j) z += std::exp(lr.values()[r * 3 + j] - mx);
    double logp = lr.values()[r * 3 + t[r]] - mx - std::log(z);
    want += -w[t[r]] * logp;
  }
  want /= 4;
  CHECK(std::abs(got.values()[0] - want) < 1e-10);

  CHECK_THROWS_AS(weighted_cross_entropy(lr, {9, 0, 1, 2}, w), UsageError);
}

TEST_CASE("focal_loss examples and oracle") {
  Tensor lr = rand_t({2, 2, 3}, 91, -2, 2);
  std::vector<int> t = {1, 0, 2, 1};
  // gamma = 0 reduces to unweighted cross-entropy
  Tensor f0 = focal_loss(lr, t, 0.0);
  Tensor ce = weighted_cross_entropy(lr, t, {1, 1, 1});
  CHECK(std::abs(f0.values()[0] - ce.values()[0]) < 1e-12);

  Tensor sat = Tensor::from_data({1, 2}, {1000, -1000});
  CHECK(focal_loss(sat, {0}, 2.0).values()[0] < 1e-9);

  Tensor got = focal_loss(lr, t, 2.0);
  double want = 0;
  for (int r = 0; r < 4; ++r) {
    double mx = -1e300, z = 0;
    for (int j = 0; j < 3; ++j) mx = std::max(mx, lr.values()[r * 3 + j]);
    for (int j = 0; j < 3; ++j) z += std::exp(lr.values()[r * 3 + j] - mx);
    double logp = lr.values()[r * 3 + t[r]] - mx - std::log(z);
    double p = std::exp(logp);
    want += -std::pow(1 - p, 2.0) * logp;
  }
  want /= 4;
  CHECK(std::abs(got.values()[0] - want) < 1e-10);
}

TEST_CASE("reshape and permute are bijections") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::uniform({3, 4, 5}, -1, 1, rng, Dtype::F64);
    Tensor r = reshape(reshape(x, {5, 12}), {3, 4, 5});
    CHECK(bit_equal(x, r));
    Tensor p = permute_axes(permute_axes(x, {2, 0, 1}), {1, 2, 0});
    CHECK(bit_equal(x, p));
  }
}

TEST_CASE("ops do not mutate inputs") {
  set_debug_checks(true);
  Tensor a = rand_t({4, 4}, 111);
  Tensor b = rand_t({4, 4}, 112);
  uint64_t ha = fnv1a(a.values()), hb = fnv1a(b.values());
  (void)matmul(a, b);
  (void)add(a, b);
  (void)mul(a, b);
  (void)softmax_lastaxis(a);
  (void)gelu(a);
  (void)permute_axes(a, {1, 0});
  CHECK(fnv1a(a.values()) == ha);
  CHECK(fnv1a(b.values()) == hb);
}

TEST_CASE("debug mode flags non-finite values") {
  set_debug_checks(true);
  Tensor big = Tensor::full({2}, 1e308, Dtype::F64);
  CHECK_THROWS_AS(mul(big, big), NumericError);
  set_debug_checks(false);
  Tensor ok = mul(big, big);  // overflow allowed with checks off
  CHECK(std::isinf(ok.values()[0]));
  set_debug_checks(true);
}

TEST_CASE("batch_norm training stats and running buffers") {
  Tensor x = rand_t({10, 3}, 121, -2, 2);
  Tensor g = Tensor::full({3}, 1.0, Dtype::F64);
  Tensor b = Tensor::zeros({3}, Dtype::F64);
  BatchNormState st;
  st.running_mean = Tensor::zeros({3}, Dtype::F64);
  st.running_var = Tensor::full({3}, 1.0, Dtype::F64);
  Tensor y = batch_norm(x, g, b, st, true);
  // per-channel mean 0, var 1 after normalization
  for (int j = 0; j < 3; ++j) {
    double mu = 0, var = 0;
    for (int r = 0; r < 10; ++r) mu += y.values()[r * 3 + j];
    mu /= 10;
    for (int r = 0; r < 10; ++r) {
      double d = y.values()[r * 3 + j] - mu;
      var += d * d;
    }
    var /= 10;
    CHECK(std::abs(mu) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  // running buffers moved toward the batch stats
  for (int j = 0; j < 3; ++j) {
    double mu = 0;
    for (int r = 0; r < 10; ++r) mu += x.values()[r * 3 + j];
    mu /= 10;
    CHECK(std::abs(st.running_mean.values()[j] - 0.1 * mu) < 1e-10);
  }
  // eval mode uses the running stats
  Tensor ye = batch_norm(x, g, b, st, false);
  for (int j = 0; j < 3; ++j) {
    double want = (x.values()[j] - st.running_mean.values()[j]) /
                  std::sqrt(st.running_var.values()[j] + 1e-5);
    CHECK(std::abs(ye.values()[j] - want) < 1e-10);
  }
}

TEST_CASE("concat slice stack roundtrip") {
  Tensor a = rand_t({2, 3}, 131);
  Tensor b = rand_t({2, 2}, 132);
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5});
  CHECK(bit_equal(slice(c, 1, 0, 3), a));
  CHECK(bit_equal(slice(c, 1, 3, 5), b));
  Tensor s = stack0({a, a});
  CHECK(s.shape() == Shape{2, 2, 3});
}

TEST_CASE("f32 dtype stays f32-representable") {
  Rng rng(141);
  Tensor a = Tensor::uniform({16}, -1, 1, rng, Dtype::F32);
  Tensor b = Tensor::uniform({16}, -1, 1, rng, Dtype::F32);
  Tensor y = mul(a, b);
  CHECK(y.dtype() == Dtype::F32);
  for (double v : y.values()) {
    CHECK(static_cast<double>(static_cast<float>(v)) == v);
  }
}
