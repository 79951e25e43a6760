#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "faxbev/partition.hpp"
#include "test_util.hpp"

using namespace faxbev;
using namespace faxbev::testutil;

namespace {

Tensor arange(Shape shape) {
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  return Tensor::from_data(std::move(shape), std::move(v), Dtype::F64);
}

// enumeration oracle: expected source (n,y,x,c) for (window, token, channel)
int64_t block_source_flat(const PartitionSpec& s, int64_t win, int64_t tok, int64_t ch) {
  int64_t wx = s.w / s.pw;
  int64_t i = win / wx, j = win % wx;
  int64_t n = tok / (s.ph * s.pw);
  int64_t p = (tok / s.pw) % s.ph;
  int64_t q = tok % s.pw;
  return ((n * s.h + (i * s.ph + p)) * s.w + (j * s.pw + q)) * s.c + ch;
}

int64_t grid_source_flat(const PartitionSpec& s, int64_t grp, int64_t tok, int64_t ch) {
  int64_t ux = s.w / s.gw;
  int64_t u = grp / ux, v = grp % ux;
  int64_t n = tok / (s.gh * s.gw);
  int64_t a = (tok / s.gw) % s.gh;
  int64_t b = tok % s.gw;
  return ((n * s.h + (a * (s.h / s.gh) + u)) * s.w + (b * (s.w / s.gw) + v)) * s.c + ch;
}

}  // namespace

TEST_CASE("fused_block shapes from the partition arithmetic") {
  PartitionSpec spec(2, 8, 8, 4, 4, 4);
  Tensor x = arange({2, 8, 8, 4});
  Tensor y = fused_block(x, spec);
  CHECK(y.shape() == Shape{4, 32, 4});

  // one window = pure flatten
  PartitionSpec whole(3, 4, 4, 2, 4, 4);
  Tensor x2 = arange({3, 4, 4, 2});
  Tensor y2 = fused_block(x2, whole);
  CHECK(y2.shape() == Shape{1, 48, 2});
  CHECK(y2.values() == x2.values());
}

TEST_CASE("fused_block index mapping matches the enumeration oracle") {
  PartitionSpec spec(1, 4, 4, 1, 2, 2);
  Tensor x = arange({1, 4, 4, 1});
  Tensor y = fused_block(x, spec);
  // element (window 0, token 3) = x[0,1,1,0]
  CHECK(y.at({0, 3, 0}) == x.at({0, 1, 1, 0}));
  for (int64_t w = 0; w < spec.num_windows(); ++w) {
    for (int64_t t = 0; t < spec.window_tokens(); ++t) {
      CHECK(y.at({w, t, 0}) == x.values()[static_cast<size_t>(block_source_flat(spec, w, t, 0))]);
    }
  }
}

TEST_CASE("fused_grid degenerate shapes") {
  // G=1: each group is the N agents at one pixel
  PartitionSpec g1(3, 4, 4, 2, 4, 1);
  Tensor x = arange({3, 4, 4, 2});
  Tensor y = fused_grid(x, g1);
  CHECK(y.shape() == Shape{16, 3, 2});

  // N=1, G=H=W equals fused_block with P=H
  PartitionSpec full(1, 4, 4, 2, 4, 4);
  Tensor x1 = arange({1, 4, 4, 2});
  CHECK(fused_grid(x1, full).values() == fused_block(x1, full).values());
}

TEST_CASE("fused_grid strided membership") {
  PartitionSpec spec(1, 4, 4, 1, 2, 2);
  Tensor x = arange({1, 4, 4, 1});
  Tensor y = fused_grid(x, spec);
  // group 0 tokens sample pixels (0,0), (0,2), (2,0), (2,2)
  CHECK(y.at({0, 0, 0}) == x.at({0, 0, 0, 0}));
  CHECK(y.at({0, 1, 0}) == x.at({0, 0, 2, 0}));
  CHECK(y.at({0, 2, 0}) == x.at({0, 2, 0, 0}));
  CHECK(y.at({0, 3, 0}) == x.at({0, 2, 2, 0}));
  for (int64_t g = 0; g < spec.num_grid_groups(); ++g) {
    for (int64_t t = 0; t < spec.grid_tokens(); ++t) {
      CHECK(y.at({g, t, 0}) == x.values()[static_cast<size_t>(grid_source_flat(spec, g, t, 0))]);
    }
  }
}

TEST_CASE("round trips are bit-exact over random specs") {
  Rng rng(2024);
  const int64_t divisors[] = {1, 2, 4};
  for (int trial = 0; trial < 50; ++trial) {
    int64_t n = rng.uniform_int(1, 3);
    int64_t h = 4 * rng.uniform_int(1, 3);
    int64_t w = 4 * rng.uniform_int(1, 3);
    int64_t c = rng.uniform_int(1, 5);
    int64_t p = divisors[rng.uniform_int(0, 2)];
    int64_t g = divisors[rng.uniform_int(0, 2)];
    PartitionSpec spec(n, h, w, c, p, g);
    Tensor x = Tensor::uniform({n, h, w, c}, -5, 5, rng, Dtype::F64);
    CHECK(bit_equal(fused_unblock(fused_block(x, spec), spec), x));
    CHECK(bit_equal(fused_ungrid(fused_grid(x, spec), spec), x));
  }
}

TEST_CASE("one-hot placement through the inverse") {
  PartitionSpec spec(2, 4, 4, 3, 2, 2);
  for (int64_t probe : {0L, 17L, 43L, 95L}) {
    std::vector<double> v(static_cast<size_t>(2 * 4 * 4 * 3), 0.0);
    v[static_cast<size_t>(probe)] = 1.0;
    Tensor hot = Tensor::from_data({spec.num_windows(), spec.window_tokens(), spec.c},
                                   std::move(v), Dtype::F64);
    Tensor back = fused_unblock(hot, spec);
    int64_t w = probe / (spec.window_tokens() * spec.c);
    int64_t t = (probe / spec.c) % spec.window_tokens();
    int64_t ch = probe % spec.c;
    int64_t src = block_source_flat(spec, w, t, ch);
    for (int64_t i = 0; i < back.numel(); ++i) {
      CHECK(back.values()[static_cast<size_t>(i)] == (i == src ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("token conservation and disjoint cover") {
  PartitionSpec spec(2, 6, 4, 2, 2, 2);
  Tensor x = arange({2, 6, 4, 2});
  for (Tensor y : {fused_block(x, spec), fused_grid(x, spec)}) {
    CHECK(y.numel() == 2 * 6 * 4 * 2);
    std::multiset<double> got(y.values().begin(), y.values().end());
    std::multiset<double> want(x.values().begin(), x.values().end());
    CHECK(got == want);  // every source index exactly once
  }
}

TEST_CASE("divisibility failures name the offending sizes") {
  CHECK_THROWS_WITH_AS(PartitionSpec(1, 6, 6, 1, 4, 2),
                       doctest::Contains("does not divide"), ConfigError);
  CHECK_THROWS_AS(PartitionSpec(1, 8, 8, 1, 3, 2), ConfigError);
  Tensor x = arange({1, 8, 8, 1});
  PartitionSpec ok(1, 8, 8, 1, 2, 2);
  CHECK_THROWS_AS(fused_block(arange({1, 8, 4, 1}), ok), ShapeError);
  CHECK_THROWS_AS(fused_unblock(arange({2, 2, 2}), ok), ShapeError);
}
