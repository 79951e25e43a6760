#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "faxbev/attention.hpp"
#include "faxbev/tensor.hpp"

namespace faxbev {

// Dense 3D attention over all N*H*W tokens, streamed per query row so the
// T x T score matrix never materializes. Counts exactly (NHW)^2 * heads
// pairs. Plain buffers, no autodiff; the complexity baseline.
Tensor dense_attention_reference(const Tensor& x, int heads, PairCounter* counter);

struct BenchRow {
  int64_t h = 0, w = 0, n = 0;
  std::string variant;  // "fax" | "dense"
  int64_t pair_count = 0;
  double wall_ms = 0.0;
};

struct BenchConfig {
  std::vector<int64_t> sizes = {16, 32, 64};  // H = W
  int64_t agents = 2;
  int64_t window = 8;  // P = G
  int num_heads = 4;
  int64_t dim = 32;
  int repeats = 3;
  uint64_t seed = 5;
};

// One fax row (a full FAX-SA block) and one dense row per size.
std::vector<BenchRow> bench_attention(const BenchConfig& cfg);

// Least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy);

// Closed form HW * N^2 * (P^2 + G^2) * heads.
int64_t fax_pair_closed_form(int64_t h, int64_t w, int64_t n, int64_t p, int64_t g,
                             int heads);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace faxbev
