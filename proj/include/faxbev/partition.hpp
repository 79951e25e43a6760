#pragma once

#include <memory>

#include "faxbev/ops.hpp"
#include "faxbev/tensor.hpp"

namespace faxbev {

// Window/grid partition geometry over a stacked feature map [N, H, W, C].
// Windows may be rectangular (ph x pw); the common square case uses p = ph =
// pw. All divisibility requirements are checked at construction.
struct PartitionSpec {
  int64_t n = 1, h = 0, w = 0, c = 0;
  int64_t ph = 0, pw = 0;  // window size
  int64_t gh = 0, gw = 0;  // grid size

  PartitionSpec(int64_t n, int64_t h, int64_t w, int64_t c, int64_t p, int64_t g)
      : PartitionSpec(n, h, w, c, p, p, g, g) {}
  PartitionSpec(int64_t n, int64_t h, int64_t w, int64_t c, int64_t ph, int64_t pw,
                int64_t gh, int64_t gw);

  int64_t num_windows() const { return (h / ph) * (w / pw); }
  int64_t window_tokens() const { return n * ph * pw; }
  int64_t num_grid_groups() const { return (h / gh) * (w / gw); }
  int64_t grid_tokens() const { return n * gh * gw; }
};

// App-style Fused-Block: [N,H,W,C] -> [HW/P^2, N*P^2, C]. Window (i,j) holds
// x[n, i*ph+p, j*pw+q, c], tokens ordered (n, p, q) lexicographic.
Tensor fused_block(const Tensor& x, const PartitionSpec& spec);
Tensor fused_unblock(const Tensor& y, const PartitionSpec& spec);

// Fused-Grid: [N,H,W,C] -> [HW/G^2, N*G^2, C]. Group (u,v) holds the strided
// samples x[n, a*(H/G)+u, b*(W/G)+v, c], tokens ordered (n, a, b).
Tensor fused_grid(const Tensor& x, const PartitionSpec& spec);
Tensor fused_ungrid(const Tensor& y, const PartitionSpec& spec);

namespace partition_detail {
// Flat source index maps (bijections over N*H*W*C), exposed for tests.
std::shared_ptr<std::vector<int64_t>> block_index(const PartitionSpec& spec);
std::shared_ptr<std::vector<int64_t>> grid_index(const PartitionSpec& spec);
std::shared_ptr<std::vector<int64_t>> invert(const std::vector<int64_t>& map);
}  // namespace partition_detail

}  // namespace faxbev
