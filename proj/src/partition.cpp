#include "faxbev/partition.hpp"

namespace faxbev {

PartitionSpec::PartitionSpec(int64_t n_, int64_t h_, int64_t w_, int64_t c_,
                             int64_t ph_, int64_t pw_, int64_t gh_, int64_t gw_)
    : n(n_), h(h_), w(w_), c(c_), ph(ph_), pw(pw_), gh(gh_), gw(gw_) {
  auto fail = [&](const char* what, int64_t p, int64_t dim) {
    throw ConfigError(std::string("PartitionSpec: ") + what + " " + std::to_string(p) +
                      " does not divide " + std::to_string(dim) + " (N=" +
                      std::to_string(n) + ", H=" + std::to_string(h) + ", W=" +
                      std::to_string(w) + ")");
  };
  if (n < 1 || h < 1 || w < 1 || c < 1 || ph < 1 || pw < 1 || gh < 1 || gw < 1) {
    throw ConfigError("PartitionSpec: all dimensions must be positive");
  }
  if (h % ph) fail("window height", ph, h);
  if (w % pw) fail("window width", pw, w);
  if (h % gh) fail("grid height", gh, h);
  if (w % gw) fail("grid width", gw, w);
}

namespace partition_detail {

std::shared_ptr<std::vector<int64_t>> block_index(const PartitionSpec& s) {
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(s.n * s.h * s.w * s.c));
  int64_t wy = s.h / s.ph, wx = s.w / s.pw;
  // out[(i*wx+j), ((n*ph+p)*pw+q), c] = x[n, i*ph+p, j*pw+q, c]
  for (int64_t i = 0; i < wy; ++i) {
    for (int64_t j = 0; j < wx; ++j) {
      for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t p = 0; p < s.ph; ++p) {
          for (int64_t q = 0; q < s.pw; ++q) {
            int64_t y = i * s.ph + p, x = j * s.pw + q;
            int64_t base = ((n * s.h + y) * s.w + x) * s.c;
            for (int64_t c = 0; c < s.c; ++c) map->push_back(base + c);
          }
        }
      }
    }
  }
  return map;
}

std::shared_ptr<std::vector<int64_t>> grid_index(const PartitionSpec& s) {
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(s.n * s.h * s.w * s.c));
  int64_t uy = s.h / s.gh, ux = s.w / s.gw;
  // out[(u*ux+v), ((n*gh+a)*gw+b), c] = x[n, a*uy+u, b*ux+v, c]
  for (int64_t u = 0; u < uy; ++u) {
    for (int64_t v = 0; v < ux; ++v) {
      for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t a = 0; a < s.gh; ++a) {
          for (int64_t b = 0; b < s.gw; ++b) {
            int64_t y = a * uy + u, x = b * ux + v;
            int64_t base = ((n * s.h + y) * s.w + x) * s.c;
            for (int64_t c = 0; c < s.c; ++c) map->push_back(base + c);
          }
        }
      }
    }
  }
  return map;
}

std::shared_ptr<std::vector<int64_t>> invert(const std::vector<int64_t>& map) {
  auto inv = std::make_shared<std::vector<int64_t>>(map.size());
  for (size_t i = 0; i < map.size(); ++i) {
    (*inv)[static_cast<size_t>(map[i])] = static_cast<int64_t>(i);
  }
  return inv;
}

}  // namespace partition_detail

namespace {

void check_stacked(const Tensor& x, const PartitionSpec& s, const char* op) {
  Shape want{s.n, s.h, s.w, s.c};
  if (x.shape() != want) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) +
                     " does not match spec " + shape_str(want));
  }
}

}  // namespace

Tensor fused_block(const Tensor& x, const PartitionSpec& spec) {
  check_stacked(x, spec, "fused_block");
  return gather_permutation(x, partition_detail::block_index(spec),
                            {spec.num_windows(), spec.window_tokens(), spec.c});
}

Tensor fused_unblock(const Tensor& y, const PartitionSpec& spec) {
  Shape want{spec.num_windows(), spec.window_tokens(), spec.c};
  if (y.shape() != want) {
    throw ShapeError("fused_unblock: input " + shape_str(y.shape()) +
                     " does not match blocked shape " + shape_str(want));
  }
  auto fwd = partition_detail::block_index(spec);
  return gather_permutation(y, partition_detail::invert(*fwd),
                            {spec.n, spec.h, spec.w, spec.c});
}

Tensor fused_grid(const Tensor& x, const PartitionSpec& spec) {
  check_stacked(x, spec, "fused_grid");
  return gather_permutation(x, partition_detail::grid_index(spec),
                            {spec.num_grid_groups(), spec.grid_tokens(), spec.c});
}

Tensor fused_ungrid(const Tensor& y, const PartitionSpec& spec) {
  Shape want{spec.num_grid_groups(), spec.grid_tokens(), spec.c};
  if (y.shape() != want) {
    throw ShapeError("fused_ungrid: input " + shape_str(y.shape()) +
                     " does not match gridded shape " + shape_str(want));
  }
  auto fwd = partition_detail::grid_index(spec);
  return gather_permutation(y, partition_detail::invert(*fwd),
                            {spec.n, spec.h, spec.w, spec.c});
}

}  // namespace faxbev
