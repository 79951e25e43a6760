#include "faxbev/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "faxbev/parallel.hpp"

namespace faxbev {

Tensor dense_attention_reference(const Tensor& x, int heads, PairCounter* counter) {
  if (x.rank() != 4) {
    throw ShapeError("dense_attention_reference: input must be [N,H,W,C]");
  }
  int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (c % heads) throw ConfigError("dense_attention_reference: heads must divide C");
  int64_t tokens = n * h * w;
  int64_t dk = c / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  auto out = detail::make_node(x.shape(), x.dtype(), false, {});
  const double* px = x.values().data();
  double* po = out->values.data();
  if (counter) counter->pairs += tokens * tokens * heads;

  parallel_for(tokens, [&](int64_t lo, int64_t hi) {
    std::vector<double> scores(static_cast<size_t>(tokens));
    for (int64_t i = lo; i < hi; ++i) {
      for (int hd = 0; hd < heads; ++hd) {
        const double* qi = px + i * c + hd * dk;
        double mx = -1e300;
        for (int64_t j = 0; j < tokens; ++j) {
          const double* kj = px + j * c + hd * dk;
          double s = 0.0;
          for (int64_t d = 0; d < dk; ++d) s += qi[d] * kj[d];
          s *= inv_sqrt;
          scores[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int64_t j = 0; j < tokens; ++j) {
          double e = std::exp(scores[static_cast<size_t>(j)] - mx);
          scores[static_cast<size_t>(j)] = e;
          z += e;
        }
        double* oi = po + i * c + hd * dk;
        double invz = 1.0 / z;
        for (int64_t j = 0; j < tokens; ++j) {
          double p = scores[static_cast<size_t>(j)] * invz;
          const double* vj = px + j * c + hd * dk;
          for (int64_t d = 0; d < dk; ++d) oi[d] += p * vj[d];
        }
      }
    }
  });
  detail::finalize(*out);
  return Tensor(std::move(out));
}

int64_t fax_pair_closed_form(int64_t h, int64_t w, int64_t n, int64_t p, int64_t g,
                             int heads) {
  return h * w * n * n * (p * p + g * g) * heads;
}

std::vector<BenchRow> bench_attention(const BenchConfig& cfg) {
  std::vector<BenchRow> rows;
  for (int64_t size : cfg.sizes) {
    Rng rng(cfg.seed + static_cast<uint64_t>(size));
    Tensor x = Tensor::uniform({cfg.agents, size, size, cfg.dim}, -1.0, 1.0, rng,
                               Dtype::F32, false);

    // fax: one full FAX-SA block (local + global)
    ParamStore store;
    Rng prng(cfg.seed);
    AttentionConfig acfg{cfg.dim, cfg.num_heads};
    FaxSubBlock local = FaxSubBlock::self_attention(store, "bench.local", acfg,
                                                    cfg.agents, cfg.window, cfg.window,
                                                    prng, Dtype::F32);
    FaxSubBlock global = FaxSubBlock::self_attention(store, "bench.global", acfg,
                                                     cfg.agents, cfg.window, cfg.window,
                                                     prng, Dtype::F32);
    PartitionSpec spec(cfg.agents, size, size, cfg.dim, cfg.window, cfg.window);

    BenchRow fax_row{size, size, cfg.agents, "fax", 0, 0.0};
    std::vector<double> times;
    for (int r = 0; r < cfg.repeats; ++r) {
      PairCounter counter;
      auto t0 = std::chrono::steady_clock::now();
      Tensor y = fax_sa_block(x, local, global, spec, &counter);
      auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      fax_row.pair_count = counter.pairs;
      (void)y;
    }
    std::sort(times.begin(), times.end());
    fax_row.wall_ms = times[times.size() / 2];
    rows.push_back(fax_row);

    BenchRow dense_row{size, size, cfg.agents, "dense", 0, 0.0};
    times.clear();
    for (int r = 0; r < cfg.repeats; ++r) {
      PairCounter counter;
      auto t0 = std::chrono::steady_clock::now();
      Tensor y = dense_attention_reference(x, cfg.num_heads, &counter);
      auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      dense_row.pair_count = counter.pairs;
      (void)y;
    }
    std::sort(times.begin(), times.end());
    dense_row.wall_ms = times[times.size() / 2];
    rows.push_back(dense_row);
  }
  return rows;
}

double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy) {
  if (xy.size() < 2) throw UsageError("fit_loglog_slope: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  double n = static_cast<double>(xy.size());
  for (const auto& [x, y] : xy) {
    double lx = std::log(x), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "H,W,N,variant,pair_count,wall_ms\n";
  for (const BenchRow& r : rows) {
    os << r.h << "," << r.w << "," << r.n << "," << r.variant << "," << r.pair_count
       << "," << r.wall_ms << "\n";
  }
  return os.str();
}

}  // namespace faxbev
