#pragma once

#include <unordered_map>
#include <vector>

#include "faxbev/tensor.hpp"

namespace faxbev {

// Adam over the trainable entries of a ParamStore. State is keyed by
// parameter name so it survives checkpoint reloads of the same model.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options opts) : opts_(opts) {}

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }

  // Applies one update using accumulated grads; parameters without grads are
  // skipped. Does not clear grads.
  void step(ParamStore& store);

 private:
  struct Slot {
    std::vector<double> m, v;
    int64_t t = 0;
  };
  Options opts_ = Options{};
  std::unordered_map<std::string, Slot> state_;
};

// Cosine annealing from base_lr to min_lr over total steps.
double cosine_lr(int64_t step, int64_t total, double base_lr, double min_lr = 0.0);

// One-cycle: linear warmup for warmup_frac of the run up to base_lr, then
// cosine decay to min_lr.
double one_cycle_lr(int64_t step, int64_t total, double base_lr,
                    double warmup_frac = 0.1, double min_lr = 0.0);

}  // namespace faxbev
