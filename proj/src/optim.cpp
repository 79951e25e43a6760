#include "faxbev/optim.hpp"

#include <algorithm>
#include <cmath>

namespace faxbev {

void Adam::step(ParamStore& store) {
  for (Parameter& p : store.items()) {
    if (!p.tensor.requires_grad()) continue;
    const std::vector<double>* g = p.tensor.grad();
    if (!g) continue;
    Slot& slot = state_[p.name];
    size_t n = g->size();
    if (slot.m.empty()) {
      slot.m.assign(n, 0.0);
      slot.v.assign(n, 0.0);
    }
    slot.t += 1;
    double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(slot.t));
    double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(slot.t));
    auto& vals = p.tensor.mutable_values();
    for (size_t i = 0; i < n; ++i) {
      double gi = (*g)[i];
      slot.m[i] = opts_.beta1 * slot.m[i] + (1.0 - opts_.beta1) * gi;
      slot.v[i] = opts_.beta2 * slot.v[i] + (1.0 - opts_.beta2) * gi * gi;
      double mhat = slot.m[i] / bc1;
      double vhat = slot.v[i] / bc2;
      vals[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
    detail::quantize(vals, p.tensor.dtype());
  }
}

double cosine_lr(int64_t step, int64_t total, double base_lr, double min_lr) {
  if (total <= 1) return base_lr;
  double t = std::clamp(static_cast<double>(step) / static_cast<double>(total - 1), 0.0, 1.0);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(t * M_PI));
}

double one_cycle_lr(int64_t step, int64_t total, double base_lr, double warmup_frac,
                    double min_lr) {
  if (total <= 1) return base_lr;
  int64_t warm = std::max<int64_t>(1, static_cast<int64_t>(warmup_frac * static_cast<double>(total)));
  if (step < warm) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  return cosine_lr(step - warm, total - warm, base_lr, min_lr);
}

}  // namespace faxbev
