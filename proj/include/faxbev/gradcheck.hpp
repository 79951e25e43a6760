#pragma once

#include <functional>
#include <string>
#include <vector>

#include "faxbev/tensor.hpp"

namespace faxbev {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int coords = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double h = 1e-4;
  double tol = 1e-3;
  // cap on probed coordinates per leaf; 0 probes everything
  int max_coords_per_leaf = 0;
  uint64_t sample_seed = 1234;
};

// Central finite differences against reverse-mode gradients. `loss_fn` must
// rebuild the graph from the current leaf values on every call; leaves must
// be f64 with requires_grad.
GradCheckResult check_gradient(const std::string& name, std::vector<Tensor> leaves,
                               const std::function<Tensor()>& loss_fn,
                               const GradCheckOptions& opts = GradCheckOptions());

struct NamedCheck {
  std::string name;
  std::function<GradCheckResult()> run;
};

// The registered finite-difference suite: every differentiable op plus the
// composite blocks and one end-to-end pipeline pass.
std::vector<NamedCheck> standard_gradchecks();

// Runs checks whose name contains `filter` (empty = all). Throws UsageError
// when the filter matches nothing.
std::vector<GradCheckResult> run_gradchecks(const std::string& filter,
                                            std::ostream* log = nullptr);

}  // namespace faxbev
