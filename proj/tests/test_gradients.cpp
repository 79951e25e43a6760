#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <iostream>

#include "faxbev/gradcheck.hpp"
#include "faxbev/ops.hpp"

using namespace faxbev;

TEST_CASE("registered finite-difference suite passes") {
  auto results = run_gradchecks("", &std::cout);
  CHECK(results.size() >= 25);
  for (const GradCheckResult& r : results) {
    INFO(r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.passed);
  }
}

TEST_CASE("negative control: corrupted gradient is caught") {
  // an op whose backward is deliberately scaled by 1.1
  Rng rng(7);
  Tensor x = Tensor::uniform({6}, -1, 1, rng, Dtype::F64, true);
  auto broken_square = [&](const Tensor& in) {
    auto out = detail::make_node(in.shape(), in.dtype(), true, {in.node()});
    for (int64_t i = 0; i < in.numel(); ++i) {
      out->values[static_cast<size_t>(i)] =
          in.values()[static_cast<size_t>(i)] * in.values()[static_cast<size_t>(i)];
    }
    auto nx = in.node();
    out->backprop = [nx](detail::Node& self) {
      auto& g = detail::ensure_grad(*nx);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i] * 2.0 * nx->values[i] * 1.1;  // wrong on purpose
      }
    };
    return Tensor(std::move(out));
  };
  GradCheckResult r = check_gradient("broken_square", {x},
                                     [&] { return sum(broken_square(x)); });
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_err > 0.05);
}

TEST_CASE("filter selects a subset and unknown filter is a usage error") {
  auto results = run_gradchecks("softmax", nullptr);
  CHECK(results.size() == 1);
  CHECK(results[0].name == "softmax_lastaxis");
  CHECK(results[0].passed);
  CHECK_THROWS_AS(run_gradchecks("no-such-check", nullptr), UsageError);
}
