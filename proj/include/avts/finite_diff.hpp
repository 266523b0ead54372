#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "avts/tensor.hpp"

namespace avts {

// Gradient oracle: central finite differences against reverse-mode results.

using ParamList = std::vector<std::pair<std::string, Tensor*>>;

struct FiniteDiffReport {
  struct Entry {
    std::string name;
    double max_rel_err;
  };
  std::vector<Entry> per_param;
  double max_rel_err = 0.0;
  bool pass = true;
};

// Central differences of the scalar returned by loss_fn, one vector per
// parameter tensor. Mutates parameters in place and restores them.
std::vector<std::vector<double>> fd_gradient(
    const std::function<double()>& loss_fn, const ParamList& params, double h);

// Elementwise: pass when |a-b| <= 1e-9 or |a-b|/max(|a|,|b|) <= tol.
FiniteDiffReport compare_gradients(const ParamList& params,
                                   const std::vector<std::vector<double>>& analytic,
                                   const std::vector<std::vector<double>>& numeric,
                                   double tol);

// Zeroes grads, records loss_builder's graph once for analytic gradients,
// then probes the same builder under finite differences. An empty parameter
// list passes vacuously.
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_builder,
                                   const ParamList& params, double h, double tol);

}  // namespace avts
