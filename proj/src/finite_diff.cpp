#include "avts/finite_diff.hpp"

#include <cmath>
#include <stdexcept>

#include "avts/ops.hpp"

namespace avts {

std::vector<std::vector<double>> fd_gradient(
    const std::function<double()>& loss_fn, const ParamList& params, double h) {
  if (h <= 0.0) throw std::invalid_argument("fd_gradient: h must be > 0");
  NoGradGuard ng;
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& [name, t] : params) {
    std::vector<double> g(t->data->size());
    for (size_t i = 0; i < t->data->size(); ++i) {
      const double orig = (*t->data)[i];
      (*t->data)[i] = orig + h;
      const double up = loss_fn();
      (*t->data)[i] = orig - h;
      const double down = loss_fn();
      (*t->data)[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

FiniteDiffReport compare_gradients(
    const ParamList& params, const std::vector<std::vector<double>>& analytic,
    const std::vector<std::vector<double>>& numeric, double tol) {
  FiniteDiffReport report;
  for (size_t p = 0; p < params.size(); ++p) {
    double worst = 0.0;
    for (size_t i = 0; i < analytic[p].size(); ++i) {
      const double a = analytic[p][i];
      const double b = numeric[p][i];
      const double diff = std::abs(a - b);
      if (diff <= 1e-9) continue;
      const double rel = diff / std::max(std::abs(a), std::abs(b));
      worst = std::max(worst, rel);
    }
    report.per_param.push_back({params[p].first, worst});
    report.max_rel_err = std::max(report.max_rel_err, worst);
    if (worst > tol) report.pass = false;
  }
  return report;
}

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_builder,
                                   const ParamList& params, double h,
                                   double tol) {
  for (const auto& [name, t] : params) t->zero_grad();
  Tensor loss = loss_builder();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, t] : params) analytic.push_back(*t->grad);

  auto scalar_loss = [&loss_builder]() {
    Tensor l = loss_builder();
    return (*l.data)[0];
  };
  const auto numeric = fd_gradient(scalar_loss, params, h);
  return compare_gradients(params, analytic, numeric, tol);
}

}  // namespace avts
