#include "avts/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace avts {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  const int64_t n = numel_of(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(n, 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& v : *t.data) v = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("tensor: values length does not match shape " +
                                shape_str(shape));
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad)
    t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, Rng& rng,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : *t.data) v = rng.normal() * stddev;
  return t;
}

int64_t Tensor::numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }

void Tensor::zero_grad() {
  if (grad)
    for (double& g : *grad) g = 0.0;
}

Tensor Tensor::clone_values() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  return t;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : *t.data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

bool all_close(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.data->size(); ++i) {
    if (std::abs((*a.data)[i] - (*b.data)[i]) > tol) return false;
  }
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data->data(), b.data->data(),
                     a.data->size() * sizeof(double)) == 0;
}

}  // namespace avts
