#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avts/rng.hpp"

namespace avts {

struct Node;

// Dense row-major double tensor with an optional autograd handle.
// Shape is 1-D ({n}) or 2-D ({rows, cols}). Data is shared: copying a Tensor
// copies the handle, not the values.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // non-null iff requires_grad
  std::shared_ptr<Node> node;                 // non-null for recorded op outputs
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, double stddev, Rng& rng,
                      bool requires_grad = false);

  bool defined() const { return data != nullptr; }
  int64_t numel() const;
  int ndim() const { return static_cast<int>(shape.size()); }
  // 2-D accessors; a 1-D tensor reads as a single row.
  int rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  int cols() const { return shape.empty() ? 0 : shape.back(); }

  double& at(int r, int c) { return (*data)[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }
  double& operator[](int64_t i) { return (*data)[i]; }
  double operator[](int64_t i) const { return (*data)[i]; }

  void zero_grad();
  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  // Deep copy of values (no node, fresh storage; keeps requires_grad flag off).
  Tensor clone_values() const;
};

struct Node {
  std::vector<Tensor> parents;
  // Accumulates into parents' grads, reading this output's grad.
  std::function<void(Tensor&)> backward_fn;
};

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Throws std::runtime_error naming `op` if any value is NaN/Inf.
void check_finite(const Tensor& t, const char* op);

bool all_close(const Tensor& a, const Tensor& b, double tol);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace avts
