#pragma once

#include <optional>
#include <vector>

#include "avts/tensor.hpp"

namespace avts {

// Reverse-mode autodiff over a recorded graph. Every op validates shapes,
// checks its output for NaN/Inf, and (when grads are enabled and some input
// requires them) records a node with a backward closure. Graph recording is
// confined to one logical thread per training step; a thread-local flag
// controls recording.

bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// ---- elementwise / linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k]x[k,n] -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_bias(const Tensor& a, const Tensor& bias);  // [m,n] + [n]
Tensor mul(const Tensor& a, const Tensor& b);          // hadamard
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);                         // x * sigmoid(x)
Tensor glu(const Tensor& a);                           // [m,2n] -> [m,n]
Tensor sum_all(const Tensor& a);                       // -> scalar {1}
Tensor slice_rows(const Tensor& a, int r0, int r1);    // rows [r0, r1)
Tensor pad_rows(const Tensor& a, int top, int bottom); // zero rows around

// ---- normalization / attention ----
Tensor softmax(const Tensor& a);  // row-wise; 1-D input treated as one row
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Fused scaled-dot-product attention over column-sliced heads, pre output
// projection. `mask`, when present, is [Tq,Tk] and added to the logits
// (use -inf to forbid a position).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int n_heads, const std::optional<Tensor>& mask);
Tensor causal_mask(int t);  // [t,t]: 0 on/below diagonal, -inf above

// ---- convolution ----
// Valid cross-correlation. weight rows are indexed w*in_dim + ci.
// T' = floor((T - width)/stride) + 1; errors when T < width.
Tensor conv1d(const Tensor& seq, const Tensor& weight, const Tensor& bias,
              int width, int stride);
// Same-padded, stride 1, odd width; weight is [width, d].
Tensor depthwise_conv1d(const Tensor& seq, const Tensor& weight,
                        const Tensor& bias);

// ---- embeddings / losses ----
Tensor embed(const Tensor& table, const std::vector<int>& ids);
// Mean negative log-likelihood over rows (or over rows with row_mask != 0).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& row_mask = {});

// Backpropagates from a scalar loss through the recorded graph. Gradients
// accumulate into every reachable tensor that requires them; callers zero
// parameter grads beforehand, so unreachable parameters read as zero.
void backward(const Tensor& loss);

}  // namespace avts
