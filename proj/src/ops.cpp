#include "avts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace avts {

namespace {

thread_local bool g_grad_enabled = true;

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad; }

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(t.shape));
}

Tensor make_out(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void attach(Tensor& out, std::vector<Tensor> parents,
            std::function<void(Tensor&)> fn) {
  if (!out.requires_grad) return;
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward_fn = std::move(fn);
}

double* grad_of(Tensor& t) { return t.grad ? t.grad->data() : nullptr; }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k)
    throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape) +
                                " x " + shape_str(b.shape));
  Tensor out = make_out({m, n}, want_grad(a) || want_grad(b));
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out.data->data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(out, "matmul");
  attach(out, {a, b}, [m, k, n](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const double* g = o.grad->data();
    if (pa.requires_grad) {
      double* da = grad_of(pa);
      const double* bv = pb.data->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          if (gv == 0.0) continue;
          const double* brow = bv + j;  // column j
          for (int kk = 0; kk < k; ++kk) da[i * k + kk] += gv * brow[kk * n];
        }
    }
    if (pb.requires_grad) {
      double* db = grad_of(pb);
      const double* av = pa.data->data();
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          const double aval = av[i * k + kk];
          if (aval == 0.0) continue;
          const double* grow = g + i * n;
          double* drow = db + kk * n;
          for (int j = 0; j < n; ++j) drow[j] += aval * grow[j];
        }
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  for (size_t i = 0; i < out.data->size(); ++i)
    (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  check_finite(out, "add");
  attach(out, {a, b}, [](Tensor& o) {
    for (int p = 0; p < 2; ++p) {
      Tensor& t = o.node->parents[p];
      if (!t.requires_grad) continue;
      double* d = grad_of(t);
      for (size_t i = 0; i < o.grad->size(); ++i) d[i] += (*o.grad)[i];
    }
  });
  return out;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_bias");
  if (bias.ndim() != 1 || bias.shape[0] != a.shape[1])
    throw std::invalid_argument("add_bias: bias shape " + shape_str(bias.shape) +
                                " vs input " + shape_str(a.shape));
  const int m = a.shape[0], n = a.shape[1];
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(bias));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + (*bias.data)[j];
  check_finite(out, "add_bias");
  attach(out, {a, bias}, [m, n](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const double* g = o.grad->data();
    if (pa.requires_grad) {
      double* d = grad_of(pa);
      for (int i = 0; i < m * n; ++i) d[i] += g[i];
    }
    if (pb.requires_grad) {
      double* d = grad_of(pb);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d[j] += g[i * n + j];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  for (size_t i = 0; i < out.data->size(); ++i)
    (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  check_finite(out, "mul");
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    if (pa.requires_grad) {
      double* d = grad_of(pa);
      for (size_t i = 0; i < o.grad->size(); ++i)
        d[i] += (*o.grad)[i] * (*pb.data)[i];
    }
    if (pb.requires_grad) {
      double* d = grad_of(pb);
      for (size_t i = 0; i < o.grad->size(); ++i)
        d[i] += (*o.grad)[i] * (*pa.data)[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_out(a.shape, want_grad(a));
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = (*a.data)[i] * c;
  check_finite(out, "scale");
  attach(out, {a}, [c](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa);
    for (size_t i = 0; i < o.grad->size(); ++i) d[i] += (*o.grad)[i] * c;
  });
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_out(a.shape, want_grad(a));
  for (size_t i = 0; i < out.data->size(); ++i)
    (*out.data)[i] = (*a.data)[i] > 0.0 ? (*a.data)[i] : 0.0;
  check_finite(out, "relu");
  attach(out, {a}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa);
    for (size_t i = 0; i < o.grad->size(); ++i)
      if ((*pa.data)[i] > 0.0) d[i] += (*o.grad)[i];
  });
  return out;
}

namespace {
double sigmoid_v(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_out(a.shape, want_grad(a));
  for (size_t i = 0; i < out.data->size(); ++i)
    (*out.data)[i] = sigmoid_v((*a.data)[i]);
  check_finite(out, "sigmoid");
  attach(out, {a}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa);
    for (size_t i = 0; i < o.grad->size(); ++i) {
      const double s = (*o.data)[i];
      d[i] += (*o.grad)[i] * s * (1.0 - s);
    }
  });
  return out;
}

Tensor swish(const Tensor& a) {
  Tensor out = make_out(a.shape, want_grad(a));
  for (size_t i = 0; i < out.data->size(); ++i) {
    const double x = (*a.data)[i];
    (*out.data)[i] = x * sigmoid_v(x);
  }
  check_finite(out, "swish");
  attach(out, {a}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa);
    for (size_t i = 0; i < o.grad->size(); ++i) {
      const double x = (*pa.data)[i];
      const double s = sigmoid_v(x);
      d[i] += (*o.grad)[i] * (s + x * s * (1.0 - s));
    }
  });
  return out;
}

Tensor glu(const Tensor& a) {
  require_2d(a, "glu");
  if (a.shape[1] % 2 != 0)
    throw std::invalid_argument("glu: last dim must be even, got " +
                                shape_str(a.shape));
  const int m = a.shape[0], n = a.shape[1] / 2;
  Tensor out = make_out({m, n}, want_grad(a));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) * sigmoid_v(a.at(i, j + n));
  check_finite(out, "glu");
  attach(out, {a}, [m, n](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const double g = o.grad->at(static_cast<size_t>(i) * n + j);
        const double x = pa.at(i, j);
        const double s = sigmoid_v(pa.at(i, j + n));
        (*pa.grad)[static_cast<size_t>(i) * 2 * n + j] += g * s;
        (*pa.grad)[static_cast<size_t>(i) * 2 * n + j + n] +=
            g * x * s * (1.0 - s);
      }
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = make_out({1}, want_grad(a));
  double s = 0.0;
  for (double v : *a.data) s += v;
  (*out.data)[0] = s;
  check_finite(out, "sum_all");
  attach(out, {a}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa);
    const double g = (*o.grad)[0];
    for (size_t i = 0; i < pa.data->size(); ++i) d[i] += g;
  });
  return out;
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  require_2d(a, "slice_rows");
  if (r0 < 0 || r1 > a.shape[0] || r0 > r1)
    throw std::invalid_argument("slice_rows: bad range");
  const int n = a.shape[1], m = r1 - r0;
  Tensor out = make_out({m, n}, want_grad(a));
  std::copy(a.data->begin() + static_cast<size_t>(r0) * n,
            a.data->begin() + static_cast<size_t>(r1) * n, out.data->begin());
  attach(out, {a}, [r0, n, m](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    double* d = grad_of(pa) + static_cast<size_t>(r0) * n;
    for (int i = 0; i < m * n; ++i) d[i] += (*o.grad)[i];
  });
  return out;
}

Tensor pad_rows(const Tensor& a, int top, int bottom) {
  require_2d(a, "pad_rows");
  if (top < 0 || bottom < 0) throw std::invalid_argument("pad_rows: negative pad");
  const int m = a.shape[0], n = a.shape[1];
  Tensor out = make_out({m + top + bottom, n}, want_grad(a));
  std::copy(a.data->begin(), a.data->end(),
            out.data->begin() + static_cast<size_t>(top) * n);
  attach(out, {a}, [top, m, n](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    const double* g = o.grad->data() + static_cast<size_t>(top) * n;
    double* d = grad_of(pa);
    for (int i = 0; i < m * n; ++i) d[i] += g[i];
  });
  return out;
}

Tensor softmax(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("softmax: empty input");
  const int m = a.rows(), n = a.cols();
  Tensor out = make_out(a.shape, want_grad(a));
  for (int i = 0; i < m; ++i) {
    const double* row = a.data->data() + static_cast<size_t>(i) * n;
    double* orow = out.data->data() + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  check_finite(out, "softmax");
  attach(out, {a}, [m, n](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (int i = 0; i < m; ++i) {
      const double* p = o.data->data() + static_cast<size_t>(i) * n;
      const double* g = o.grad->data() + static_cast<size_t>(i) * n;
      double* d = grad_of(pa) + static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += p[j] * g[j];
      for (int j = 0; j < n; ++j) d[j] += p[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.numel() == 0) throw std::invalid_argument("layer_norm: empty input");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const int m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw std::invalid_argument("layer_norm: size mismatch x" +
                                shape_str(x.shape) + " gain" +
                                shape_str(gain.shape) + " bias" +
                                shape_str(bias.shape));
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(gain) || want_grad(bias));
  auto inv_std = std::make_shared<std::vector<double>>(m);
  auto means = std::make_shared<std::vector<double>>(m);
  for (int i = 0; i < m; ++i) {
    const double* row = x.data->data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*means)[i] = mu;
    (*inv_std)[i] = inv;
    double* orow = out.data->data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = (row[j] - mu) * inv * (*gain.data)[j] + (*bias.data)[j];
  }
  check_finite(out, "layer_norm");
  attach(out, {x, gain, bias}, [m, n, means, inv_std](Tensor& o) {
    Tensor& px = o.node->parents[0];
    Tensor& pg = o.node->parents[1];
    Tensor& pb = o.node->parents[2];
    for (int i = 0; i < m; ++i) {
      const double* row = px.data->data() + static_cast<size_t>(i) * n;
      const double* g = o.grad->data() + static_cast<size_t>(i) * n;
      const double mu = (*means)[i];
      const double inv = (*inv_std)[i];
      if (pg.requires_grad || pb.requires_grad) {
        for (int j = 0; j < n; ++j) {
          if (pg.requires_grad)
            (*pg.grad)[j] += g[j] * (row[j] - mu) * inv;
          if (pb.requires_grad) (*pb.grad)[j] += g[j];
        }
      }
      if (px.requires_grad) {
        double sum_dg = 0.0, sum_dgx = 0.0;
        std::vector<double> dxhat(n);
        for (int j = 0; j < n; ++j) {
          dxhat[j] = g[j] * (*pg.data)[j];
          sum_dg += dxhat[j];
          sum_dgx += dxhat[j] * (row[j] - mu) * inv;
        }
        double* d = grad_of(px) + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          const double xhat = (row[j] - mu) * inv;
          d[j] += inv * (dxhat[j] - sum_dg / n - xhat * sum_dgx / n);
        }
      }
    }
  });
  return out;
}

Tensor causal_mask(int t) {
  Tensor m = Tensor::zeros({t, t});
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m.at(i, j) = ninf;
  return m;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int n_heads, const std::optional<Tensor>& mask) {
  require_2d(q, "multi_head_attention");
  require_2d(k, "multi_head_attention");
  require_2d(v, "multi_head_attention");
  const int tq = q.shape[0], d = q.shape[1], tk = k.shape[0];
  if (k.shape[1] != d || v.shape[1] != d || v.shape[0] != tk)
    throw std::invalid_argument("multi_head_attention: shape mismatch");
  if (n_heads < 1 || d % n_heads != 0)
    throw std::invalid_argument(
        "multi_head_attention: dim not divisible by heads");
  if (mask && (mask->rows() != tq || mask->cols() != tk))
    throw std::invalid_argument("multi_head_attention: mask shape mismatch");
  const int dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = make_out({tq, d}, want_grad(q) || want_grad(k) || want_grad(v));
  // per-head attention weights, kept for backward
  auto attn = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_heads) * tq * tk);
  const double* mp = mask ? mask->data->data() : nullptr;
  std::vector<double> srow(tk);
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < tq; ++i) {
      const double* qi = q.data->data() + static_cast<size_t>(i) * d + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < tk; ++j) {
        const double* kj = k.data->data() + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= sc;
        if (mp) s += mp[static_cast<size_t>(i) * tk + j];
        srow[j] = s;
        mx = std::max(mx, s);
      }
      double sum = 0.0;
      double* arow =
          attn->data() + (static_cast<size_t>(h) * tq + i) * tk;
      for (int j = 0; j < tk; ++j) {
        arow[j] = std::exp(srow[j] - mx);
        sum += arow[j];
      }
      for (int j = 0; j < tk; ++j) arow[j] /= sum;
      double* oi = out.data->data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < tk; ++j) {
        const double a = arow[j];
        if (a == 0.0) continue;
        const double* vj = v.data->data() + static_cast<size_t>(j) * d + off;
        for (int c = 0; c < dh; ++c) oi[c] += a * vj[c];
      }
    }
  }
  check_finite(out, "multi_head_attention");
  attach(out, {q, k, v}, [tq, tk, d, dh, n_heads, sc, attn](Tensor& o) {
    Tensor& pq = o.node->parents[0];
    Tensor& pk = o.node->parents[1];
    Tensor& pv = o.node->parents[2];
    std::vector<double> da(tk), ds(tk);
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * dh;
      for (int i = 0; i < tq; ++i) {
        const double* go = o.grad->data() + static_cast<size_t>(i) * d + off;
        const double* arow =
            attn->data() + (static_cast<size_t>(h) * tq + i) * tk;
        double dot = 0.0;
        for (int j = 0; j < tk; ++j) {
          const double* vj = pv.data->data() + static_cast<size_t>(j) * d + off;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += go[c] * vj[c];
          da[j] = s;
          dot += arow[j] * s;
        }
        for (int j = 0; j < tk; ++j) ds[j] = arow[j] * (da[j] - dot);
        if (pv.requires_grad) {
          for (int j = 0; j < tk; ++j) {
            const double a = arow[j];
            if (a == 0.0) continue;
            double* dv = grad_of(pv) + static_cast<size_t>(j) * d + off;
            for (int c = 0; c < dh; ++c) dv[c] += a * go[c];
          }
        }
        if (pq.requires_grad) {
          double* dq = grad_of(pq) + static_cast<size_t>(i) * d + off;
          for (int j = 0; j < tk; ++j) {
            if (ds[j] == 0.0) continue;
            const double* kj =
                pk.data->data() + static_cast<size_t>(j) * d + off;
            for (int c = 0; c < dh; ++c) dq[c] += sc * ds[j] * kj[c];
          }
        }
        if (pk.requires_grad) {
          const double* qi = pq.data->data() + static_cast<size_t>(i) * d + off;
          for (int j = 0; j < tk; ++j) {
            if (ds[j] == 0.0) continue;
            double* dk = grad_of(pk) + static_cast<size_t>(j) * d + off;
            for (int c = 0; c < dh; ++c) dk[c] += sc * ds[j] * qi[c];
          }
        }
      }
    }
  });
  return out;
}

Tensor conv1d(const Tensor& seq, const Tensor& weight, const Tensor& bias,
              int width, int stride) {
  require_2d(seq, "conv1d");
  require_2d(weight, "conv1d");
  if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
  const int t = seq.shape[0], din = seq.shape[1];
  if (t < width)
    throw std::invalid_argument("conv1d: sequence shorter than kernel width");
  if (weight.shape[0] != width * din)
    throw std::invalid_argument("conv1d: weight rows != width*in_dim");
  const int dout = weight.shape[1];
  if (bias.numel() != dout)
    throw std::invalid_argument("conv1d: bias size mismatch");
  const int tout = (t - width) / stride + 1;
  Tensor out = make_out({tout, dout},
                        want_grad(seq) || want_grad(weight) || want_grad(bias));
  for (int to = 0; to < tout; ++to) {
    double* orow = out.data->data() + static_cast<size_t>(to) * dout;
    for (int j = 0; j < dout; ++j) orow[j] = (*bias.data)[j];
    for (int w = 0; w < width; ++w) {
      const double* srow =
          seq.data->data() + static_cast<size_t>(to * stride + w) * din;
      for (int ci = 0; ci < din; ++ci) {
        const double sv = srow[ci];
        if (sv == 0.0) continue;
        const double* wrow =
            weight.data->data() + static_cast<size_t>(w * din + ci) * dout;
        for (int j = 0; j < dout; ++j) orow[j] += sv * wrow[j];
      }
    }
  }
  check_finite(out, "conv1d");
  attach(out, {seq, weight, bias},
         [t, din, dout, width, stride, tout](Tensor& o) {
           Tensor& ps = o.node->parents[0];
           Tensor& pw = o.node->parents[1];
           Tensor& pb = o.node->parents[2];
           for (int to = 0; to < tout; ++to) {
             const double* g = o.grad->data() + static_cast<size_t>(to) * dout;
             if (pb.requires_grad)
               for (int j = 0; j < dout; ++j) (*pb.grad)[j] += g[j];
             for (int w = 0; w < width; ++w) {
               const size_t srow_off = static_cast<size_t>(to * stride + w) * din;
               for (int ci = 0; ci < din; ++ci) {
                 const size_t wrow_off = static_cast<size_t>(w * din + ci) * dout;
                 if (ps.requires_grad) {
                   double s = 0.0;
                   const double* wrow = pw.data->data() + wrow_off;
                   for (int j = 0; j < dout; ++j) s += g[j] * wrow[j];
                   (*ps.grad)[srow_off + ci] += s;
                 }
                 if (pw.requires_grad) {
                   const double sv = (*ps.data)[srow_off + ci];
                   if (sv == 0.0) continue;
                   double* dw = pw.grad->data() + wrow_off;
                   for (int j = 0; j < dout; ++j) dw[j] += sv * g[j];
                 }
               }
             }
           }
         });
  return out;
}

Tensor depthwise_conv1d(const Tensor& seq, const Tensor& weight,
                        const Tensor& bias) {
  require_2d(seq, "depthwise_conv1d");
  require_2d(weight, "depthwise_conv1d");
  const int t = seq.shape[0], d = seq.shape[1];
  const int width = weight.shape[0];
  if (width % 2 == 0)
    throw std::invalid_argument("depthwise_conv1d: width must be odd");
  if (weight.shape[1] != d || bias.numel() != d)
    throw std::invalid_argument("depthwise_conv1d: shape mismatch");
  const int pad = (width - 1) / 2;
  Tensor out = make_out({t, d},
                        want_grad(seq) || want_grad(weight) || want_grad(bias));
  for (int i = 0; i < t; ++i) {
    double* orow = out.data->data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = (*bias.data)[j];
    for (int w = 0; w < width; ++w) {
      const int si = i + w - pad;
      if (si < 0 || si >= t) continue;
      const double* srow = seq.data->data() + static_cast<size_t>(si) * d;
      const double* wrow = weight.data->data() + static_cast<size_t>(w) * d;
      for (int j = 0; j < d; ++j) orow[j] += srow[j] * wrow[j];
    }
  }
  check_finite(out, "depthwise_conv1d");
  attach(out, {seq, weight, bias}, [t, d, width, pad](Tensor& o) {
    Tensor& ps = o.node->parents[0];
    Tensor& pw = o.node->parents[1];
    Tensor& pb = o.node->parents[2];
    for (int i = 0; i < t; ++i) {
      const double* g = o.grad->data() + static_cast<size_t>(i) * d;
      if (pb.requires_grad)
        for (int j = 0; j < d; ++j) (*pb.grad)[j] += g[j];
      for (int w = 0; w < width; ++w) {
        const int si = i + w - pad;
        if (si < 0 || si >= t) continue;
        const double* srow = ps.data->data() + static_cast<size_t>(si) * d;
        const double* wrow = pw.data->data() + static_cast<size_t>(w) * d;
        if (ps.requires_grad) {
          double* dsrow = grad_of(ps) + static_cast<size_t>(si) * d;
          for (int j = 0; j < d; ++j) dsrow[j] += g[j] * wrow[j];
        }
        if (pw.requires_grad) {
          double* dwrow = grad_of(pw) + static_cast<size_t>(w) * d;
          for (int j = 0; j < d; ++j) dwrow[j] += g[j] * srow[j];
        }
      }
    }
  });
  return out;
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "embed");
  const int v = table.shape[0], d = table.shape[1];
  const int l = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= v) throw std::invalid_argument("embed: id out of range");
  Tensor out = make_out({l, d}, want_grad(table));
  for (int i = 0; i < l; ++i)
    std::copy(table.data->begin() + static_cast<size_t>(ids[i]) * d,
              table.data->begin() + static_cast<size_t>(ids[i] + 1) * d,
              out.data->begin() + static_cast<size_t>(i) * d);
  attach(out, {table}, [ids, d](Tensor& o) {
    Tensor& pt = o.node->parents[0];
    if (!pt.requires_grad) return;
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* g = o.grad->data() + i * d;
      double* dt = grad_of(pt) + static_cast<size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) dt[j] += g[j];
    }
  });
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& row_mask) {
  require_2d(logits, "cross_entropy_rows");
  const int l = logits.shape[0], v = logits.shape[1];
  if (static_cast<int>(targets.size()) != l)
    throw std::invalid_argument("cross_entropy_rows: target length mismatch");
  if (!row_mask.empty() && static_cast<int>(row_mask.size()) != l)
    throw std::invalid_argument("cross_entropy_rows: mask length mismatch");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw std::invalid_argument("cross_entropy_rows: target out of range");
  int m = 0;
  for (int i = 0; i < l; ++i)
    if (row_mask.empty() || row_mask[i]) ++m;
  if (m == 0)
    throw std::invalid_argument("cross_entropy_rows: no rows included");

  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(l) * v);
  double loss = 0.0;
  for (int i = 0; i < l; ++i) {
    const double* row = logits.data->data() + static_cast<size_t>(i) * v;
    double* prow = probs->data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < v; ++j) prow[j] /= sum;
    if (row_mask.empty() || row_mask[i])
      loss -= std::log(std::max(prow[targets[i]], 1e-300));
  }
  Tensor out = make_out({1}, want_grad(logits));
  (*out.data)[0] = loss / m;
  check_finite(out, "cross_entropy_rows");
  attach(out, {logits}, [targets, row_mask, probs, l, v, m](Tensor& o) {
    Tensor& pl = o.node->parents[0];
    if (!pl.requires_grad) return;
    const double g = (*o.grad)[0] / m;
    for (int i = 0; i < l; ++i) {
      if (!row_mask.empty() && !row_mask[i]) continue;
      const double* prow = probs->data() + static_cast<size_t>(i) * v;
      double* d = grad_of(pl) + static_cast<size_t>(i) * v;
      for (int j = 0; j < v; ++j) d[j] += g * prow[j];
      d[targets[i]] -= g;
    }
  });
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape));
  if (!loss.requires_grad || !loss.node) return;  // constant graph: nothing to do
  (*loss.grad)[0] = 1.0;

  // Postorder DFS over parent edges puts every parent before its consumers;
  // running the closures in reverse gives each node its full gradient before
  // it propagates.
  struct Frame {
    Tensor t;
    size_t next;
  };
  std::vector<Tensor> order;
  std::unordered_set<Node*> visited;
  std::vector<Frame> stack;
  visited.insert(loss.node.get());
  stack.push_back({loss, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.t.node->parents.size()) {
      const Tensor& p = f.t.node->parents[f.next++];
      if (p.node && !visited.count(p.node.get())) {
        visited.insert(p.node.get());
        stack.push_back({p, 0});  // invalidates f; not used again this pass
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (it->node->backward_fn) it->node->backward_fn(*it);
  }
}

}  // namespace avts
