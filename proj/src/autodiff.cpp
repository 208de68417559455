#include "mclfir/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace mclfir::ad {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

// y += a * x
void axpy(double a, const Tensor& x, Tensor& y) {
  const double* xp = x.data();
  double* yp = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

// C[M,N] += A[M,K] * B[K,N]
void gemm_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const double a = a_row[k];
      if (a == 0.0) continue;
      const double* b_row = B + k * N;
      for (int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T  (rows of both operands are contiguous)
void gemm_nt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b_row = B + j * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
      c_row[j] += acc;
    }
  }
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.empty()) grad = Tensor::zeros(value.shape());
  return grad;
}

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = false;
  return n;
}

double value_of(const Var& v) { return v->value.scalar_value(); }

void backward(const Var& root) {
  check(root != nullptr, "backward: null root");
  check(root->value.numel() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Post-order over the grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    bool descended = false;
    while (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(node);
    stack.pop_back();
  }

  for (Node* n : order) n->grad = Tensor::zeros(n->value.shape());
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "add: shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  Tensor out = a->value;
  axpy(1.0, b->value, out);
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) axpy(1.0, n.grad, a->ensure_grad());
    if (b->requires_grad) axpy(1.0, n.grad, b->ensure_grad());
  });
}

Var sub(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value;
  axpy(-1.0, b->value, out);
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) axpy(1.0, n.grad, a->ensure_grad());
    if (b->requires_grad) axpy(-1.0, n.grad, b->ensure_grad());
  });
}

Var mul(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double k) { return affine(a, k, 0.0); }

Var affine(const Var& a, double k, double c) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = k * out[i] + c;
  return make_node(std::move(out), {a}, [a, k](Node& n) {
    if (a->requires_grad) axpy(k, n.grad, a->ensure_grad());
  });
}

Var tanh_op(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  Tensor y = out;
  return make_node(std::move(out), {a}, [a, y](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  Tensor x = a->value;
  return make_node(std::move(out), {a}, [a, x](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (x[i] > 0.0) g[i] += n.grad[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Tensor y = out;
  return make_node(std::move(out), {a}, [a, y](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * y[i] * (1.0 - y[i]);
  });
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out = a->value.reshaped(shape);
  return make_node(std::move(out), {a}, [a](Node& n) {
    if (a->requires_grad) axpy(1.0, n.grad, a->ensure_grad());
  });
}

Var vstack(const Var& a, const Var& b) {
  check(a->value.rank() >= 1 && a->value.rank() == b->value.rank(), "vstack: rank mismatch");
  for (int i = 1; i < a->value.rank(); ++i)
    check(a->value.dim(i) == b->value.dim(i), "vstack: trailing dims differ");
  std::vector<int64_t> shape = a->value.shape();
  shape[0] += b->value.dim(0);
  Tensor out(shape);
  std::copy_n(a->value.data(), a->value.numel(), out.data());
  std::copy_n(b->value.data(), b->value.numel(), out.data() + a->value.numel());
  const int64_t na = a->value.numel();
  return make_node(std::move(out), {a, b}, [a, b, na](Node& n) {
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (int64_t i = 0; i < na; ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[na + i];
    }
  });
}

Var slice_rows(const Var& a, int64_t r0, int64_t r1) {
  check(a->value.rank() >= 1, "slice_rows: rank 0 input");
  check(0 <= r0 && r0 < r1 && r1 <= a->value.dim(0), "slice_rows: bad range");
  std::vector<int64_t> shape = a->value.shape();
  const int64_t row = a->value.numel() / shape[0];
  shape[0] = r1 - r0;
  Tensor out(shape);
  std::copy_n(a->value.data() + r0 * row, out.numel(), out.data());
  return make_node(std::move(out), {a}, [a, r0, row](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->ensure_grad();
    double* gp = g.data() + r0 * row;
    for (int64_t i = 0; i < n.grad.numel(); ++i) gp[i] += n.grad[i];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  check(a->value.rank() == 2 && b->value.rank() == 2, "concat_cols: rank-2 inputs required");
  check(a->value.dim(0) == b->value.dim(0), "concat_cols: row counts differ");
  const int64_t n_rows = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
  Tensor out({n_rows, ca + cb});
  for (int64_t i = 0; i < n_rows; ++i) {
    std::copy_n(a->value.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b->value.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return make_node(std::move(out), {a, b}, [a, b, n_rows, ca, cb](Node& n) {
    for (int64_t i = 0; i < n_rows; ++i) {
      const double* gp = n.grad.data() + i * (ca + cb);
      if (a->requires_grad) {
        double* g = a->ensure_grad().data() + i * ca;
        for (int64_t j = 0; j < ca; ++j) g[j] += gp[j];
      }
      if (b->requires_grad) {
        double* g = b->ensure_grad().data() + i * cb;
        for (int64_t j = 0; j < cb; ++j) g[j] += gp[ca + j];
      }
    }
  });
}

Var tile_rows(const Var& v, int64_t n_rows) {
  check(v->value.rank() == 1, "tile_rows: rank-1 input required");
  check(n_rows > 0, "tile_rows: positive row count required");
  const int64_t d = v->value.dim(0);
  Tensor out({n_rows, d});
  for (int64_t i = 0; i < n_rows; ++i) std::copy_n(v->value.data(), d, out.data() + i * d);
  return make_node(std::move(out), {v}, [v, n_rows, d](Node& n) {
    if (!v->requires_grad) return;
    Tensor& g = v->ensure_grad();
    for (int64_t i = 0; i < n_rows; ++i) {
      const double* gp = n.grad.data() + i * d;
      for (int64_t j = 0; j < d; ++j) g[j] += gp[j];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
  check(x->value.rank() == 2, "linear: x must be [N,K]");
  check(w->value.rank() == 2, "linear: w must be [M,K]");
  check(b->value.rank() == 1, "linear: b must be [M]");
  const int64_t N = x->value.dim(0), K = x->value.dim(1);
  const int64_t M = w->value.dim(0);
  check(w->value.dim(1) == K, "linear: inner dimensions differ");
  check(b->value.dim(0) == M, "linear: bias length differs from output width");
  Tensor out({N, M});
  for (int64_t i = 0; i < N; ++i) std::copy_n(b->value.data(), M, out.data() + i * M);
  gemm_nt_acc(x->value.data(), w->value.data(), out.data(), N, K, M);
  return make_node(std::move(out), {x, w, b}, [x, w, b, N, K, M](Node& n) {
    if (x->requires_grad)
      gemm_acc(n.grad.data(), w->value.data(), x->ensure_grad().data(), N, M, K);
    if (w->requires_grad) {
      // gw[m,k] += sum_n g[n,m] * x[n,k]
      Tensor& gw = w->ensure_grad();
      for (int64_t i = 0; i < N; ++i) {
        const double* g_row = n.grad.data() + i * M;
        const double* x_row = x->value.data() + i * K;
        for (int64_t m = 0; m < M; ++m) {
          const double g = g_row[m];
          if (g == 0.0) continue;
          double* gw_row = gw.data() + m * K;
          for (int64_t k = 0; k < K; ++k) gw_row[k] += g * x_row[k];
        }
      }
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (int64_t i = 0; i < N; ++i) {
        const double* g_row = n.grad.data() + i * M;
        for (int64_t m = 0; m < M; ++m) gb[m] += g_row[m];
      }
    }
  });
}

Var gram(const Var& z) {
  check(z->value.rank() == 2, "gram: [N,D] input required");
  const int64_t N = z->value.dim(0), D = z->value.dim(1);
  Tensor out({N, N});
  gemm_nt_acc(z->value.data(), z->value.data(), out.data(), N, D, N);
  return make_node(std::move(out), {z}, [z, N, D](Node& n) {
    if (!z->requires_grad) return;
    // gz += (G + G^T) Z
    Tensor sym({N, N});
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j) sym.at2(i, j) = n.grad.at2(i, j) + n.grad.at2(j, i);
    gemm_acc(sym.data(), z->value.data(), z->ensure_grad().data(), N, N, D);
  });
}

Var rowwise_dot(const Var& a, const Var& b) {
  check(a->value.rank() == 2 && a->value.same_shape(b->value), "rowwise_dot: equal [N,D] inputs required");
  const int64_t N = a->value.dim(0), D = a->value.dim(1);
  Tensor out({N});
  for (int64_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < D; ++j) acc += a->value.at2(i, j) * b->value.at2(i, j);
    out[i] = acc;
  }
  return make_node(std::move(out), {a, b}, [a, b, N, D](Node& n) {
    for (int64_t i = 0; i < N; ++i) {
      const double g = n.grad[i];
      if (a->requires_grad) {
        double* ga = a->ensure_grad().data() + i * D;
        const double* bv = b->value.data() + i * D;
        for (int64_t j = 0; j < D; ++j) ga[j] += g * bv[j];
      }
      if (b->requires_grad) {
        double* gb = b->ensure_grad().data() + i * D;
        const double* av = a->value.data() + i * D;
        for (int64_t j = 0; j < D; ++j) gb[j] += g * av[j];
      }
    }
  });
}

Var dot(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "dot: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i] * b->value[i];
  return make_node(Tensor::scalar(acc), {a, b}, [a, b](Node& n) {
    const double g = n.grad[0];
    if (a->requires_grad) axpy(g, b->value, a->ensure_grad());
    if (b->requires_grad) axpy(g, a->value, b->ensure_grad());
  });
}

Var l2_normalize_rows(const Var& x) {
  const bool vec = x->value.rank() == 1;
  check(vec || x->value.rank() == 2, "l2_normalize_rows: rank 1 or 2 input required");
  const int64_t N = vec ? 1 : x->value.dim(0);
  const int64_t D = vec ? x->value.dim(0) : x->value.dim(1);
  Tensor out = x->value;
  std::vector<double> norms(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    double sq = 0.0;
    const double* row = x->value.data() + i * D;
    for (int64_t j = 0; j < D; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw std::domain_error("l2_normalize_rows: zero-norm row");
    norms[static_cast<size_t>(i)] = norm;
    double* o = out.data() + i * D;
    for (int64_t j = 0; j < D; ++j) o[j] /= norm;
  }
  Tensor y = out;
  return make_node(std::move(out), {x}, [x, y, norms, N, D](Node& n) {
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    for (int64_t i = 0; i < N; ++i) {
      const double* g = n.grad.data() + i * D;
      const double* yi = y.data() + i * D;
      double gy = 0.0;
      for (int64_t j = 0; j < D; ++j) gy += g[j] * yi[j];
      double* out_g = gx.data() + i * D;
      const double inv = 1.0 / norms[static_cast<size_t>(i)];
      for (int64_t j = 0; j < D; ++j) out_g[j] += (g[j] - yi[j] * gy) * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
  double acc = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  return make_node(Tensor::scalar(acc), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->ensure_grad();
    const double gv = n.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
  });
}

Var mean_all(const Var& a) {
  check(a->value.numel() > 0, "mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var mse(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "mse: shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  check(a->value.numel() > 0, "mse: empty tensors");
  const int64_t m = a->value.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double d = a->value[i] - b->value[i];
    acc += d * d;
  }
  return make_node(Tensor::scalar(acc / static_cast<double>(m)), {a, b}, [a, b, m](Node& n) {
    const double k = 2.0 * n.grad[0] / static_cast<double>(m);
    if (a->requires_grad) {
      Tensor& g = a->ensure_grad();
      for (int64_t i = 0; i < m; ++i) g[i] += k * (a->value[i] - b->value[i]);
    }
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      for (int64_t i = 0; i < m; ++i) g[i] -= k * (a->value[i] - b->value[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// neural ops
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t N, Ci, H, W, Co, kh, kw, Ho, Wo;
  int stride, pad;
};

// cols[Ci*kh*kw, Ho*Wo] for one sample.
void im2col(const double* x, const ConvDims& d, double* cols) {
  const int64_t P = d.Ho * d.Wo;
  for (int64_t ci = 0; ci < d.Ci; ++ci) {
    const double* xc = x + ci * d.H * d.W;
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        double* row = cols + ((ci * d.kh + ki) * d.kw + kj) * P;
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          const int64_t ih = oh * d.stride - d.pad + ki;
          double* out = row + oh * d.Wo;
          if (ih < 0 || ih >= d.H) {
            std::fill_n(out, d.Wo, 0.0);
            continue;
          }
          const double* xrow = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.Wo; ++ow) {
            const int64_t iw = ow * d.stride - d.pad + kj;
            out[ow] = (iw >= 0 && iw < d.W) ? xrow[iw] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter of im2col's gather: gx += col2im(gcols).
void col2im_acc(const double* gcols, const ConvDims& d, double* gx) {
  const int64_t P = d.Ho * d.Wo;
  for (int64_t ci = 0; ci < d.Ci; ++ci) {
    double* xc = gx + ci * d.H * d.W;
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const double* row = gcols + ((ci * d.kh + ki) * d.kw + kj) * P;
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          const int64_t ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.H) continue;
          double* xrow = xc + ih * d.W;
          const double* in = row + oh * d.Wo;
          for (int64_t ow = 0; ow < d.Wo; ++ow) {
            const int64_t iw = ow * d.stride - d.pad + kj;
            if (iw >= 0 && iw < d.W) xrow[iw] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check(x->value.rank() == 4, "conv2d: x must be [N,Ci,H,W]");
  check(w->value.rank() == 4, "conv2d: w must be [Co,Ci,kh,kw]");
  check(b->value.rank() == 1, "conv2d: b must be [Co]");
  check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  ConvDims d;
  d.N = x->value.dim(0);
  d.Ci = x->value.dim(1);
  d.H = x->value.dim(2);
  d.W = x->value.dim(3);
  d.Co = w->value.dim(0);
  d.kh = w->value.dim(2);
  d.kw = w->value.dim(3);
  d.stride = stride;
  d.pad = pad;
  check(w->value.dim(1) == d.Ci, "conv2d: channel mismatch");
  check(b->value.dim(0) == d.Co, "conv2d: bias length mismatch");
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  check(d.Ho >= 1 && d.Wo >= 1, "conv2d: kernel larger than padded input");

  const int64_t K = d.Ci * d.kh * d.kw;
  const int64_t P = d.Ho * d.Wo;
  Tensor out({d.N, d.Co, d.Ho, d.Wo});
  Tensor cols({K, P});
  for (int64_t n_i = 0; n_i < d.N; ++n_i) {
    im2col(x->value.data() + n_i * d.Ci * d.H * d.W, d, cols.data());
    double* y = out.data() + n_i * d.Co * P;
    for (int64_t co = 0; co < d.Co; ++co) std::fill_n(y + co * P, P, b->value[co]);
    gemm_acc(w->value.data(), cols.data(), y, d.Co, K, P);
  }

  return make_node(std::move(out), {x, w, b}, [x, w, b, d, K, P](Node& n) {
    Tensor cols({K, P});
    Tensor gcols({K, P});
    for (int64_t n_i = 0; n_i < d.N; ++n_i) {
      const double* g = n.grad.data() + n_i * d.Co * P;
      const bool need_cols = w->requires_grad;
      if (need_cols) im2col(x->value.data() + n_i * d.Ci * d.H * d.W, d, cols.data());
      if (w->requires_grad) {
        // gw[co,k] += sum_p g[co,p] * cols[k,p]
        gemm_nt_acc(g, cols.data(), w->ensure_grad().data(), d.Co, P, K);
      }
      if (b->requires_grad) {
        Tensor& gb = b->ensure_grad();
        for (int64_t co = 0; co < d.Co; ++co) {
          double acc = 0.0;
          const double* gc = g + co * P;
          for (int64_t p = 0; p < P; ++p) acc += gc[p];
          gb[co] += acc;
        }
      }
      if (x->requires_grad) {
        // gcols[k,p] = sum_co w[co,k] * g[co,p]
        std::fill_n(gcols.data(), K * P, 0.0);
        for (int64_t co = 0; co < d.Co; ++co) {
          const double* w_row = w->value.data() + co * K;
          const double* gc = g + co * P;
          for (int64_t k = 0; k < K; ++k) {
            const double wv = w_row[k];
            if (wv == 0.0) continue;
            double* gr = gcols.data() + k * P;
            for (int64_t p = 0; p < P; ++p) gr[p] += wv * gc[p];
          }
        }
        col2im_acc(gcols.data(), d, x->ensure_grad().data() + n_i * d.Ci * d.H * d.W);
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               BatchNormState* state, bool training, double eps) {
  check(x->value.rank() == 2 || x->value.rank() == 4, "batch_norm: [N,C] or [N,C,H,W] input required");
  const int64_t N = x->value.dim(0);
  const int64_t C = x->value.dim(1);
  const int64_t S = x->value.numel() / (N * C);
  check(gamma->value.rank() == 1 && gamma->value.dim(0) == C, "batch_norm: gamma size mismatch");
  check(beta->value.rank() == 1 && beta->value.dim(0) == C, "batch_norm: beta size mismatch");
  check(training || state != nullptr, "batch_norm: eval mode requires running statistics");
  if (state != nullptr) {
    check(state->running_mean.numel() == C && state->running_var.numel() == C,
          "batch_norm: running statistics size mismatch");
  }

  const int64_t m = N * S;
  Tensor mean({C}), var({C});
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t n_i = 0; n_i < N; ++n_i) {
        const double* p = x->value.data() + (n_i * C + c) * S;
        for (int64_t s = 0; s < S; ++s) acc += p[s];
      }
      mean[c] = acc / static_cast<double>(m);
    }
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t n_i = 0; n_i < N; ++n_i) {
        const double* p = x->value.data() + (n_i * C + c) * S;
        for (int64_t s = 0; s < S; ++s) {
          const double d = p[s] - mean[c];
          acc += d * d;
        }
      }
      var[c] = acc / static_cast<double>(m);
    }
    if (state != nullptr) {
      const double mom = state->momentum;
      for (int64_t c = 0; c < C; ++c) {
        state->running_mean[c] = (1.0 - mom) * state->running_mean[c] + mom * mean[c];
        state->running_var[c] = (1.0 - mom) * state->running_var[c] + mom * var[c];
      }
    }
  } else {
    mean = state->running_mean;
    var = state->running_var;
  }

  Tensor inv_std({C});
  for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  Tensor xhat(x->value.shape());
  Tensor out(x->value.shape());
  for (int64_t n_i = 0; n_i < N; ++n_i) {
    for (int64_t c = 0; c < C; ++c) {
      const double* p = x->value.data() + (n_i * C + c) * S;
      double* xh = xhat.data() + (n_i * C + c) * S;
      double* o = out.data() + (n_i * C + c) * S;
      const double mu = mean[c], is = inv_std[c];
      const double g = gamma->value[c], bt = beta->value[c];
      for (int64_t s = 0; s < S; ++s) {
        xh[s] = (p[s] - mu) * is;
        o[s] = g * xh[s] + bt;
      }
    }
  }

  return make_node(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat, inv_std, training, N, C, S, m](Node& n) {
    if (gamma->requires_grad || beta->requires_grad) {
      for (int64_t c = 0; c < C; ++c) {
        double dg = 0.0, db = 0.0;
        for (int64_t n_i = 0; n_i < N; ++n_i) {
          const double* g = n.grad.data() + (n_i * C + c) * S;
          const double* xh = xhat.data() + (n_i * C + c) * S;
          for (int64_t s = 0; s < S; ++s) {
            dg += g[s] * xh[s];
            db += g[s];
          }
        }
        if (gamma->requires_grad) gamma->ensure_grad()[c] += dg;
        if (beta->requires_grad) beta->ensure_grad()[c] += db;
      }
    }
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    if (!training) {
      for (int64_t n_i = 0; n_i < N; ++n_i) {
        for (int64_t c = 0; c < C; ++c) {
          const double k = gamma->value[c] * inv_std[c];
          const double* g = n.grad.data() + (n_i * C + c) * S;
          double* gp = gx.data() + (n_i * C + c) * S;
          for (int64_t s = 0; s < S; ++s) gp[s] += k * g[s];
        }
      }
      return;
    }
    // Batch-statistics backward: gradient flows through the mean/var terms.
    for (int64_t c = 0; c < C; ++c) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      const double gch = gamma->value[c];
      for (int64_t n_i = 0; n_i < N; ++n_i) {
        const double* g = n.grad.data() + (n_i * C + c) * S;
        const double* xh = xhat.data() + (n_i * C + c) * S;
        for (int64_t s = 0; s < S; ++s) {
          const double dxh = g[s] * gch;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[s];
        }
      }
      const double inv_m = 1.0 / static_cast<double>(m);
      for (int64_t n_i = 0; n_i < N; ++n_i) {
        const double* g = n.grad.data() + (n_i * C + c) * S;
        const double* xh = xhat.data() + (n_i * C + c) * S;
        double* gp = gx.data() + (n_i * C + c) * S;
        for (int64_t s = 0; s < S; ++s) {
          const double dxh = g[s] * gch;
          gp[s] += inv_std[c] * (dxh - inv_m * sum_dxhat - xh[s] * inv_m * sum_dxhat_xhat);
        }
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  check(x->value.rank() == 2, "softmax_rows: [N,M] input required");
  const int64_t N = x->value.dim(0), M = x->value.dim(1);
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < N; ++i) {
    const double* row = x->value.data() + i * M;
    double* o = out.data() + i * M;
    double mx = row[0];
    for (int64_t j = 1; j < M; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < M; ++j) {
      o[j] = std::exp(row[j] - mx);
      denom += o[j];
    }
    for (int64_t j = 0; j < M; ++j) o[j] /= denom;
  }
  Tensor y = out;
  return make_node(std::move(out), {x}, [x, y, N, M](Node& n) {
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    for (int64_t i = 0; i < N; ++i) {
      const double* g = n.grad.data() + i * M;
      const double* yi = y.data() + i * M;
      double s = 0.0;
      for (int64_t j = 0; j < M; ++j) s += g[j] * yi[j];
      double* gp = gx.data() + i * M;
      for (int64_t j = 0; j < M; ++j) gp[j] += yi[j] * (g[j] - s);
    }
  });
}

namespace {

// Flattened spatial view [N,C,P] of a rank-3 or rank-4 tensor.
void flat_dims(const Tensor& t, int64_t& N, int64_t& C, int64_t& P) {
  check(t.rank() == 3 || t.rank() == 4, "attention op: [N,C,P] or [N,C,h,w] input required");
  N = t.dim(0);
  C = t.dim(1);
  P = t.numel() / (N * C);
}

}  // namespace

Var attn_scores(const Var& reduced, const Var& attr) {
  int64_t N, C, P;
  flat_dims(reduced->value, N, C, P);
  const bool per_row = attr->value.rank() == 2;
  if (per_row) {
    check(attr->value.dim(0) == N && attr->value.dim(1) == C, "attn_scores: attr rows mismatch");
  } else {
    check(attr->value.rank() == 1 && attr->value.dim(0) == C, "attn_scores: attr length mismatch");
  }
  const double k = 1.0 / std::sqrt(static_cast<double>(C));
  Tensor out({N, P});
  for (int64_t n_i = 0; n_i < N; ++n_i) {
    const double* a = attr->value.data() + (per_row ? n_i * C : 0);
    double* o = out.data() + n_i * P;
    std::fill_n(o, P, 0.0);
    for (int64_t c = 0; c < C; ++c) {
      const double av = a[c] * k;
      const double* r = reduced->value.data() + (n_i * C + c) * P;
      for (int64_t p = 0; p < P; ++p) o[p] += av * r[p];
    }
  }
  return make_node(std::move(out), {reduced, attr}, [reduced, attr, N, C, P, k, per_row](Node& n) {
    for (int64_t n_i = 0; n_i < N; ++n_i) {
      const double* g = n.grad.data() + n_i * P;
      const double* a = attr->value.data() + (per_row ? n_i * C : 0);
      if (reduced->requires_grad) {
        Tensor& gr = reduced->ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          const double av = a[c] * k;
          double* grp = gr.data() + (n_i * C + c) * P;
          for (int64_t p = 0; p < P; ++p) grp[p] += av * g[p];
        }
      }
      if (attr->requires_grad) {
        Tensor& ga = attr->ensure_grad();
        double* gap = ga.data() + (per_row ? n_i * C : 0);
        for (int64_t c = 0; c < C; ++c) {
          const double* r = reduced->value.data() + (n_i * C + c) * P;
          double acc = 0.0;
          for (int64_t p = 0; p < P; ++p) acc += g[p] * r[p];
          gap[c] += k * acc;
        }
      }
    }
  });
}

Var attn_pool(const Var& reduced, const Var& weights) {
  int64_t N, C, P;
  flat_dims(reduced->value, N, C, P);
  check(weights->value.rank() == 2 && weights->value.dim(0) == N && weights->value.dim(1) == P,
        "attn_pool: weights must be [N,P]");
  Tensor out({N, C});
  for (int64_t n_i = 0; n_i < N; ++n_i) {
    const double* wv = weights->value.data() + n_i * P;
    for (int64_t c = 0; c < C; ++c) {
      const double* r = reduced->value.data() + (n_i * C + c) * P;
      double acc = 0.0;
      for (int64_t p = 0; p < P; ++p) acc += r[p] * wv[p];
      out.at2(n_i, c) = acc;
    }
  }
  return make_node(std::move(out), {reduced, weights}, [reduced, weights, N, C, P](Node& n) {
    for (int64_t n_i = 0; n_i < N; ++n_i) {
      const double* g = n.grad.data() + n_i * C;
      const double* wv = weights->value.data() + n_i * P;
      if (reduced->requires_grad) {
        Tensor& gr = reduced->ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          double* grp = gr.data() + (n_i * C + c) * P;
          for (int64_t p = 0; p < P; ++p) grp[p] += g[c] * wv[p];
        }
      }
      if (weights->requires_grad) {
        Tensor& gw = weights->ensure_grad();
        double* gwp = gw.data() + n_i * P;
        for (int64_t c = 0; c < C; ++c) {
          const double* r = reduced->value.data() + (n_i * C + c) * P;
          for (int64_t p = 0; p < P; ++p) gwp[p] += g[c] * r[p];
        }
      }
    }
  });
}

Var info_nce_from_gram(const Var& sims, double tau) {
  check(sims->value.rank() == 2 && sims->value.dim(0) == sims->value.dim(1),
        "info_nce: square similarity matrix required");
  check(tau > 0.0, "info_nce: temperature must be positive");
  const int64_t R = sims->value.dim(0);
  check(R >= 2 && R % 2 == 0, "info_nce: row count must be even and >= 2");
  const int64_t B = R / 2;

  Tensor probs({R, R});  // softmax over non-self entries, zero on the diagonal
  double loss = 0.0;
  for (int64_t i = 0; i < R; ++i) {
    const int64_t pos = (i + B) % R;
    const double* s = sims->value.data() + i * R;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < R; ++j)
      if (j != i) mx = std::max(mx, s[j] / tau);
    double denom = 0.0;
    double* p = probs.data() + i * R;
    for (int64_t j = 0; j < R; ++j) {
      if (j == i) continue;
      p[j] = std::exp(s[j] / tau - mx);
      denom += p[j];
    }
    for (int64_t j = 0; j < R; ++j)
      if (j != i) p[j] /= denom;
    loss += std::log(denom) - (s[pos] / tau - mx);
  }
  loss /= static_cast<double>(R);

  return make_node(Tensor::scalar(loss), {sims}, [sims, probs, R, B, tau](Node& n) {
    if (!sims->requires_grad) return;
    Tensor& gs = sims->ensure_grad();
    const double k = n.grad[0] / (static_cast<double>(R) * tau);
    for (int64_t i = 0; i < R; ++i) {
      const int64_t pos = (i + B) % R;
      const double* p = probs.data() + i * R;
      double* g = gs.data() + i * R;
      for (int64_t j = 0; j < R; ++j) {
        if (j == i) continue;
        g[j] += k * (p[j] - (j == pos ? 1.0 : 0.0));
      }
    }
  });
}

}  // namespace mclfir::ad
