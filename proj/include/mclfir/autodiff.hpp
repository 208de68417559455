#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mclfir/tensor.hpp"

namespace mclfir::ad {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value in the computation graph. Ops allocate a fresh node holding the
/// forward result plus a closure that scatters the node's gradient into its
/// parents. Graphs are throwaway: built per step, freed when the last Var
/// goes out of scope.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by ensure_grad()
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad();
  bool has_grad() const { return !grad.empty(); }
};

Var leaf(Tensor value);      // trainable: participates in backward
Var constant(Tensor value);  // frozen input: backward prunes at it

/// Accumulates d(root)/d(leaf) into every reachable grad-requiring node.
/// Grads of reachable nodes are zeroed first; root must be scalar.
void backward(const Var& root);

double value_of(const Var& v);  // scalar nodes only

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var affine(const Var& a, double k, double c);  // k*a + c
Var tanh_op(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// ---- shape ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var vstack(const Var& a, const Var& b);              // along dim 0
Var slice_rows(const Var& a, int64_t r0, int64_t r1);  // [r0,r1) along dim 0
Var concat_cols(const Var& a, const Var& b);         // [N,A],[N,B] -> [N,A+B]
Var tile_rows(const Var& v, int64_t n);              // [D] -> [N,D]

// ---- linear algebra ----
/// x:[N,K], w:[M,K], b:[M] -> [N,M]; y = x w^T + b.
Var linear(const Var& x, const Var& w, const Var& b);
/// Gram matrix Z Z^T for Z:[N,D].
Var gram(const Var& z);
/// Row-wise dot product of equally shaped [N,D] -> [N].
Var rowwise_dot(const Var& a, const Var& b);
/// Dot product of two equally shaped tensors -> scalar.
Var dot(const Var& a, const Var& b);
/// L2-normalizes rows of [N,D] (or a single [D] vector).
/// Throws std::domain_error on an exactly zero-norm row.
Var l2_normalize_rows(const Var& x);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
/// Mean over elements of the squared difference -> scalar.
Var mse(const Var& a, const Var& b);

// ---- neural ops ----
/// x:[N,Ci,H,W], w:[Co,Ci,kh,kw], b:[Co]; zero padding, square stride.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// Running statistics owned by the layer; updated only in training mode.
struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
};

/// Per-channel batch normalization over [N,C,H,W] (or [N,C]).
/// Training mode normalizes by batch statistics and updates `state`;
/// eval mode normalizes by the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               BatchNormState* state, bool training, double eps = 1e-5);

/// Row-wise softmax over [N,M].
Var softmax_rows(const Var& x);

/// Compatibility scores: reduced [N,C,P] (or [N,C,h,w]) against an attribute
/// vector [C] or per-row matrix [N,C]; output [N,P], scaled by 1/sqrt(C).
Var attn_scores(const Var& reduced, const Var& attr);

/// Attention-weighted spatial pooling: reduced [N,C,P] x weights [N,P] -> [N,C].
Var attn_pool(const Var& reduced, const Var& weights);

/// InfoNCE over a stacked, already L2-normalized batch similarity matrix
/// S:[2B,2B]; positives sit B rows apart, self-similarity is excluded.
Var info_nce_from_gram(const Var& sims, double tau);

}  // namespace mclfir::ad
