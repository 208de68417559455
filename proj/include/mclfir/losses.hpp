#pragma once

#include <utility>
#include <vector>

#include "mclfir/autodiff.hpp"
#include "mclfir/tensor.hpp"

namespace mclfir::losses {

struct Hyperparams {
  double tau = 0.3;        // InfoNCE temperature
  double lambda_kd = 1e-4; // distillation weight
  double margin = 0.2;     // triplet hinge margin
  double beta = 0.999;     // teacher momentum
  int batch = 32;

  void validate() const;
};

// Graph-building forms. Embedding rows are L2-normalized internally.

/// InfoNCE over B anchor rows and their B positives; each of the 2B stacked
/// rows must pick its partner among the 2B-1 other rows at temperature tau.
ad::Var info_nce(const ad::Var& anchors, const ad::Var& positives, double tau);

/// Same loss when the [2B,D] stack (anchors then positives) already exists.
ad::Var info_nce_stacked(const ad::Var& stacked, double tau);

/// Sum over pairs of the per-pair mean squared element difference. The
/// teacher side is expected to be gradient-free.
ad::Var distill_mse(const std::vector<std::pair<ad::Var, ad::Var>>& pairs);

/// l_ins + lambda_kd * l_kd.
ad::Var total_loss(const ad::Var& l_ins, const ad::Var& l_kd, double lambda_kd);

/// Cosine similarity of two embedding vectors.
ad::Var similarity(const ad::Var& a, const ad::Var& b);

/// max(0, margin + sim(anchor,negative) - sim(anchor,positive)).
ad::Var triplet_loss(const ad::Var& anchor, const ad::Var& positive, const ad::Var& negative,
                     double margin);

/// Batched hinge over [N,D] rows, averaged over rows.
ad::Var triplet_loss_rows(const ad::Var& anchors, const ad::Var& positives,
                          const ad::Var& negatives, double margin);

// Value-level conveniences.
double info_nce_value(const Tensor& anchors, const Tensor& positives, double tau);
double distill_mse_value(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher);
double total_loss_value(double l_ins, double l_kd, double lambda_kd);
double similarity_value(const Tensor& a, const Tensor& b);
double triplet_loss_value(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                          double margin);

}  // namespace mclfir::losses
