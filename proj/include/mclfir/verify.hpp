#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mclfir/rng.hpp"
#include "mclfir/tensor.hpp"

namespace mclfir::verify {

/// Result of comparing an analytic gradient against central differences.
struct GradCheckReport {
  std::string operation;
  double max_rel_err = 0.0;
  double step = 0.0;
  std::string precision = "double";
  bool pass(double tol) const { return max_rel_err < tol; }
};

/// Central finite differences of a scalar function, coordinate by coordinate.
/// Throws if any evaluation is non-finite.
std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> point, double step);

/// Relative error between an analytic gradient and fd_gradient at `point`.
GradCheckReport check_gradient(const std::string& operation,
                               const std::function<double(const std::vector<double>&)>& f,
                               const std::vector<double>& point,
                               const std::vector<double>& analytic,
                               double step = 1e-5);

/// InfoNCE written as explicit per-row scalar loops: no shared similarity
/// matrix, its own normalization. Paired with the production loss as a
/// mutual check; shares no code with it.
double naive_info_nce(const Tensor& anchors, const Tensor& positives, double tau);

/// Teacher parameter after `steps` momentum updates against a frozen
/// student: beta^T * theta0 + (1 - beta^T) * theta_s.
double closed_form_ema(double theta0, double theta_s, double beta, int64_t steps);

/// Non-interpolated average precision computed directly from ordered
/// relevance flags; independent of the evaluation module.
double naive_average_precision(const std::vector<int>& relevance);

/// Brute-force mAP: builds every query ranking by scanning similarities with
/// plain loops (descending similarity, ascending id on ties).
double naive_map(const std::vector<std::string>& ids,
                 const std::vector<std::vector<double>>& embeddings,
                 const std::vector<std::string>& subclasses);

/// Monte-Carlo mAP of a uniformly random ranking with the given per-query
/// gallery sizes and relevant counts.
double random_ranking_map(const std::vector<std::pair<int64_t, int64_t>>& relevant_and_gallery,
                          Rng& rng, int trials);

}  // namespace mclfir::verify
