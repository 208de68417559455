#include "mclfir/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace mclfir::losses {

void Hyperparams::validate() const {
  if (tau <= 0.0) throw std::invalid_argument("hyperparams: tau must be positive");
  if (lambda_kd < 0.0) throw std::invalid_argument("hyperparams: lambda_kd must be >= 0");
  if (margin < 0.0) throw std::invalid_argument("hyperparams: margin must be >= 0");
  if (beta < 0.0 || beta >= 1.0) throw std::invalid_argument("hyperparams: beta must be in [0,1)");
  if (batch < 1) throw std::invalid_argument("hyperparams: batch must be positive");
}

ad::Var info_nce(const ad::Var& anchors, const ad::Var& positives, double tau) {
  if (anchors->value.rank() != 2 || !anchors->value.same_shape(positives->value))
    throw std::invalid_argument("info_nce: anchors and positives must be equal [B,D] batches");
  if (anchors->value.dim(0) < 1) throw std::invalid_argument("info_nce: empty batch");
  if (tau <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");
  return info_nce_stacked(ad::vstack(anchors, positives), tau);
}

ad::Var info_nce_stacked(const ad::Var& stacked, double tau) {
  if (stacked->value.rank() != 2 || stacked->value.dim(0) % 2 != 0 || stacked->value.dim(0) < 2)
    throw std::invalid_argument("info_nce: stacked batch must be [2B,D] with B >= 1");
  if (tau <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");
  const ad::Var normalized = ad::l2_normalize_rows(stacked);
  return ad::info_nce_from_gram(ad::gram(normalized), tau);
}

ad::Var distill_mse(const std::vector<std::pair<ad::Var, ad::Var>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("distill_mse: empty pair list");
  ad::Var total;
  for (const auto& [student, teacher] : pairs) {
    ad::Var term = ad::mse(student, teacher);
    total = total ? ad::add(total, term) : term;
  }
  return total;
}

ad::Var total_loss(const ad::Var& l_ins, const ad::Var& l_kd, double lambda_kd) {
  return ad::add(l_ins, ad::scale(l_kd, lambda_kd));
}

ad::Var similarity(const ad::Var& a, const ad::Var& b) {
  if (a->value.rank() != 1 || !a->value.same_shape(b->value))
    throw std::invalid_argument("similarity: equal-dimension vectors required");
  return ad::dot(ad::l2_normalize_rows(a), ad::l2_normalize_rows(b));
}

ad::Var triplet_loss(const ad::Var& anchor, const ad::Var& positive, const ad::Var& negative,
                     double margin) {
  if (margin < 0.0) throw std::invalid_argument("triplet_loss: margin must be >= 0");
  const ad::Var s_pos = similarity(anchor, positive);
  const ad::Var s_neg = similarity(anchor, negative);
  return ad::relu(ad::affine(ad::sub(s_neg, s_pos), 1.0, margin));
}

ad::Var triplet_loss_rows(const ad::Var& anchors, const ad::Var& positives,
                          const ad::Var& negatives, double margin) {
  if (anchors->value.rank() != 2 || !anchors->value.same_shape(positives->value) ||
      !anchors->value.same_shape(negatives->value))
    throw std::invalid_argument("triplet_loss_rows: equal [N,D] batches required");
  if (margin < 0.0) throw std::invalid_argument("triplet_loss_rows: margin must be >= 0");
  const ad::Var na = ad::l2_normalize_rows(anchors);
  const ad::Var np = ad::l2_normalize_rows(positives);
  const ad::Var nn = ad::l2_normalize_rows(negatives);
  const ad::Var s_pos = ad::rowwise_dot(na, np);
  const ad::Var s_neg = ad::rowwise_dot(na, nn);
  return ad::mean_all(ad::relu(ad::affine(ad::sub(s_neg, s_pos), 1.0, margin)));
}

double info_nce_value(const Tensor& anchors, const Tensor& positives, double tau) {
  return ad::value_of(info_nce(ad::constant(anchors), ad::constant(positives), tau));
}

double distill_mse_value(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher) {
  if (student.size() != teacher.size())
    throw std::invalid_argument("distill_mse: list length mismatch");
  std::vector<std::pair<ad::Var, ad::Var>> pairs;
  pairs.reserve(student.size());
  for (size_t i = 0; i < student.size(); ++i)
    pairs.emplace_back(ad::constant(student[i]), ad::constant(teacher[i]));
  return ad::value_of(distill_mse(pairs));
}

double total_loss_value(double l_ins, double l_kd, double lambda_kd) {
  if (!std::isfinite(l_ins) || !std::isfinite(l_kd))
    throw std::invalid_argument("total_loss: non-finite loss terms");
  return l_ins + lambda_kd * l_kd;
}

double similarity_value(const Tensor& a, const Tensor& b) {
  return ad::value_of(similarity(ad::constant(a), ad::constant(b)));
}

double triplet_loss_value(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                          double margin) {
  return ad::value_of(
      triplet_loss(ad::constant(anchor), ad::constant(positive), ad::constant(negative), margin));
}

}  // namespace mclfir::losses
