#include "mclfir/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mclfir::verify {

std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> point, double step) {
  if (step <= 0.0) throw std::invalid_argument("fd_gradient: step must be positive");
  std::vector<double> grad(point.size());
  for (size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + step;
    const double fp = f(point);
    point[i] = saved - step;
    const double fm = f(point);
    point[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("fd_gradient: non-finite evaluation");
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

GradCheckReport check_gradient(const std::string& operation,
                               const std::function<double(const std::vector<double>&)>& f,
                               const std::vector<double>& point,
                               const std::vector<double>& analytic,
                               double step) {
  if (point.size() != analytic.size())
    throw std::invalid_argument("check_gradient: gradient size mismatch");
  const std::vector<double> numeric = fd_gradient(f, point, step);
  GradCheckReport report;
  report.operation = operation;
  report.step = step;
  for (size_t i = 0; i < numeric.size(); ++i) {
    const double denom = std::max(1.0, std::abs(analytic[i]) + std::abs(numeric[i]));
    report.max_rel_err = std::max(report.max_rel_err, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return report;
}

double naive_info_nce(const Tensor& anchors, const Tensor& positives, double tau) {
  if (anchors.rank() != 2 || !anchors.same_shape(positives))
    throw std::invalid_argument("naive_info_nce: equal [B,D] inputs required");
  if (tau <= 0.0) throw std::invalid_argument("naive_info_nce: temperature must be positive");
  const int64_t b = anchors.dim(0);
  const int64_t d = anchors.dim(1);
  if (b < 1) throw std::invalid_argument("naive_info_nce: empty batch");

  // Stack rows, normalize each with its own loop.
  std::vector<std::vector<double>> z;
  z.reserve(static_cast<size_t>(2 * b));
  for (int64_t pass = 0; pass < 2; ++pass) {
    const Tensor& src = pass == 0 ? anchors : positives;
    for (int64_t i = 0; i < b; ++i) {
      std::vector<double> row(static_cast<size_t>(d));
      double sq = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        row[static_cast<size_t>(j)] = src.at2(i, j);
        sq += row[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
      }
      const double norm = std::sqrt(sq);
      if (norm == 0.0) throw std::domain_error("naive_info_nce: zero-norm row");
      for (auto& v : row) v /= norm;
      z.push_back(std::move(row));
    }
  }

  const int64_t rows = 2 * b;
  double total = 0.0;
  for (int64_t i = 0; i < rows; ++i) {
    const int64_t pos = (i + b) % rows;
    double numer = 0.0;
    double denom = 0.0;
    for (int64_t j = 0; j < rows; ++j) {
      if (j == i) continue;
      double sim = 0.0;
      for (int64_t k = 0; k < d; ++k)
        sim += z[static_cast<size_t>(i)][static_cast<size_t>(k)] *
               z[static_cast<size_t>(j)][static_cast<size_t>(k)];
      const double e = std::exp(sim / tau);
      denom += e;
      if (j == pos) numer = e;
    }
    total += -std::log(numer / denom);
  }
  return total / static_cast<double>(rows);
}

double closed_form_ema(double theta0, double theta_s, double beta, int64_t steps) {
  if (steps < 0) throw std::invalid_argument("closed_form_ema: negative step count");
  const double bt = std::pow(beta, static_cast<double>(steps));
  return bt * theta0 + (1.0 - bt) * theta_s;
}

double naive_average_precision(const std::vector<int>& relevance) {
  if (relevance.empty()) throw std::invalid_argument("naive_average_precision: empty ranking");
  int64_t hits = 0;
  double acc = 0.0;
  for (size_t k = 0; k < relevance.size(); ++k) {
    if (relevance[k]) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return hits == 0 ? 0.0 : acc / static_cast<double>(hits);
}

double naive_map(const std::vector<std::string>& ids,
                 const std::vector<std::vector<double>>& embeddings,
                 const std::vector<std::string>& subclasses) {
  const size_t n = ids.size();
  if (n < 2 || embeddings.size() != n || subclasses.size() != n)
    throw std::invalid_argument("naive_map: need >= 2 consistent items");

  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
  };

  double total = 0.0;
  for (size_t q = 0; q < n; ++q) {
    std::vector<size_t> gallery;
    for (size_t i = 0; i < n; ++i)
      if (i != q) gallery.push_back(i);
    std::stable_sort(gallery.begin(), gallery.end(), [&](size_t a, size_t b) {
      const double sa = cosine(embeddings[q], embeddings[a]);
      const double sb = cosine(embeddings[q], embeddings[b]);
      if (sa != sb) return sa > sb;
      return ids[a] < ids[b];
    });
    std::vector<int> rel;
    rel.reserve(gallery.size());
    for (size_t g : gallery) rel.push_back(subclasses[g] == subclasses[q] ? 1 : 0);
    total += naive_average_precision(rel);
  }
  return total / static_cast<double>(n);
}

double random_ranking_map(const std::vector<std::pair<int64_t, int64_t>>& relevant_and_gallery,
                          Rng& rng, int trials) {
  if (relevant_and_gallery.empty() || trials < 1)
    throw std::invalid_argument("random_ranking_map: need queries and trials");
  double total = 0.0;
  for (int t = 0; t < trials; ++t) {
    double per_query = 0.0;
    for (const auto& [relevant, gallery] : relevant_and_gallery) {
      std::vector<int> flags(static_cast<size_t>(gallery), 0);
      for (int64_t i = 0; i < relevant; ++i) flags[static_cast<size_t>(i)] = 1;
      // Fisher-Yates with the project RNG.
      for (int64_t i = gallery - 1; i > 0; --i) {
        const int64_t j = rng.below(i + 1);
        std::swap(flags[static_cast<size_t>(i)], flags[static_cast<size_t>(j)]);
      }
      per_query += naive_average_precision(flags);
    }
    total += per_query / static_cast<double>(relevant_and_gallery.size());
  }
  return total / static_cast<double>(trials);
}

}  // namespace mclfir::verify
