#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "cldta/gradcore.hpp"

namespace cldta {

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeMismatch("cosine_similarity: length mismatch");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (!(nu > 0) || !(nv > 0)) throw NumericError("cosine_similarity: zero-norm input");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// Two index-aligned views of one batch projected into the contrastive space.
struct ContrastiveBatch {
  MatD z_a;
  MatD z_b;
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  double temperature = 0.5;
  // Only score matched rows (i, i) instead of the full N x N pair matrix.
  bool matched_only = false;
};

namespace detail {

inline double bce_logit(double x, double y) {
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

inline void check_contrastive(Index na, Index nb, Index da, Index db, std::size_t la, std::size_t lb, double tau,
                              bool matched) {
  if (na < 1 || nb < 1) throw InvalidArgument("contrastive_loss: empty batch");
  if (da != db) throw ShapeMismatch("contrastive_loss: projection widths differ");
  if (static_cast<Index>(la) != na || static_cast<Index>(lb) != nb)
    throw ShapeMismatch("contrastive_loss: label count does not match rows");
  if (matched && na != nb) throw ShapeMismatch("contrastive_loss: matched mode needs equal batch sizes");
  if (!(tau > 0)) throw InvalidArgument("contrastive_loss: temperature must be positive");
}

}  // namespace detail

// Temperature-scaled binary cross-entropy over cosine similarities. Every
// pair (i, j) is scored: target 1 when labels_a[i] == labels_b[j].
inline double contrastive_loss(const ContrastiveBatch& batch) {
  const Index n = batch.z_a.rows(), m = batch.z_b.rows();
  detail::check_contrastive(n, m, batch.z_a.cols(), batch.z_b.cols(), batch.labels_a.size(), batch.labels_b.size(),
                            batch.temperature, batch.matched_only);
  double acc = 0;
  std::size_t count = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      if (batch.matched_only && i != j) continue;
      const double s = cosine_similarity(std::span<const double>(batch.z_a.row(i).data(), batch.z_a.cols()),
                                         std::span<const double>(batch.z_b.row(j).data(), batch.z_b.cols()));
      const double y = batch.labels_a[i] == batch.labels_b[j] ? 1.0 : 0.0;
      acc += detail::bce_logit(s / batch.temperature, y);
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

inline double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw InvalidArgument("cross_entropy: label out of range");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s) - logits[static_cast<std::size_t>(label)];
}

// Differentiable contrastive loss on projection rows z_a, z_b.
template <class T>
Var<T> contrastive_loss(const Var<T>& z_a, const Var<T>& z_b, const std::vector<int>& labels_a,
                        const std::vector<int>& labels_b, double temperature, bool matched_only = false) {
  detail::check_contrastive(z_a.rows(), z_b.rows(), z_a.cols(), z_b.cols(), labels_a.size(), labels_b.size(),
                            temperature, matched_only);
  Var<T> na = normalize_rows(z_a);
  Var<T> nb = normalize_rows(z_b);
  Var<T> logits = scale(matmul(na, transpose(nb)), T(1.0 / temperature));
  Mat<T> targets(z_a.rows(), z_b.rows());
  for (Index i = 0; i < targets.rows(); ++i)
    for (Index j = 0; j < targets.cols(); ++j) targets(i, j) = labels_a[i] == labels_b[j] ? T(1) : T(0);
  if (!matched_only) return bce_with_logits_mean(logits, targets);
  Mat<T> w = Mat<T>::Identity(targets.rows(), targets.cols());
  return bce_with_logits_mean(logits, targets, w);
}

}  // namespace cldta
