#pragma once
// The four training losses: supervised cross-entropy, temperature-scaled
// distillation, learned-feature diversity and learned-structure regularity.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "m2d/autodiff.hpp"

namespace m2d {

using ad::Matrix;
using ad::Tensor;

namespace detail {

inline std::vector<std::size_t> require_mask(const std::vector<bool>& mask, std::size_t n, const char* who) {
  if (mask.size() != n) throw ad::ShapeError(std::string(who) + ": mask length");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) idx.push_back(i);
  if (idx.empty()) throw std::invalid_argument(std::string(who) + ": empty mask");
  return idx;
}

}  // namespace detail

/// Mean over masked nodes of -log softmax(logits)[y].
inline Tensor loss_cls(const Tensor& logits, std::span<const int> labels, const std::vector<bool>& mask) {
  auto idx = detail::require_mask(mask, logits.rows(), "loss_cls");
  Matrix onehot(idx.size(), logits.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const int y = labels[idx[r]];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) throw std::out_of_range("loss_cls: label out of range");
    onehot(r, static_cast<std::size_t>(y)) = 1.0;
  }
  Tensor logp = ad::row_log_softmax(ad::gather_rows(logits, std::move(idx)));
  const double m = static_cast<double>(onehot.rows());
  return ad::scale(ad::sum(ad::mul(logp, ad::constant(std::move(onehot)))), -1.0 / m);
}

/// tau^2 * mean over masked nodes of KL(softmax(teacher/tau) || softmax(student/tau)).
/// Teacher logits are constants.
inline Tensor loss_dis(const Tensor& student_logits, const Matrix& teacher_logits, double tau,
                       const std::vector<bool>& mask) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_dis: tau must be positive");
  if (!student_logits.value().same_shape(teacher_logits)) throw ad::ShapeError("loss_dis: logit shapes differ");
  auto idx = detail::require_mask(mask, student_logits.rows(), "loss_dis");
  // same log-softmax path for both sides, so identical logits give exactly 0
  auto log_probs = [&](const Tensor& logits) {
    return ad::row_log_softmax(ad::scale(ad::gather_rows(logits, idx), 1.0 / tau));
  };
  const Matrix logpt = log_probs(ad::constant(teacher_logits)).value();
  Matrix pt = logpt;
  for (double& v : pt.data()) v = std::exp(v);
  const double m = static_cast<double>(idx.size());
  Tensor logps = log_probs(student_logits);
  // sum p_t (log p_t - log p_s)
  Tensor kl = ad::sum(ad::mul(ad::constant(pt), ad::sub(ad::constant(logpt), logps)));
  return ad::scale(kl, tau * tau / m);
}

/// Mask selecting feature-correlation entries that involve a generated
/// column (index >= d), diagonal excluded.
inline Matrix diversity_mask(std::size_t d, std::size_t d_f) {
  const std::size_t t = d + d_f;
  Matrix m(t, t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) m(i, j) = (i >= d || j >= d) && i != j ? 1.0 : 0.0;
  return m;
}

/// K = Xbar^T Xbar where Xbar is x_tilde with every column l2-normalized.
inline Tensor feature_gram(const Tensor& x_tilde) {
  Tensor xn = ad::col_l2_normalize(x_tilde);
  return ad::matmul(ad::transpose(xn), xn);
}

/// lambda_div * ||M . K||_F^2 / (d + d_f)^2 for a gram matrix over d original
/// and d_f generated columns.
inline Tensor loss_div(const Tensor& gram, std::size_t d, double lambda_div) {
  if (gram.rows() != gram.cols() || gram.rows() < d) throw ad::ShapeError("loss_div: gram shape");
  const std::size_t t = gram.rows();
  const std::size_t d_f = t - d;
  Tensor masked = ad::mul(gram, ad::constant(diversity_mask(d, d_f)));
  return ad::scale(ad::frobenius_sq(masked), lambda_div / static_cast<double>(t * t));
}

/// -(lambda_deg / n) 1^T log(W 1) + (lambda_sparse / n^2) ||W||_F^2, with row
/// sums clamped at 1e-12 inside the log.
inline Tensor loss_graph(const Tensor& w, double lambda_deg, double lambda_sparse) {
  if (w.rows() != w.cols()) throw ad::ShapeError("loss_graph: W must be square");
  const double n = static_cast<double>(w.rows());
  Tensor degree = ad::scale(ad::sum(ad::log(ad::sum(w, 1))), -lambda_deg / n);
  Tensor sparse = ad::scale(ad::frobenius_sq(w), lambda_sparse / (n * n));
  return ad::add(degree, sparse);
}

}  // namespace m2d
