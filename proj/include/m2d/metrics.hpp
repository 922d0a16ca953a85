#pragma once
// Classification, fairness and correlation metrics over hard labels.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "m2d/autodiff.hpp"

namespace m2d::metrics {

using ad::Matrix;

class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row_span(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

struct ClassificationReport {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> per_class_total;
  std::vector<std::size_t> per_class_correct;
};

inline ClassificationReport classification_report(std::span<const int> pred, std::span<const int> y,
                                                  const std::vector<bool>& mask, int num_classes) {
  ClassificationReport r;
  r.per_class_total.assign(static_cast<std::size_t>(num_classes), 0);
  r.per_class_correct.assign(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask[i]) continue;
    ++r.total;
    ++r.per_class_total[static_cast<std::size_t>(y[i])];
    if (pred[i] == y[i]) {
      ++r.correct;
      ++r.per_class_correct[static_cast<std::size_t>(y[i])];
    }
  }
  if (r.total == 0) throw MetricError("accuracy: empty mask");
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

inline double accuracy(std::span<const int> pred, std::span<const int> y, const std::vector<bool>& mask) {
  if (pred.size() != y.size() || mask.size() != y.size()) throw std::invalid_argument("accuracy: length mismatch");
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask[i]) continue;
    ++total;
    correct += pred[i] == y[i];
  }
  if (total == 0) throw MetricError("accuracy: empty mask");
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// |P(yhat=1 | s=1) - P(yhat=1 | s=0)| over masked nodes.
inline double demographic_parity(std::span<const int> pred, std::span<const int> s, const std::vector<bool>& mask) {
  double pos[2] = {0, 0}, cnt[2] = {0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const int g = s[i] ? 1 : 0;
    cnt[g] += 1;
    pos[g] += pred[i] == 1;
  }
  if (cnt[0] == 0 || cnt[1] == 0) throw MetricError("demographic_parity: a sensitive group is empty");
  return std::abs(pos[1] / cnt[1] - pos[0] / cnt[0]);
}

/// |P(yhat=1 | s=1, y=1) - P(yhat=1 | s=0, y=1)| over masked nodes.
inline double equal_opportunity(std::span<const int> pred, std::span<const int> s, std::span<const int> y,
                                const std::vector<bool>& mask) {
  double pos[2] = {0, 0}, cnt[2] = {0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i] || y[i] != 1) continue;
    const int g = s[i] ? 1 : 0;
    cnt[g] += 1;
    pos[g] += pred[i] == 1;
  }
  if (cnt[0] == 0 || cnt[1] == 0) throw MetricError("equal_opportunity: an (s, y=1) stratum is empty");
  return std::abs(pos[1] / cnt[1] - pos[0] / cnt[0]);
}

struct FairnessReport {
  double dp = 0.0;
  double eqop = 0.0;
  std::size_t group0 = 0, group1 = 0;
};

inline FairnessReport fairness_report(std::span<const int> pred, std::span<const int> s, std::span<const int> y,
                                      const std::vector<bool>& mask) {
  FairnessReport r;
  r.dp = demographic_parity(pred, s, mask);
  r.eqop = equal_opportunity(pred, s, y, mask);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (mask[i]) (s[i] ? r.group1 : r.group0)++;
  return r;
}

/// Sample Pearson correlation.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) throw MetricError("pearson: need at least two points");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw MetricError("pearson: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> r(v.size());
  for (std::size_t k = 0; k < idx.size();) {
    std::size_t e = k;
    while (e + 1 < idx.size() && v[idx[e + 1]] == v[idx[k]]) ++e;
    const double avg = 0.5 * static_cast<double>(k + e) + 1.0;
    for (std::size_t t = k; t <= e; ++t) r[idx[t]] = avg;
    k = e + 1;
  }
  return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  return pearson(ra, rb);
}

/// exp(-||zi - zj||^2 / (2 sigma^2))
inline double rbf_similarity(std::span<const double> zi, std::span<const double> zj, double sigma = 1.0) {
  if (zi.size() != zj.size()) throw std::invalid_argument("rbf_similarity: length mismatch");
  if (!(sigma > 0.0)) throw std::invalid_argument("rbf_similarity: sigma must be positive");
  double d2 = 0.0;
  for (std::size_t k = 0; k < zi.size(); ++k) d2 += (zi[k] - zj[k]) * (zi[k] - zj[k]);
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

}  // namespace m2d::metrics
