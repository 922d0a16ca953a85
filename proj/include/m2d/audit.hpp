#pragma once
// Transparency analyses over distillation products: attention/feature
// alignment, learned-weight vs attention correlation, edge diffs, fidelity,
// the minimum-norm gradient-descent check and the softmax order check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2d/autodiff.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/metrics.hpp"

namespace m2d::audit {

using ad::Matrix;
using json = nlohmann::json;

class AuditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BinTable {
  std::vector<double> edges;  // n_bins + 1 boundaries over [0, 1]
  std::vector<double> mean_attention;
  std::vector<std::size_t> count;

  std::size_t bins() const { return count.size(); }
};

/// Directed pairs (u, v), u != v, with a nonzero adjacency entry.
inline std::vector<Edge> directed_edges(const Matrix& a) { return edge_list(a, true); }

/// RBF similarity of learned features on each edge, equal-width binned over
/// [0,1]; each bin reports the mean attention of its edges.
inline BinTable attention_alignment_bins(const Matrix& z, const Matrix& attention, const std::vector<Edge>& edges,
                                         std::size_t n_bins = 10, double sigma = 1.0) {
  if (n_bins < 2) throw std::invalid_argument("attention_alignment_bins: need at least two bins");
  if (edges.empty()) throw AuditError("attention_alignment_bins: no edges");
  BinTable t;
  t.edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) t.edges[b] = static_cast<double>(b) / static_cast<double>(n_bins);
  t.mean_attention.assign(n_bins, 0.0);
  t.count.assign(n_bins, 0);
  for (const Edge& e : edges) {
    const double sim = metrics::rbf_similarity(z.row_span(e.u), z.row_span(e.v), sigma);
    const auto b = std::min(static_cast<std::size_t>(sim * static_cast<double>(n_bins)), n_bins - 1);
    t.mean_attention[b] += attention(e.u, e.v);
    ++t.count[b];
  }
  for (std::size_t b = 0; b < n_bins; ++b)
    if (t.count[b]) t.mean_attention[b] /= static_cast<double>(t.count[b]);
  return t;
}

/// Spearman correlation of (bin index, bin mean) over nonempty bins.
/// Undefined (nullopt) when fewer than two bins are populated or every bin
/// mean is the same, e.g. all pairs at similarity ~1.
inline std::optional<double> bin_trend(const BinTable& t) {
  std::vector<double> idx, mean;
  for (std::size_t b = 0; b < t.bins(); ++b)
    if (t.count[b]) {
      idx.push_back(static_cast<double>(b));
      mean.push_back(t.mean_attention[b]);
    }
  if (idx.size() < 2) return std::nullopt;
  if (std::all_of(mean.begin(), mean.end(), [&](double m) { return m == mean.front(); })) return std::nullopt;
  return metrics::spearman(idx, mean);
}

/// Row-normalizes A~ over each node's nonzero entries and correlates the
/// normalized weights with attention across the given edges.
inline double weight_attention_correlation(const Matrix& a_tilde, const Matrix& attention, const std::vector<Edge>& edges) {
  if (edges.empty()) throw AuditError("weight_attention_correlation: no edges");
  std::vector<double> row_sum(a_tilde.rows(), 0.0);
  for (std::size_t u = 0; u < a_tilde.rows(); ++u)
    for (double v : a_tilde.row_span(u)) row_sum[u] += v;
  std::vector<double> w, alpha;
  for (const Edge& e : edges) {
    if (row_sum[e.u] == 0.0) continue;
    w.push_back(a_tilde(e.u, e.v) / row_sum[e.u]);
    alpha.push_back(attention(e.u, e.v));
  }
  return metrics::pearson(w, alpha);
}

// ---------------------------------------------------------------------------
// Edge diff

enum class EdgeChange { Added, Removed, Strengthened, Weakened };

inline const char* to_string(EdgeChange c) {
  switch (c) {
    case EdgeChange::Added: return "added";
    case EdgeChange::Removed: return "removed";
    case EdgeChange::Strengthened: return "strengthened";
    case EdgeChange::Weakened: return "weakened";
  }
  return "?";
}

struct ChangedEdge {
  std::size_t u = 0, v = 0;
  double old_w = 0.0, new_w = 0.0;
  EdgeChange category = EdgeChange::Added;
  int y_u = 0, y_v = 0;
  int s_u = -1, s_v = -1;  // -1 without a sensitive attribute
};

struct EdgeDiff {
  double add_thresh = 0.5;
  double remove_thresh = 0.1;
  std::vector<ChangedEdge> changes;
  /// category -> "y<a><b>/s<c><d>" -> count; pairs are ordered low-high for undirected graphs.
  std::map<std::string, std::map<std::string, std::size_t>> group_counts;

  std::size_t count(EdgeChange c) const {
    return static_cast<std::size_t>(std::count_if(changes.begin(), changes.end(), [c](const ChangedEdge& e) { return e.category == c; }));
  }
};

/// Classifies pair changes between the original adjacency and A~:
/// added (A = 0, A~ >= add_thresh), removed (A > 0, A~ <= remove_thresh),
/// strengthened / weakened (A > 0 and A~ - A beyond +/- add_thresh / 2).
inline EdgeDiff graph_diff(const Matrix& a, const Matrix& a_tilde, double add_thresh, double remove_thresh,
                           const std::vector<int>& labels, const std::optional<std::vector<int>>& sensitive,
                           bool directed = false) {
  if (!(add_thresh > 0 && add_thresh < 1) || !(remove_thresh > 0 && remove_thresh < 1))
    throw std::invalid_argument("graph_diff: thresholds must lie in (0,1)");
  if (!a.same_shape(a_tilde)) throw ad::ShapeError("graph_diff: shapes differ");
  EdgeDiff diff;
  diff.add_thresh = add_thresh;
  diff.remove_thresh = remove_thresh;
  const std::size_t n = a.rows();
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = directed ? 0 : u + 1; v < n; ++v) {
      if (u == v) continue;
      const double old_w = a(u, v), new_w = a_tilde(u, v);
      std::optional<EdgeChange> cat;
      if (old_w == 0.0) {
        if (new_w >= add_thresh) cat = EdgeChange::Added;
      } else if (new_w <= remove_thresh) {
        cat = EdgeChange::Removed;
      } else if (new_w - old_w > add_thresh / 2) {
        cat = EdgeChange::Strengthened;
      } else if (new_w - old_w < -add_thresh / 2) {
        cat = EdgeChange::Weakened;
      }
      if (!cat) continue;
      ChangedEdge c{u, v, old_w, new_w, *cat, labels[u], labels[v]};
      if (sensitive) {
        c.s_u = (*sensitive)[u];
        c.s_v = (*sensitive)[v];
      }
      int ya = c.y_u, yb = c.y_v, sa = c.s_u, sb = c.s_v;
      if (!directed) {
        if (ya > yb) std::swap(ya, yb);
        if (sa > sb) std::swap(sa, sb);
      }
      std::string key = "y" + std::to_string(ya) + std::to_string(yb);
      if (sensitive) key += "/s" + std::to_string(sa) + std::to_string(sb);
      ++diff.group_counts[to_string(*cat)][key];
      diff.changes.push_back(c);
    }
  return diff;
}

/// Fraction of masked nodes where student and teacher argmax agree.
inline double distillation_fidelity(const Matrix& student_logits, const Matrix& teacher_logits, const std::vector<bool>& mask) {
  if (!student_logits.same_shape(teacher_logits)) throw ad::ShapeError("distillation_fidelity: shapes differ");
  return metrics::accuracy(metrics::argmax_rows(student_logits), metrics::argmax_rows(teacher_logits), mask);
}

// ---------------------------------------------------------------------------
// Minimum-norm gradient descent check

struct MinNormResult {
  Matrix gd_solution;
  Matrix pinv_solution;
  double relative_gap = 0.0;
  bool rank_deficient = false;
};

namespace detail {

/// Solves S X = B for symmetric positive (semi)definite S by Cholesky; on
/// breakdown the system is ridge-regularized and `regularized` set.
inline Matrix spd_solve(Matrix s, const Matrix& b, bool& regularized) {
  const std::size_t m = s.rows();
  double trace = 0.0;
  for (std::size_t i = 0; i < m; ++i) trace += s(i, i);
  auto cholesky = [m](const Matrix& a, Matrix& l) {
    l = Matrix(m, m);
    for (std::size_t j = 0; j < m; ++j) {
      double d = a(j, j);
      for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
      if (!(d > 1e-12 * std::max(1.0, a(j, j)))) return false;
      l(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < m; ++i) {
        double v = a(i, j);
        for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
        l(i, j) = v / l(j, j);
      }
    }
    return true;
  };
  Matrix l;
  regularized = false;
  if (!cholesky(s, l)) {
    regularized = true;
    const double ridge = 1e-10 * std::max(trace, 1.0);
    for (std::size_t i = 0; i < m; ++i) s(i, i) += ridge;
    if (!cholesky(s, l)) throw AuditError("min_norm_check: system could not be regularized");
  }
  Matrix x(m, b.cols());
  for (std::size_t c = 0; c < b.cols(); ++c) {
    std::vector<double> y(m);
    for (std::size_t i = 0; i < m; ++i) {
      double v = b(i, c);
      for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * y[k];
      y[i] = v / l(i, i);
    }
    for (std::size_t i = m; i-- > 0;) {
      double v = y[i];
      for (std::size_t k = i + 1; k < m; ++k) v -= l(k, i) * x(k, c);
      x(i, c) = v / l(i, i);
    }
  }
  return x;
}

inline Matrix mm(const Matrix& a, bool ta, const Matrix& b, bool tb) {
  Matrix out(ta ? a.cols() : a.rows(), tb ? b.rows() : b.cols());
  ad::detail::gemm_acc(a, ta, b, tb, out);
  return out;
}

inline double frob(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail

/// Plain gradient descent on ||U H - T||_F^2 from H = 0, compared against the
/// minimum-norm solution U^T (U U^T)^{-1} T. lr <= 0 picks 1 / (2 ||U||_F^2).
inline MinNormResult min_norm_check(const Matrix& u, const Matrix& target, std::size_t steps = 20000, double lr = 0.0) {
  if (u.rows() != target.rows()) throw ad::ShapeError("min_norm_check: U and target row counts differ");
  MinNormResult r;
  const double fu = detail::frob(u);
  if (lr <= 0.0) lr = fu > 0.0 ? 1.0 / (2.0 * fu * fu) : 1.0;
  Matrix h(u.cols(), target.cols());
  for (std::size_t it = 0; it < steps; ++it) {
    Matrix resid = detail::mm(u, false, h, false);
    for (std::size_t k = 0; k < resid.size(); ++k) resid[k] -= target[k];
    Matrix grad = detail::mm(u, true, resid, false);
    for (std::size_t k = 0; k < h.size(); ++k) h[k] -= lr * 2.0 * grad[k];
  }
  r.gd_solution = h;
  const Matrix uut = detail::mm(u, false, u, true);
  r.pinv_solution = detail::mm(u, true, detail::spd_solve(uut, target, r.rank_deficient), false);
  Matrix diff = r.gd_solution;
  for (std::size_t k = 0; k < diff.size(); ++k) diff[k] -= r.pinv_solution[k];
  const double denom = detail::frob(r.pinv_solution);
  const double num = detail::frob(diff);
  r.relative_gap = denom > 0.0 ? num / denom : num;
  return r;
}

// ---------------------------------------------------------------------------
// Softmax order check

struct OrderCheck {
  std::size_t pairs = 0;
  std::size_t violations = 0;
};

/// Within each row's support (mask != 0), every pair must order attention the
/// same way as the pre-softmax scores: e_j > e_k implies alpha_j >= alpha_k
/// and never the reverse; equal scores must give equal attention.
inline OrderCheck attention_order_check(const Matrix& scores, const Matrix& attention, const Matrix& mask) {
  OrderCheck c;
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    support.clear();
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != 0.0) support.push_back(j);
    for (std::size_t x = 0; x < support.size(); ++x)
      for (std::size_t y = x + 1; y < support.size(); ++y) {
        const double ej = scores(i, support[x]), ek = scores(i, support[y]);
        const double aj = attention(i, support[x]), ak = attention(i, support[y]);
        ++c.pairs;
        const bool ok = ej > ek ? aj >= ak : (ej < ek ? aj <= ak : aj == ak);
        if (!ok) ++c.violations;
      }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Reports

struct AuditReport {
  std::optional<BinTable> bins;
  std::optional<double> bin_spearman;
  std::optional<double> weight_attention_r;
  EdgeDiff diff;
  std::optional<double> fidelity;
  std::optional<OrderCheck> order;
  json fairness = json::object();
  Matrix features;  // learned features z, one row per node
  std::vector<int> labels;
  std::optional<std::vector<int>> sensitive;
  Matrix a_original;
  Matrix a_tilde;
  bool directed = false;
  std::map<std::string, std::string> input_hashes;
};

/// FNV-1a 64-bit over a file's bytes, as 16 hex digits.
inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot hash " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

inline std::string weight_color(double w, double max_w) {
  const double t = max_w > 0.0 ? std::clamp(w / max_w, 0.0, 1.0) : 0.0;
  const int r = static_cast<int>(std::lround(220.0 * (1.0 - t)));
  const int g = static_cast<int>(std::lround(220.0 * (1.0 - t)));
  const int b = static_cast<int>(std::lround(220.0 + 35.0 * t));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

/// DOT graph of the augmented structure: original edges plus added ones,
/// colour and pen width scaled by the learned weight.
inline void write_dot(const fs::path& p, const AuditReport& r) {
  auto out = io::open_out(p);
  const char* arrow = r.directed ? " -> " : " -- ";
  out << (r.directed ? "digraph" : "graph") << " augmented {\n";
  out << "  node [shape=circle];\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    out << "  " << i << " [label=\"" << i << "\", group=" << r.labels[i];
    if (r.sensitive) out << ", sensitive=" << (*r.sensitive)[i];
    out << "];\n";
  }
  const std::size_t n = r.a_tilde.rows();
  double max_w = 0.0;
  for (double v : r.a_tilde.data()) max_w = std::max(max_w, v);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = r.directed ? 0 : u + 1; v < n; ++v) {
      if (u == v) continue;
      const double w = r.a_tilde(u, v);
      const bool original = r.a_original.size() && r.a_original(u, v) != 0.0;
      if (!original && w < r.diff.add_thresh) continue;
      const double width = 0.5 + 4.0 * (max_w > 0.0 ? w / max_w : 0.0);
      out << "  " << u << arrow << v << " [weight=" << io::format_double(w) << ", penwidth=" << io::format_double(width)
          << ", color=\"" << weight_color(w, max_w) << "\"];\n";
    }
  out << "}\n";
}

/// Writes bins.csv, edge_diff.csv, correlations.json, features_scatter.csv and graph.dot.
inline void export_reports(const AuditReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  {
    auto out = io::open_out(dir / "bins.csv");
    out << "bin,lower,upper,mean_attention,count\n";
    if (r.bins)
      for (std::size_t b = 0; b < r.bins->bins(); ++b)
        out << b << ',' << io::format_double(r.bins->edges[b]) << ',' << io::format_double(r.bins->edges[b + 1]) << ','
            << io::format_double(r.bins->mean_attention[b]) << ',' << r.bins->count[b] << '\n';
  }
  {
    auto out = io::open_out(dir / "edge_diff.csv");
    out << "u,v,old_w,new_w,category,y_u,y_v,s_u,s_v\n";
    for (const auto& c : r.diff.changes)
      out << c.u << ',' << c.v << ',' << io::format_double(c.old_w) << ',' << io::format_double(c.new_w) << ','
          << to_string(c.category) << ',' << c.y_u << ',' << c.y_v << ',' << c.s_u << ',' << c.s_v << '\n';
  }
  {
    auto out = io::open_out(dir / "features_scatter.csv");
    out << "node";
    for (std::size_t j = 0; j < r.features.cols(); ++j) out << ",z" << j;
    out << ",label,sensitive\n";
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
      out << i;
      for (std::size_t j = 0; j < r.features.cols(); ++j) out << ',' << io::format_double(r.features(i, j));
      out << ',' << r.labels[i] << ',' << (r.sensitive ? (*r.sensitive)[i] : -1) << '\n';
    }
  }
  json j;
  j["thresholds"] = {{"add", r.diff.add_thresh}, {"remove", r.diff.remove_thresh}};
  j["edge_counts"] = {{"added", r.diff.count(EdgeChange::Added)},
                      {"removed", r.diff.count(EdgeChange::Removed)},
                      {"strengthened", r.diff.count(EdgeChange::Strengthened)},
                      {"weakened", r.diff.count(EdgeChange::Weakened)}};
  j["group_counts"] = r.diff.group_counts;
  j["bin_spearman"] = r.bin_spearman ? json(*r.bin_spearman) : json(nullptr);
  j["weight_attention_pearson"] = r.weight_attention_r ? json(*r.weight_attention_r) : json(nullptr);
  j["fidelity"] = r.fidelity ? json(*r.fidelity) : json(nullptr);
  j["fairness"] = r.fairness;
  j["order_check"] = r.order ? json{{"pairs", r.order->pairs}, {"violations", r.order->violations}} : json(nullptr);
  j["input_hashes"] = r.input_hashes;
  io::write_json(dir / "correlations.json", j);
  write_dot(dir / "graph.dot", r);
}

}  // namespace m2d::audit
