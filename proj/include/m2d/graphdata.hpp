#pragma once
// Graph container, on-disk dataset format, GCN normalization, node splits,
// the biased two-block SBM generator and similarity-graph helpers.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2d/autodiff.hpp"
#include "m2d/optim.hpp"

namespace m2d {

namespace fs = std::filesystem;
using ad::Tensor;
using json = nlohmann::json;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SplitMasks {
  std::vector<bool> train, val, test;

  friend bool operator==(const SplitMasks&, const SplitMasks&) = default;
};

struct Graph {
  std::size_t n = 0;
  Matrix adjacency;  // n x n, nonnegative
  Matrix features;   // n x d
  std::vector<int> labels;
  int num_classes = 0;
  SplitMasks splits;
  std::optional<std::vector<int>> sensitive;
  bool directed = false;
  bool weighted = false;

  std::size_t feature_dim() const { return features.cols(); }
  bool has_sensitive() const { return sensitive.has_value(); }

  friend bool operator==(const Graph&, const Graph&) = default;
};

struct Edge {
  std::size_t u = 0, v = 0;
  double w = 1.0;
};

/// Nonzero off-diagonal entries; undirected graphs list each pair once with u < v.
inline std::vector<Edge> edge_list(const Matrix& a, bool directed) {
  std::vector<Edge> out;
  for (std::size_t u = 0; u < a.rows(); ++u)
    for (std::size_t v = directed ? 0 : u + 1; v < a.cols(); ++v)
      if (u != v && a(u, v) != 0.0) out.push_back({u, v, a(u, v)});
  return out;
}

inline std::vector<std::size_t> mask_indices(const std::vector<bool>& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.3, val = 0.2, test = 0.5;
};

/// Uniformly random disjoint masks; sizes are round(ratio * n), with the test
/// set clipped to the nodes left over.
inline SplitMasks split_nodes(std::size_t n, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test > 1.0 + 1e-12) {
    throw std::invalid_argument("split_nodes: ratios must be nonnegative and sum to at most 1");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  auto count = [n](double r) { return static_cast<std::size_t>(std::llround(r * static_cast<double>(n))); };
  const std::size_t ntr = std::min(count(ratios.train), n);
  const std::size_t nva = std::min(count(ratios.val), n - ntr);
  const std::size_t nte = std::min(count(ratios.test), n - ntr - nva);
  SplitMasks m{std::vector<bool>(n), std::vector<bool>(n), std::vector<bool>(n)};
  for (std::size_t k = 0; k < ntr; ++k) m.train[order[k]] = true;
  for (std::size_t k = ntr; k < ntr + nva; ++k) m.val[order[k]] = true;
  for (std::size_t k = ntr + nva; k < ntr + nva + nte; ++k) m.test[order[k]] = true;
  return m;
}

// ---------------------------------------------------------------------------
// Normalization and similarity

/// D^{-1/2} (A + I) D^{-1/2} with D the weighted row sums of A + I.
/// Differentiable in A so learned structure can feed the student.
inline Tensor gcn_normalize(const Tensor& a) {
  if (a.rows() != a.cols()) throw ad::ShapeError("gcn_normalize: adjacency must be square");
  const std::size_t n = a.rows();
  Tensor with_loops = ad::add(a, ad::constant(Matrix::identity(n)));
  Tensor deg = ad::sum(with_loops, 1);
  Tensor dinv = ad::div(ad::constant(Matrix(n, 1, 1.0)), ad::sqrt(deg));
  return ad::mul(with_loops, ad::matmul(dinv, ad::transpose(dinv)));
}

inline Matrix gcn_normalize(const Matrix& a) { return gcn_normalize(Tensor(a)).value(); }

/// Pairwise cosine similarity of rows; rows of zero norm have similarity 0
/// with everything, including themselves.
inline Matrix cosine_similarity_matrix(const Matrix& x) {
  const std::size_t n = x.rows();
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : x.row_span(i)) s += v * v;
    norm[i] = std::sqrt(s);
  }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      if (norm[i] == 0.0 || norm[j] == 0.0) continue;
      double dot = 0.0;
      auto ri = x.row_span(i);
      auto rj = x.row_span(j);
      for (std::size_t k = 0; k < x.cols(); ++k) dot += ri[k] * rj[k];
      const double c = std::clamp(dot / (norm[i] * norm[j]), -1.0, 1.0);
      out(i, j) = c;
      out(j, i) = c;
    }
  }
  return out;
}

/// Cosine matrix prepared for adjacency blending: negatives clamped to 0 and
/// the diagonal zeroed.
inline Matrix blend_similarity(const Matrix& x) {
  Matrix s = cosine_similarity_matrix(x);
  for (double& v : s.data()) v = std::max(v, 0.0);
  for (std::size_t i = 0; i < s.rows(); ++i) s(i, i) = 0.0;
  return s;
}

/// Binary symmetric adjacency linking u != v whose feature cosine is >= threshold.
inline Matrix build_similarity_graph(const Matrix& x, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) throw std::invalid_argument("build_similarity_graph: threshold outside [0,1]");
  Matrix s = cosine_similarity_matrix(x);
  Matrix a(x.rows(), x.rows());
  for (std::size_t u = 0; u < a.rows(); ++u)
    for (std::size_t v = 0; v < a.cols(); ++v)
      if (u != v && s(u, v) >= threshold) a(u, v) = 1.0;
  return a;
}

/// BFS hop counts over nonzero entries; distances beyond cap (and unreachable
/// pairs) are reported as cap + 1.
inline std::vector<std::vector<int>> shortest_path_distances(const Matrix& a, int cap) {
  const std::size_t n = a.rows();
  std::vector<std::vector<int>> d(n, std::vector<int>(n, cap + 1));
  for (std::size_t src = 0; src < n; ++src) {
    std::vector<int>& row = d[src];
    row[src] = 0;
    std::deque<std::size_t> queue{src};
    std::vector<bool> seen(n, false);
    seen[src] = true;
    std::vector<int> hop(n, 0);
    while (!queue.empty()) {
      const std::size_t u = queue.front();
      queue.pop_front();
      if (hop[u] >= cap) continue;
      for (std::size_t v = 0; v < n; ++v) {
        if (seen[v] || a(u, v) == 0.0) continue;
        seen[v] = true;
        hop[v] = hop[u] + 1;
        row[v] = hop[v];
        queue.push_back(v);
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Assortativity

/// Newman's label assortativity over the edge set (each undirected edge counted
/// in both directions). A graph whose mixing matrix is concentrated on a single
/// class returns 1.
inline double label_assortativity(const Graph& g) {
  const auto C = static_cast<std::size_t>(g.num_classes);
  Matrix e(C, C);
  double total = 0.0;
  for (std::size_t u = 0; u < g.n; ++u)
    for (std::size_t v = 0; v < g.n; ++v) {
      if (u == v || g.adjacency(u, v) == 0.0) continue;
      e(static_cast<std::size_t>(g.labels[u]), static_cast<std::size_t>(g.labels[v])) += 1.0;
      if (g.directed) e(static_cast<std::size_t>(g.labels[v]), static_cast<std::size_t>(g.labels[u])) += 1.0;
      total += g.directed ? 2.0 : 1.0;
    }
  if (total == 0.0) throw DataError("label_assortativity: empty edge set");
  double trace = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < C; ++i) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      a += e(i, j) / total;
      b += e(j, i) / total;
    }
    trace += e(i, i) / total;
    ab += a * b;
  }
  if (std::abs(1.0 - ab) < 1e-15) return 1.0;
  return (trace - ab) / (1.0 - ab);
}

/// Pearson correlation of endpoint degrees over edges (both directions).
inline double degree_assortativity(const Matrix& a) {
  const std::size_t n = a.rows();
  std::vector<double> deg(n, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (u != v && a(u, v) != 0.0) deg[u] += 1.0;
  double sx = 0, sxx = 0, sxy = 0, m = 0;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      if (u == v || a(u, v) == 0.0) continue;
      sx += deg[u];
      sxx += deg[u] * deg[u];
      sxy += deg[u] * deg[v];
      m += 1.0;
    }
  if (m == 0.0) throw DataError("degree_assortativity: empty edge set");
  const double mean = sx / m;
  const double var = sxx / m - mean * mean;
  if (var <= 0.0) return 0.0;
  return (sxy / m - mean * mean) / var;
}

// ---------------------------------------------------------------------------
// Biased stochastic block model

struct SbmConfig {
  std::size_t n = 1000;
  std::vector<std::size_t> block_sizes{600, 400};
  double intra_p = 0.05;
  double inter_p = 0.005;
  double p_bias = 0.7;
  std::size_t d = 20;
  std::size_t d_noise = 8;
  double signal_gamma = 1.0;
  std::uint64_t seed = 0;
  /// Adjust inter_p until label assortativity is within tolerance of target.
  bool tune_assortativity = true;
  double target_assortativity = 0.77;
  double assortativity_tol = 0.05;

  void validate() const {
    if (block_sizes.size() != 2) throw std::invalid_argument("SbmConfig: exactly two blocks are supported");
    if (block_sizes[0] + block_sizes[1] != n) throw std::invalid_argument("SbmConfig: block sizes must sum to n");
    for (double p : {intra_p, inter_p, p_bias})
      if (p < 0.0 || p > 1.0) throw std::invalid_argument("SbmConfig: probabilities must lie in [0,1]");
    if (d_noise > d) throw std::invalid_argument("SbmConfig: d_noise exceeds d");
  }
};

namespace detail {

inline Graph sample_sbm(const SbmConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Graph g;
  g.n = cfg.n;
  g.num_classes = 2;
  g.labels.resize(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) g.labels[i] = i < cfg.block_sizes[0] ? 0 : 1;

  std::vector<int> s(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const double p1 = g.labels[i] == 1 ? cfg.p_bias : 1.0 - cfg.p_bias;
    s[i] = unif(rng) < p1 ? 1 : 0;
  }
  g.sensitive = std::move(s);

  g.adjacency = Matrix(cfg.n, cfg.n);
  for (std::size_t u = 0; u < cfg.n; ++u)
    for (std::size_t v = u + 1; v < cfg.n; ++v) {
      const double p = g.labels[u] == g.labels[v] ? cfg.intra_p : cfg.inter_p;
      if (unif(rng) < p) {
        g.adjacency(u, v) = 1.0;
        g.adjacency(v, u) = 1.0;
      }
    }

  const std::size_t d_signal = cfg.d - cfg.d_noise;
  g.features = Matrix(cfg.n, cfg.d);
  for (std::size_t i = 0; i < cfg.n; ++i)
    for (std::size_t j = 0; j < cfg.d; ++j) {
      const double z = gauss(rng);
      g.features(i, j) = j < d_signal ? cfg.signal_gamma * g.labels[i] + z : z;
    }
  g.splits = split_nodes(cfg.n, {}, seed ^ 0x5bd1e995ULL);
  return g;
}

}  // namespace detail

/// Two-block SBM with label-correlated sensitive attribute and features.
/// Block 0 carries label 0, block 1 label 1. When tuning is enabled, inter_p
/// is rescaled and the graph resampled (fresh sub-seed) until the label
/// assortativity lands inside the target band; `resolved` receives the
/// probabilities actually used.
inline Graph generate_sbm(const SbmConfig& cfg, SbmConfig* resolved = nullptr) {
  cfg.validate();
  SbmConfig cur = cfg;
  Graph g = detail::sample_sbm(cur, cur.seed);
  if (cfg.tune_assortativity) {
    for (int attempt = 1; attempt <= 60; ++attempt) {
      const double r = label_assortativity(g);
      if (std::abs(r - cfg.target_assortativity) <= cfg.assortativity_tol * 0.5) break;
      cur.inter_p = std::clamp(cur.inter_p * (r > cfg.target_assortativity ? 1.15 : 1.0 / 1.15), 0.0, 1.0);
      g = detail::sample_sbm(cur, cur.seed + static_cast<std::uint64_t>(attempt) * 0x9E3779B97F4A7C15ULL);
    }
  }
  if (resolved) *resolved = cur;
  return g;
}

// ---------------------------------------------------------------------------
// Text dataset format

namespace io {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing file: " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

/// Headerless numeric CSV.
inline Matrix read_matrix_csv(const fs::path& p) {
  auto lines = read_lines(p);
  if (lines.empty()) return Matrix();
  const std::size_t cols = split_commas(lines[0]).size();
  Matrix m(lines.size(), cols);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto cells = split_commas(lines[i]);
    if (cells.size() != cols) throw DataError(p.string() + ": ragged row " + std::to_string(i));
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = parse_double(cells[j], p.string());
  }
  return m;
}

inline void write_matrix_csv(const fs::path& p, const Matrix& m) {
  auto out = open_out(p);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

inline std::vector<int> read_int_column(const fs::path& p, std::size_t n) {
  auto lines = read_lines(p);
  if (lines.size() != n) throw DataError(p.string() + ": expected " + std::to_string(n) + " rows");
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = parse_double(lines[i], p.string());
    if (v != std::floor(v)) throw DataError(p.string() + ": non-integer value");
    out[i] = static_cast<int>(v);
  }
  return out;
}

inline void write_int_column(const fs::path& p, const std::vector<int>& v) {
  auto out = open_out(p);
  for (int x : v) out << x << '\n';
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing file: " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
}

/// `u,v,alpha` attention file into a dense n x n matrix.
inline Matrix read_attention_csv(const fs::path& p, std::size_t n) {
  auto lines = read_lines(p);
  if (lines.empty() || lines[0] != "u,v,alpha") throw DataError(p.string() + ": expected header u,v,alpha");
  Matrix a(n, n);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto c = split_commas(lines[i]);
    if (c.size() != 3) throw DataError(p.string() + ": malformed row");
    const double u = parse_double(c[0], p.string()), v = parse_double(c[1], p.string());
    if (u < 0 || v < 0 || u >= static_cast<double>(n) || v >= static_cast<double>(n))
      throw DataError(p.string() + ": node index out of range");
    a(static_cast<std::size_t>(u), static_cast<std::size_t>(v)) = parse_double(c[2], p.string());
  }
  return a;
}

/// Writes every nonzero entry (self-loops included) of an attention matrix.
inline void write_attention_csv(const fs::path& p, const Matrix& alpha) {
  auto out = open_out(p);
  out << "u,v,alpha\n";
  for (std::size_t u = 0; u < alpha.rows(); ++u)
    for (std::size_t v = 0; v < alpha.cols(); ++v)
      if (alpha(u, v) != 0.0) out << u << ',' << v << ',' << format_double(alpha(u, v)) << '\n';
}

}  // namespace io

/// Reads a dataset directory (meta.json, edges.csv, features.csv, labels.csv,
/// optional sensitive.csv, splits.json). Undirected edge files are
/// symmetrized; duplicate edges are dropped with a warning on stderr.
inline Graph load_dataset(const fs::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  Graph g;
  std::size_t d = 0;
  bool has_sensitive = false;
  try {
    g.n = meta.at("n").get<std::size_t>();
    d = meta.at("d").get<std::size_t>();
    g.num_classes = meta.at("num_classes").get<int>();
    g.directed = meta.at("directed").get<bool>();
    has_sensitive = meta.at("has_sensitive").get<bool>();
    g.weighted = meta.at("weighted").get<bool>();
  } catch (const json::exception& e) {
    throw DataError("meta.json: " + std::string(e.what()));
  }
  if (g.num_classes <= 0) throw DataError("meta.json: num_classes must be positive");

  g.adjacency = Matrix(g.n, g.n);
  auto edge_lines = io::read_lines(dir / "edges.csv");
  if (edge_lines.empty() || (edge_lines[0] != "u,v,w" && edge_lines[0] != "u,v"))
    throw DataError("edges.csv: expected header u,v,w");
  std::size_t duplicates = 0;
  for (std::size_t i = 1; i < edge_lines.size(); ++i) {
    auto c = io::split_commas(edge_lines[i]);
    if (c.size() < 2 || c.size() > 3) throw DataError("edges.csv: malformed row " + std::to_string(i));
    const double uf = io::parse_double(c[0], "edges.csv"), vf = io::parse_double(c[1], "edges.csv");
    const double w = c.size() == 3 && !c[2].empty() ? io::parse_double(c[2], "edges.csv") : 1.0;
    if (uf < 0 || vf < 0 || uf >= static_cast<double>(g.n) || vf >= static_cast<double>(g.n) ||
        uf != std::floor(uf) || vf != std::floor(vf))
      throw DataError("edges.csv: node index out of range at row " + std::to_string(i));
    const auto u = static_cast<std::size_t>(uf), v = static_cast<std::size_t>(vf);
    if (u == v) throw DataError("edges.csv: self-loop at row " + std::to_string(i));
    if (w < 0.0) throw DataError("edges.csv: negative weight at row " + std::to_string(i));
    if (g.adjacency(u, v) != 0.0) {
      ++duplicates;
      continue;
    }
    g.adjacency(u, v) = w;
    if (!g.directed) g.adjacency(v, u) = w;
  }
  if (duplicates) std::cerr << "warning: " << duplicates << " duplicate edge(s) dropped from " << (dir / "edges.csv") << '\n';

  g.features = io::read_matrix_csv(dir / "features.csv");
  if (g.features.rows() != g.n || g.features.cols() != d)
    throw DataError("features.csv: expected " + std::to_string(g.n) + "x" + std::to_string(d));

  g.labels = io::read_int_column(dir / "labels.csv", g.n);
  for (int y : g.labels)
    if (y < 0 || y >= g.num_classes) throw DataError("labels.csv: class index out of range");

  if (has_sensitive) {
    auto s = io::read_int_column(dir / "sensitive.csv", g.n);
    for (int v : s)
      if (v != 0 && v != 1) throw DataError("sensitive.csv: values must be 0/1");
    g.sensitive = std::move(s);
  }

  const json splits = io::read_json(dir / "splits.json");
  auto read_mask = [&](const char* key) {
    std::vector<bool> m(g.n, false);
    for (const auto& e : splits.at(key)) {
      const auto i = e.get<std::size_t>();
      if (i >= g.n) throw DataError(std::string("splits.json: index out of range in ") + key);
      m[i] = true;
    }
    return m;
  };
  try {
    g.splits = {read_mask("train"), read_mask("val"), read_mask("test")};
  } catch (const json::exception& e) {
    throw DataError("splits.json: " + std::string(e.what()));
  }
  for (std::size_t i = 0; i < g.n; ++i)
    if (int(g.splits.train[i]) + int(g.splits.val[i]) + int(g.splits.test[i]) > 1)
      throw DataError("splits.json: masks overlap at node " + std::to_string(i));
  return g;
}

/// Writes the dataset format. Zero-weight pairs are omitted from edges.csv.
inline void save_dataset(const Graph& g, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_json(dir / "meta.json", json{{"n", g.n},
                                         {"d", g.feature_dim()},
                                         {"num_classes", g.num_classes},
                                         {"directed", g.directed},
                                         {"has_sensitive", g.has_sensitive()},
                                         {"weighted", g.weighted}});
  {
    auto out = io::open_out(dir / "edges.csv");
    out << "u,v,w\n";
    for (const Edge& e : edge_list(g.adjacency, g.directed)) {
      out << e.u << ',' << e.v << ',' << io::format_double(e.w) << '\n';
    }
  }
  io::write_matrix_csv(dir / "features.csv", g.features);
  io::write_int_column(dir / "labels.csv", g.labels);
  if (g.sensitive) io::write_int_column(dir / "sensitive.csv", *g.sensitive);
  io::write_json(dir / "splits.json", json{{"train", mask_indices(g.splits.train)},
                                           {"val", mask_indices(g.splits.val)},
                                           {"test", mask_indices(g.splits.test)}});
}

}  // namespace m2d
