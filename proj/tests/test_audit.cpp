#include <cctype>
#include <cmath>
#include <random>
#include <set>

#include "m2d/audit.hpp"
#include "m2d/gradcheck.hpp"
#include "m2d/models.hpp"
#include "test_util.hpp"

using namespace m2d;
using namespace m2d::audit;
using testutil::TempDir;

namespace {

Matrix ring(std::size_t n) {
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) a(i, (i + 1) % n) = a((i + 1) % n, i) = 1.0;
  return a;
}

/// Row-stochastic over each node's nonzero off-diagonal entries.
Matrix random_attention(const Matrix& a, std::mt19937_64& r) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  Matrix att(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j && a(i, j) != 0.0) s += att(i, j) = u(r);
    for (std::size_t j = 0; j < a.cols(); ++j) att(i, j) /= s > 0 ? s : 1.0;
  }
  return att;
}

// Minimal DOT grammar: (graph|digraph) ID '{' stmt* '}' where stmt is
// "node [attrs];", "ID [attrs];" or "ID (--|->) ID [attrs];".
class DotParser {
 public:
  explicit DotParser(std::string s) : s_(std::move(s)) {}

  bool parse() {
    std::string kind = ident();
    if (kind != "graph" && kind != "digraph") return false;
    edge_op_ = kind == "graph" ? "--" : "->";
    if (ident().empty() || !eat('{')) return false;
    while (true) {
      skip();
      if (peek() == '}') break;
      if (!stmt()) return false;
      ++statements;
    }
    eat('}');
    skip();
    return pos_ == s_.size();
  }
  std::size_t statements = 0, edges = 0;

 private:
  bool stmt() {
    std::string id = ident();
    if (id.empty()) return false;
    skip();
    if (s_.compare(pos_, 2, edge_op_) == 0) {
      pos_ += 2;
      if (ident().empty()) return false;
      ++edges;
    }
    skip();
    if (peek() == '[' && !attrs()) return false;
    return eat(';');
  }
  bool attrs() {
    eat('[');
    while (true) {
      if (ident().empty() || !eat('=') || value().empty()) return false;
      skip();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      return eat(']');
    }
  }
  std::string value() {
    skip();
    if (peek() != '"') return ident();
    std::size_t end = s_.find('"', pos_ + 1);
    if (end == std::string::npos) return {};
    std::string v = s_.substr(pos_, end - pos_ + 1);
    pos_ = end + 1;
    return v;
  }
  std::string ident() {
    skip();
    std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '.' ||
                                ((s_[pos_] == '-' || s_[pos_] == '+') &&
                                 (pos_ == start || s_[pos_ - 1] == 'e' || s_[pos_ - 1] == 'E'))))
      ++pos_;
    return s_.substr(start, pos_ - start);
  }
  bool eat(char c) {
    skip();
    if (peek() != c) return false;
    ++pos_;
    return true;
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  std::string s_;
  std::string edge_op_;
  std::size_t pos_ = 0;
};

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

AuditReport small_report(std::size_t n, std::mt19937_64& r) {
  AuditReport rep;
  rep.a_original = ring(n);
  rep.a_tilde = rep.a_original;
  rep.a_tilde(0, 2) = rep.a_tilde(2, 0) = 0.8;
  rep.a_tilde(0, 1) = rep.a_tilde(1, 0) = 0.05;
  rep.features = testutil::randn(n, 2, r);
  for (std::size_t i = 0; i < n; ++i) rep.labels.push_back(static_cast<int>(i % 2));
  rep.sensitive = std::vector<int>(n, 0);
  (*rep.sensitive)[1] = 1;
  rep.diff = graph_diff(rep.a_original, rep.a_tilde, 0.5, 0.1, rep.labels, rep.sensitive);
  return rep;
}

}  // namespace

TEST(AlignmentBins, ConstantAttentionGivesConstantMeans) {
  std::mt19937_64 r(1);
  Graph g = random_small_graph(1);
  Matrix z = testutil::randn(g.n, 2, r, 0.7);
  Matrix att(g.n, g.n, 0.37);
  auto edges = directed_edges(g.adjacency);
  BinTable t = attention_alignment_bins(z, att, edges, 10, 1.0);
  std::size_t total = 0;
  for (std::size_t b = 0; b < t.bins(); ++b) {
    total += t.count[b];
    if (t.count[b]) EXPECT_NEAR(t.mean_attention[b], 0.37, 1e-15);
    else EXPECT_EQ(t.mean_attention[b], 0.0);
  }
  EXPECT_EQ(total, edges.size());
  EXPECT_EQ(t.edges.front(), 0.0);
  EXPECT_EQ(t.edges.back(), 1.0);
}

TEST(AlignmentBins, AttentionEqualToSimilarityIncreases) {
  std::mt19937_64 r(2);
  const std::size_t n = 60;
  Matrix a(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 0.0;
  Matrix z = testutil::randn(n, 2, r, 0.8);
  Matrix att(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) att(i, j) = metrics::rbf_similarity(z.row_span(i), z.row_span(j));
  BinTable t = attention_alignment_bins(z, att, directed_edges(a), 10, 1.0);
  double prev = -1.0;
  std::size_t nonempty = 0;
  for (std::size_t b = 0; b < t.bins(); ++b) {
    if (!t.count[b]) continue;
    ++nonempty;
    EXPECT_GT(t.mean_attention[b], prev);
    EXPECT_GE(t.mean_attention[b], t.edges[b]);
    EXPECT_LE(t.mean_attention[b], t.edges[b + 1]);
    prev = t.mean_attention[b];
  }
  EXPECT_GE(nonempty, 5u);
  ASSERT_TRUE(bin_trend(t).has_value());
  EXPECT_DOUBLE_EQ(*bin_trend(t), 1.0);
}

TEST(AlignmentBins, SingleBinHasNoTrend) {
  Matrix z(3, 1);  // identical features: every pair has similarity 1
  Matrix att = Matrix::from_rows({{0, 0.3, 0.7}, {0.5, 0, 0.5}, {0.2, 0.8, 0}});
  const BinTable t = attention_alignment_bins(z, att, {{0, 1, 1.0}, {0, 2, 1.0}, {1, 2, 1.0}}, 10);
  EXPECT_EQ(t.count.back(), 3u);
  EXPECT_FALSE(bin_trend(t).has_value());
}

TEST(AlignmentBins, Errors) {
  EXPECT_THROW(attention_alignment_bins(Matrix(2, 1), Matrix(2, 2), {}, 10), AuditError);
  EXPECT_THROW(attention_alignment_bins(Matrix(2, 1), Matrix(2, 2), {{0, 1, 1.0}}, 1), std::invalid_argument);
}

TEST(WeightAttention, RowProportionalGivesOne) {
  std::mt19937_64 r(3);
  Graph g = random_small_graph(3);
  Matrix att = random_attention(g.adjacency, r);
  Matrix at(g.n, g.n);
  std::uniform_real_distribution<double> scale(0.2, 3.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    const double c = scale(r);
    for (std::size_t j = 0; j < g.n; ++j) at(i, j) = c * att(i, j);
  }
  EXPECT_NEAR(weight_attention_correlation(at, att, directed_edges(g.adjacency)), 1.0, 1e-12);
}

TEST(WeightAttention, DegenerateUniformOnRegularGraphThrows) {
  Matrix a = ring(8);
  Matrix att = a;
  for (double& v : att.data()) v *= 0.5;
  EXPECT_THROW(weight_attention_correlation(a, att, directed_edges(a)), metrics::MetricError);
  EXPECT_THROW(weight_attention_correlation(a, att, {}), AuditError);
}

TEST(GraphDiff, IdentityIsEmpty) {
  Graph g = random_small_graph(4);
  EdgeDiff d = graph_diff(g.adjacency, g.adjacency, 0.5, 0.1, g.labels, g.sensitive);
  EXPECT_TRUE(d.changes.empty());
  EXPECT_TRUE(d.group_counts.empty());
}

TEST(GraphDiff, RemovedAndAddedExamples) {
  Matrix a = ring(4), at = ring(4);
  at(0, 1) = at(1, 0) = 0.05;
  at(0, 2) = at(2, 0) = 0.9;
  std::vector<int> y{0, 1, 1, 0};
  std::vector<int> s{1, 0, 0, 1};
  EdgeDiff d = graph_diff(a, at, 0.5, 0.1, y, s);
  ASSERT_EQ(d.changes.size(), 2u);
  EXPECT_EQ(d.count(EdgeChange::Removed), 1u);
  EXPECT_EQ(d.count(EdgeChange::Added), 1u);
  for (const ChangedEdge& c : d.changes) {
    EXPECT_EQ(c.u, 0u);
    if (c.category == EdgeChange::Added) {
      EXPECT_EQ(c.v, 2u);
      EXPECT_EQ(c.new_w, 0.9);
      EXPECT_EQ(c.y_u, 0);
      EXPECT_EQ(c.y_v, 1);
      EXPECT_EQ(c.s_u, 1);
      EXPECT_EQ(c.s_v, 0);
    } else {
      EXPECT_EQ(c.v, 1u);
    }
  }
  EXPECT_EQ(d.group_counts["added"]["y01/s01"], 1u);
  EXPECT_EQ(d.add_thresh, 0.5);
  EXPECT_EQ(d.remove_thresh, 0.1);
}

TEST(GraphDiff, StrengthenedAndWeakened) {
  Matrix a(3, 3), at(3, 3);
  a(0, 1) = a(1, 0) = 0.3;
  at(0, 1) = at(1, 0) = 0.6;
  a(1, 2) = a(2, 1) = 1.0;
  at(1, 2) = at(2, 1) = 0.7;
  EdgeDiff d = graph_diff(a, at, 0.5, 0.1, {0, 0, 1}, std::nullopt);
  EXPECT_EQ(d.count(EdgeChange::Strengthened), 1u);
  EXPECT_EQ(d.count(EdgeChange::Weakened), 1u);
  EXPECT_EQ(d.changes[0].s_u, -1);
}

TEST(GraphDiff, CategoriesDisjointAndReproducible) {
  std::mt19937_64 r(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Graph g = random_small_graph(seed);
    Matrix at(g.n, g.n);
    for (std::size_t i = 0; i < g.n; ++i)
      for (std::size_t j = i + 1; j < g.n; ++j) at(i, j) = at(j, i) = u(r);
    EdgeDiff d1 = graph_diff(g.adjacency, at, 0.5, 0.1, g.labels, g.sensitive);
    EdgeDiff d2 = graph_diff(g.adjacency, at, 0.5, 0.1, g.labels, g.sensitive);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& c : d1.changes) EXPECT_TRUE(seen.insert({c.u, c.v}).second);
    ASSERT_EQ(d1.changes.size(), d2.changes.size());
    for (std::size_t k = 0; k < d1.changes.size(); ++k) {
      EXPECT_EQ(d1.changes[k].u, d2.changes[k].u);
      EXPECT_EQ(d1.changes[k].category, d2.changes[k].category);
    }
    std::size_t total = 0;
    for (EdgeChange c : {EdgeChange::Added, EdgeChange::Removed, EdgeChange::Strengthened, EdgeChange::Weakened})
      total += d1.count(c);
    EXPECT_EQ(total, d1.changes.size());
  }
}

TEST(GraphDiff, ThresholdsValidated) {
  Matrix a(2, 2);
  EXPECT_THROW(graph_diff(a, a, 0.0, 0.1, {0, 0}, std::nullopt), std::invalid_argument);
  EXPECT_THROW(graph_diff(a, a, 0.5, 1.0, {0, 0}, std::nullopt), std::invalid_argument);
}

TEST(Fidelity, Examples) {
  std::mt19937_64 r(6);
  Matrix t = testutil::randn(10, 2, r);
  std::vector<bool> all(10, true);
  EXPECT_EQ(distillation_fidelity(t, t, all), 1.0);
  Matrix flipped(10, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    flipped(i, 0) = t(i, 1);
    flipped(i, 1) = t(i, 0);
  }
  EXPECT_EQ(distillation_fidelity(flipped, t, all), 0.0);
  Matrix nine = t;
  nine(3, 0) = t(3, 1);
  nine(3, 1) = t(3, 0);
  EXPECT_DOUBLE_EQ(distillation_fidelity(nine, t, all), 0.9);
  EXPECT_THROW(distillation_fidelity(t, t, std::vector<bool>(10, false)), metrics::MetricError);
}

TEST(MinNorm, SingleRowExample) {
  MinNormResult m = min_norm_check(Matrix::from_rows({{1.0, 0.0}}), Matrix::from_rows({{1.0}}));
  testutil::expect_near(m.pinv_solution, Matrix::from_rows({{1.0}, {0.0}}), 1e-15);
  EXPECT_LT(m.relative_gap, 1e-4);
  EXPECT_FALSE(m.rank_deficient);
}

TEST(MinNorm, SquareInvertible) {
  Matrix u = Matrix::from_rows({{2.0, 1.0}, {1.0, 3.0}});
  Matrix t = Matrix::from_rows({{1.0}, {2.0}});
  MinNormResult m = min_norm_check(u, t);
  // inverse by hand: [[3,-1],[-1,2]] / 5
  testutil::expect_near(m.pinv_solution, Matrix::from_rows({{0.2}, {0.6}}), 1e-12);
  EXPECT_LT(m.relative_gap, 1e-6);
}

TEST(MinNorm, ZeroTargetStaysAtZero) {
  std::mt19937_64 r(7);
  MinNormResult m = min_norm_check(testutil::randn(3, 8, r), Matrix(3, 2), 500);
  EXPECT_EQ(m.gd_solution, Matrix(8, 2));
}

TEST(MinNorm, RandomFullRowRankSystems) {
  std::mt19937_64 r(8);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix u = testutil::randn(3, 8, r), t = testutil::randn(3, 1, r);
    MinNormResult m = min_norm_check(u, t);
    EXPECT_LT(m.relative_gap, 1e-4) << "trial " << trial;
    EXPECT_FALSE(m.rank_deficient);
  }
}

TEST(MinNorm, RankDeficiencyFlagged) {
  Matrix u = Matrix::from_rows({{1.0, 2.0, 0.0}, {2.0, 4.0, 0.0}});
  EXPECT_TRUE(min_norm_check(u, Matrix::from_rows({{1.0}, {2.0}}), 10).rank_deficient);
}

TEST(OrderCheck, GatAttentionFollowsScores) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Graph g = random_small_graph(seed);
    Rng rng(seed);
    ModelSpec s;
    s.kind = ModelKind::Gat;
    s.in_dim = g.feature_dim();
    s.hidden = 4;
    ParamSet p = init_model(s, rng);
    AttentionOutput o = gat_forward(as_constants(p), g.adjacency, Tensor(g.features), s);
    OrderCheck c = attention_order_check(o.scores, o.attention, closed_neighbourhood(g.adjacency));
    EXPECT_GT(c.pairs, 0u);
    EXPECT_EQ(c.violations, 0u);
  }
}

TEST(OrderCheck, DetectsInversions) {
  Matrix mask(1, 3, 1.0);
  OrderCheck c = attention_order_check(Matrix::from_rows({{1.0, 2.0, 3.0}}), Matrix::from_rows({{0.5, 0.3, 0.2}}), mask);
  EXPECT_EQ(c.pairs, 3u);
  EXPECT_EQ(c.violations, 3u);
}

TEST(ExportReports, FilesAndFormats) {
  TempDir dir;
  std::mt19937_64 r(9);
  AuditReport rep = small_report(6, r);
  rep.bins = attention_alignment_bins(rep.features, random_attention(rep.a_original, r), directed_edges(rep.a_original));
  rep.order = OrderCheck{12, 0};
  export_reports(rep, dir.path());
  for (const char* f : {"bins.csv", "edge_diff.csv", "correlations.json", "features_scatter.csv", "graph.dot"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(count_lines(testutil::slurp(dir / "features_scatter.csv")), 6u + 1u);
  EXPECT_EQ(count_lines(testutil::slurp(dir / "bins.csv")), 10u + 1u);
  EXPECT_EQ(count_lines(testutil::slurp(dir / "edge_diff.csv")), rep.diff.changes.size() + 1u);

  DotParser dot(testutil::slurp(dir / "graph.dot"));
  ASSERT_TRUE(dot.parse());
  // ring has 6 edges; one removed stays as original, one added
  EXPECT_EQ(dot.edges, 7u);

  auto j = nlohmann::json::parse(testutil::slurp(dir / "correlations.json"));
  EXPECT_EQ(j["order_check"]["violations"], 0);
  EXPECT_EQ(j["edge_counts"]["added"], 1);
  EXPECT_EQ(j["edge_counts"]["removed"], 1);
  EXPECT_EQ(j["thresholds"]["add"], 0.5);
}

TEST(ExportReports, EmptyDiffHasHeaderOnly) {
  TempDir dir;
  std::mt19937_64 r(10);
  AuditReport rep = small_report(5, r);
  rep.a_tilde = rep.a_original;
  rep.diff = graph_diff(rep.a_original, rep.a_tilde, 0.5, 0.1, rep.labels, rep.sensitive);
  rep.directed = true;
  export_reports(rep, dir.path());
  EXPECT_EQ(testutil::slurp(dir / "edge_diff.csv"), "u,v,old_w,new_w,category,y_u,y_v,s_u,s_v\n");
  DotParser dot(testutil::slurp(dir / "graph.dot"));
  ASSERT_TRUE(dot.parse());
  EXPECT_EQ(dot.edges, 10u);
}

TEST(FileHash, StableAndContentSensitive) {
  TempDir dir;
  testutil::write_file(dir / "a", "hello");
  testutil::write_file(dir / "b", "hello");
  testutil::write_file(dir / "c", "hellp");
  EXPECT_EQ(file_hash(dir / "a"), file_hash(dir / "b"));
  EXPECT_NE(file_hash(dir / "a"), file_hash(dir / "c"));
  EXPECT_EQ(file_hash(dir / "a").size(), 16u);
  EXPECT_THROW(file_hash(dir / "missing"), DataError);
}
