// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "m2d/audit.hpp"
#include "m2d/distill.hpp"
#include "m2d/gradcheck.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/losses.hpp"
#include "m2d/metrics.hpp"
#include "m2d/models.hpp"

using namespace m2d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << what << " (" << detail << ")" << std::endl;
  if (!ok) ++failures;
}

void guarded(int id, const std::string& what, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, what, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << v;
  return s.str();
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

double test_accuracy(const Matrix& logits, const Graph& g) { return evaluate_logits(logits, g).test_accuracy; }

TrainConfig teacher_config(std::uint64_t seed, double fair_weight = 0.0) {
  TrainConfig c;
  c.seed = seed;
  c.fair_weight = fair_weight;
  return c;
}

M2dConfig distill_config(Variant v, std::uint64_t seed) {
  M2dConfig c;
  c.variant = v;
  c.seed = seed;
  return c;
}

TrainResult vanilla_student(const Graph& g, std::uint64_t seed) {
  return train_supervised(ModelKind::Gcn, g, distill_config(Variant::None, seed).resolved().student_train_config());
}

int sh(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

void criterion_gradcheck() {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck("all", 1);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::size_t failed = 0;
  for (const auto& c : cases) {
    worst = std::max(worst, c.max_rel_error);
    failed += !c.passed;
  }
  report(1, failed == 0 && secs < 60.0, "gradcheck over all composites",
         std::to_string(cases.size()) + " cases, worst rel error " + std::to_string(worst) + ", " + fmt(secs, 1) + " s");
}

void criterion_identities() {
  struct Check {
    const char* name;
    std::function<bool()> ok;
  };
  const std::vector<bool> one{true};
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-10; };
  const Matrix x = Matrix::from_rows({{0.3, -1.2, 2.0}, {1.0, 0.5, -0.7}});
  std::vector<Check> checks{
      {"matmul identity", [&] { return ad::matmul(Tensor(x), Tensor(Matrix::identity(3))).value() == x; }},
      {"softmax [ln1, ln3]",
       [&] {
         Matrix s = ad::row_softmax(Tensor(Matrix::from_rows({{0.0, std::log(3.0)}}))).value();
         return near(s(0, 0), 0.25) && near(s(0, 1), 0.75);
       }},
      {"loss_cls confident = 0",
       [&] { return loss_cls(Tensor(Matrix::from_rows({{60.0, -60.0}})), std::vector<int>{0}, one).item() == 0.0; }},
      {"loss_cls uniform = ln 4",
       [&] { return near(loss_cls(Tensor(Matrix(2, 4)), std::vector<int>{1, 3}, {true, true}).item(), std::log(4.0)); }},
      {"loss_cls (0, ln3) = -ln .25",
       [&] {
         return near(loss_cls(Tensor(Matrix::from_rows({{0.0, std::log(3.0)}})), std::vector<int>{0}, one).item(),
                     -std::log(0.25));
       }},
      {"loss_dis identical = 0",
       [&] { return loss_dis(Tensor(x), x, 2.0, {true, true}).item() == 0.0; }},
      {"loss_dis one-node KL",
       [&] {
         return near(loss_dis(Tensor(Matrix::from_rows({{0.0, std::log(3.0)}})), Matrix::from_rows({{std::log(3.0), 0.0}}),
                              1.0, one)
                         .item(),
                     0.5 * std::log(3.0));
       }},
      {"loss_div orthogonal = 0",
       [&] {
         return loss_div(feature_gram(Tensor(Matrix::from_rows({{1, 0}, {0, 1}}))), 1, 1.0).item() == 0.0;
       }},
      {"loss_div duplicate = lambda/2",
       [&] { return near(loss_div(feature_gram(Tensor(Matrix::from_rows({{1, 1}, {2, 2}}))), 1, 1.0).item(), 0.5); }},
      {"loss_div lambda 0 = 0",
       [&] { return loss_div(feature_gram(Tensor(Matrix::from_rows({{1, 1}, {2, 2}}))), 1, 0.0).item() == 0.0; }},
      {"loss_graph ones",
       [&] { return near(loss_graph(Tensor(Matrix(2, 2, 1.0)), 1.0, 1.0).item(), 1.0 - std::log(2.0)); }},
      {"loss_graph clamp",
       [&] { return near(loss_graph(Tensor(Matrix(2, 2)), 1.0, 0.0).item(), -std::log(1e-12)); }},
      {"loss_graph zero lambdas", [&] { return loss_graph(Tensor(Matrix(2, 2, 0.4)), 0.0, 0.0).item() == 0.0; }},
      {"blend gamma 0",
       [&] {
         Matrix a = Matrix::from_rows({{0, 1}, {1, 0}});
         return blend_adjacency(Tensor(a), Tensor(Matrix(2, 2, 0.3)), Tensor(Matrix(2, 2, 0.9)), 0.0, 0.5).value() == a;
       }},
      {"blend 0.7",
       [&] {
         Matrix a = Matrix::from_rows({{0, 1}, {1, 0}});
         return near(blend_adjacency(Tensor(a), Tensor(Matrix(2, 2, 0.2)), Tensor(Matrix(2, 2, 0.6)), 0.5, 0.5).value()(0, 1),
                     0.7);
       }},
      {"accuracy / DP / EQOP examples",
       [&] {
         using V = std::vector<int>;
         const std::vector<bool> m4(4, true), m2(2, true);
         return metrics::accuracy(V{0, 1, 1, 1}, V{0, 1, 1, 0}, m4) == 0.75 &&
                metrics::demographic_parity(V{1, 1, 0, 0}, V{1, 0, 1, 0}, m4) == 0.0 &&
                metrics::demographic_parity(V{1, 0}, V{1, 0}, m2) == 1.0 &&
                metrics::demographic_parity(V{1, 1, 1, 0}, V{1, 1, 0, 0}, m4) == 0.5 &&
                metrics::equal_opportunity(V{1, 1, 0, 1}, V{1, 1, 0, 0}, V{1, 1, 1, 1}, m4) == 0.5;
       }},
      {"pearson / rbf examples",
       [&] {
         using D = std::vector<double>;
         return metrics::pearson(D{1, 2, 3}, D{1, 2, 3}) == 1.0 && metrics::pearson(D{1, 2, 3}, D{-1, -2, -3}) == -1.0 &&
                metrics::rbf_similarity(D{1, 2}, D{1, 2}) == 1.0 &&
                near(metrics::rbf_similarity(D{0, 0}, D{1, 1}), std::exp(-1.0));
       }},
      {"fidelity identical = 1",
       [&] { return audit::distillation_fidelity(x, x, {true, true}) == 1.0; }},
      {"graph_diff identity empty",
       [&] {
         Matrix a = Matrix::from_rows({{0, 1}, {1, 0}});
         return audit::graph_diff(a, a, 0.5, 0.1, {0, 1}, std::nullopt).changes.empty();
       }},
      {"min-norm zero target stays 0",
       [&] {
         return audit::min_norm_check(Matrix::from_rows({{1, 2, 3}}), Matrix(1, 1), 100).gd_solution == Matrix(3, 1);
       }},
  };
  std::size_t passed = 0;
  std::string failed;
  for (const auto& c : checks) {
    bool ok = false;
    try {
      ok = c.ok();
    } catch (const std::exception&) {
    }
    if (ok) ++passed;
    else failed += std::string(failed.empty() ? "" : ", ") + c.name;
  }
  report(2, passed == checks.size(), "loss/metric identities",
         std::to_string(passed) + "/" + std::to_string(checks.size()) + " hold" + (failed.empty() ? "" : "; failed: " + failed));
}

void criterion_sbm(const Graph& g, double secs) {
  std::size_t y1 = 0, s1 = 0, b0 = 0;
  for (std::size_t i = 0; i < g.n; ++i) {
    b0 += g.labels[i] == 0;
    if (g.labels[i] == 1) {
      ++y1;
      s1 += (*g.sensitive)[i] == 1;
    }
  }
  const double assort = label_assortativity(g);
  const double p = static_cast<double>(s1) / static_cast<double>(y1);
  const bool ok = g.n == 1000 && b0 == 600 && y1 == 400 && std::abs(assort - 0.77) <= 0.05 && std::abs(p - 0.7) <= 0.05;
  report(3, ok, "SBM generator fidelity",
         "n " + std::to_string(g.n) + ", blocks " + std::to_string(b0) + "/" + std::to_string(y1) + ", assortativity " +
             fmt(assort) + ", P(s=1|y=1) " + fmt(p) + ", " + fmt(secs, 1) + " s");
}

struct Run4 {
  TrainResult teacher;
  DistillResult student;
  double secs = 0;
};

void criterion_alignment(const Graph& g, const Run4& r) {
  const auto edges = audit::directed_edges(g.adjacency);
  const audit::BinTable bins = audit::attention_alignment_bins(r.student.augmented.learned_features(), *r.teacher.attention, edges);
  const std::optional<double> rho = audit::bin_trend(bins);
  std::size_t nonempty = 0;
  for (std::size_t c : bins.count) nonempty += c > 0;
  const double pr = audit::weight_attention_correlation(r.student.augmented.a_tilde, *r.teacher.attention, edges);
  report(7, rho && *rho > 0.0 && pr > 0.5, "attention alignment",
         "bin Spearman " + (rho ? fmt(*rho) : std::string("undefined")) + " over " + std::to_string(nonempty) +
             " nonempty bins, weight/attention Pearson " + fmt(pr));
}

}  // namespace

int main() {
  const auto start = Clock::now();
  guarded(1, "gradcheck over all composites", criterion_gradcheck);
  guarded(2, "loss/metric identities", criterion_identities);

  const auto t_sbm = Clock::now();
  const Graph g = generate_sbm(SbmConfig{});
  guarded(3, "SBM generator fidelity", [&] { criterion_sbm(g, seconds_since(t_sbm)); });

  std::vector<TrainResult> trained_teachers;
  Run4 run4;
  guarded(4, "distillation fidelity (GAT teacher, both)", [&] {
    const auto t0 = Clock::now();
    run4.teacher = train_supervised(ModelKind::Gat, g, teacher_config(1));
    run4.student = m2d_distill(g, run4.teacher.logits, distill_config(Variant::Both, 1));
    run4.secs = seconds_since(t0);
    const StudentMetrics m = evaluate_logits(run4.student.student_logits, g, &run4.teacher.logits);
    trained_teachers.push_back(run4.teacher);
    report(4, *m.fidelity >= 0.85 && run4.secs < 600.0, "distillation fidelity (GAT teacher, both)",
           "test agreement " + fmt(*m.fidelity) + ", teacher acc " + fmt(test_accuracy(run4.teacher.logits, g)) +
               ", student acc " + fmt(m.test_accuracy) + ", " + fmt(run4.secs, 1) + " s");
  });

  guarded(5, "variant ordering over 5 seeds", [&] {
    std::vector<double> feat, none, vanilla;
    int wins = 0;
    for (std::uint64_t s = 1; s <= 5; ++s) {
      TrainResult t = train_supervised(ModelKind::Gat, g, teacher_config(s));
      feat.push_back(test_accuracy(m2d_distill(g, t.logits, distill_config(Variant::Feat, s)).student_logits, g));
      none.push_back(test_accuracy(m2d_distill(g, t.logits, distill_config(Variant::None, s)).student_logits, g));
      vanilla.push_back(test_accuracy(vanilla_student(g, s).logits, g));
      wins += feat.back() > vanilla.back();
      trained_teachers.push_back(std::move(t));
    }
    const bool ok = mean(feat) >= mean(none) - 0.005 && wins >= 4;
    report(5, ok, "variant ordering over 5 seeds",
           "feat " + list(feat) + " mean " + fmt(mean(feat)) + "; none " + list(none) + " mean " + fmt(mean(none)) +
               "; vanilla " + list(vanilla) + "; feat > vanilla in " + std::to_string(wins) + "/5");
  });

  guarded(6, "fairness transfer over 5 seeds", [&] {
    std::vector<double> dp_both, dp_van, acc_both, acc_van, dp_teacher;
    for (std::uint64_t s = 1; s <= 5; ++s) {
      TrainResult t = train_supervised(ModelKind::Gat, g, teacher_config(s, 1.0));
      dp_teacher.push_back(*evaluate_logits(t.logits, g).dp);
      const StudentMetrics mb = evaluate_logits(m2d_distill(g, t.logits, distill_config(Variant::Both, s)).student_logits, g);
      const StudentMetrics mv = evaluate_logits(vanilla_student(g, s).logits, g);
      dp_both.push_back(*mb.dp);
      dp_van.push_back(*mv.dp);
      acc_both.push_back(mb.test_accuracy);
      acc_van.push_back(mv.test_accuracy);
    }
    const double drop = mean(acc_van) - mean(acc_both);
    const bool ok = mean(dp_both) <= 0.5 * mean(dp_van) && drop <= 0.05;
    report(6, ok, "fairness transfer over 5 seeds",
           "DP both " + fmt(mean(dp_both)) + " vs vanilla " + fmt(mean(dp_van)) + " (fair teacher " + fmt(mean(dp_teacher)) +
               "), accuracy both " + fmt(mean(acc_both)) + " vs vanilla " + fmt(mean(acc_van)) + ", drop " +
               fmt(100.0 * drop, 2) + " points");
  });

  guarded(7, "attention alignment", [&] {
    if (!run4.teacher.attention) throw std::runtime_error("criterion 4 run unavailable");
    criterion_alignment(g, run4);
  });

  guarded(8, "minimum-norm device and softmax order", [&] {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> gauss;
    double worst = 0;
    for (int k = 0; k < 20; ++k) {
      Matrix u(3, 8), t(3, 1);
      for (double& v : u.data()) v = gauss(rng);
      for (double& v : t.data()) v = gauss(rng);
      worst = std::max(worst, audit::min_norm_check(u, t).relative_gap);
    }
    std::size_t pairs = 0, violations = 0;
    for (const auto& t : trained_teachers) {
      const auto c = audit::attention_order_check(*t.scores, *t.attention, closed_neighbourhood(g.adjacency));
      pairs += c.pairs;
      violations += c.violations;
    }
    report(8, worst < 1e-4 && violations == 0 && pairs > 0, "minimum-norm device and softmax order",
           "worst gap " + std::to_string(worst) + " over 20 systems; " + std::to_string(violations) + " order violations in " +
               std::to_string(pairs) + " pairs over " + std::to_string(trained_teachers.size()) + " trained GAT teachers");
  });

  guarded(9, "CLI determinism and provenance", [&] {
    const fs::path dir = fs::temp_directory_path() / ("m2d_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const std::string cli = M2D_CLI_PATH;
    auto d = [&](const char* s) { return (dir / s).string(); };
    std::vector<std::string> problems;
    auto step = [&](const std::string& args) {
      if (sh(cli + " " + args) != 0) problems.push_back("failed: " + args);
    };
    step("generate-sbm --n 200 --seed 11 --out " + d("data"));
    step("train-teacher --model gat --data " + d("data") + " --epochs 60 --seed 2 --out " + d("teacher"));
    step("distill --data " + d("data") + " --teacher " + d("teacher") + " --t-max 8 --seed 2 --out " + d("run"));
    step("evaluate --data " + d("data") + " --run " + d("run") + " --teacher " + d("teacher"));
    step("audit --data " + d("data") + " --run " + d("run") + " --teacher " + d("teacher") + " --out " + d("audit"));
    const std::vector<std::pair<std::string, fs::path>> runs{{"generate-sbm", dir / "data"},
                                                             {"train-teacher", dir / "teacher"},
                                                             {"distill", dir / "run"},
                                                             {"evaluate", dir / "run" / "evaluate"},
                                                             {"audit", dir / "audit"}};
    std::size_t compared = 0;
    for (const auto& [cmd, out] : runs) {
      if (!fs::exists(out / "resolved_config.json")) {
        problems.push_back("no resolved_config.json in " + out.string());
        continue;
      }
      const fs::path again = dir / ("again_" + cmd);
      step(cmd + " --config " + (out / "resolved_config.json").string() + " --out " + again.string());
      for (const char* f : {"metrics.json", "features.csv", "edges.csv", "correlations.json"}) {
        if (!fs::exists(out / f)) continue;
        ++compared;
        if (slurp(out / f) != slurp(again / f)) problems.push_back(cmd + " " + f + " differs on re-run");
      }
    }
    fs::remove_all(dir);
    std::string detail = std::to_string(compared) + " artifacts compared across 5 subcommands";
    for (const auto& p : problems) detail += "; " + p;
    report(9, problems.empty() && compared >= 5, "CLI determinism and provenance", detail);
  });

  std::cout << "total " << fmt(seconds_since(start), 1) << " s, " << failures << " criteria failed" << std::endl;
  return failures == 0 ? 0 : 1;
}
