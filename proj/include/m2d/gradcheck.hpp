#pragma once
// Finite-difference suite over every differentiable composite: the four
// losses, both split objectives and all model forwards, each on a small
// random graph.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/distill.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/losses.hpp"
#include "m2d/models.hpp"

namespace m2d {

struct GradcheckCase {
  std::string module;
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
  // Only filled for failures: error at a smaller step against an absolute
  // floor of 1e-6, which separates round-off/truncation from a wrong gradient.
  double refined_error = 0.0;
};

inline constexpr double kGradcheckTolerance = 1e-5;
inline constexpr double kGradcheckStep = 1e-4;
/// Minimum |input| of any relu/leaky_relu/abs at the evaluation point.
inline constexpr double kKinkMargin = 1e-3;

/// Random undirected graph with 6-10 nodes, every class present in train and
/// both sensitive groups present among training nodes.
inline Graph random_small_graph(std::uint64_t seed, std::size_t d = 3, int num_classes = 2) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> nd(6, 10);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  Graph g;
  g.n = nd(rng);
  g.num_classes = num_classes;
  g.adjacency = Matrix(g.n, g.n);
  for (std::size_t u = 0; u < g.n; ++u)
    for (std::size_t v = u + 1; v < g.n; ++v)
      if (coin(rng)) g.adjacency(u, v) = g.adjacency(v, u) = 1.0;
  g.features = Matrix(g.n, d);
  for (double& v : g.features.data()) v = gauss(rng);
  g.labels.resize(g.n);
  std::vector<int> s(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    g.labels[i] = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    s[i] = static_cast<int>((i / 2) % 2);
  }
  g.sensitive = s;
  g.splits.train.assign(g.n, false);
  g.splits.val.assign(g.n, false);
  g.splits.test.assign(g.n, false);
  for (std::size_t i = 0; i < g.n; ++i) {
    if (i < 4) g.splits.train[i] = true;
    else if (i < 5) g.splits.val[i] = true;
    else g.splits.test[i] = true;
  }
  return g;
}

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = gauss(rng);
  return m;
}

/// Initialization-scale values with every entry jittered, so biases and
/// tables start off zero (zero biases put relu units exactly on a kink).
inline void randomize(ParamSet& params, Rng& rng, double jitter = 0.1) {
  std::normal_distribution<double> gauss(0.0, jitter);
  for (auto& [name, value] : params)
    for (double& v : value.data()) v += gauss(rng);
}

/// Draws parameter sets until the loss is smooth within kKinkMargin of the
/// base point, then compares analytic and central-difference gradients.
inline GradcheckCase grad_case(std::string module, std::string name, const ad::LossFn& fn,
                               const std::function<ParamSet()>& draw) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    ParamSet params = draw();
    double margin = 0.0;
    {
      ad::KinkMonitor monitor;
      fn(as_constants(params));
      margin = monitor.min_distance();
    }
    if (margin < kKinkMargin) continue;
    GradcheckCase c{std::move(module), std::move(name), ad::finite_diff_check(fn, params, kGradcheckStep), false};
    c.passed = c.max_rel_error < kGradcheckTolerance;
    if (!c.passed) c.refined_error = ad::finite_diff_check(fn, params, 1e-5, 1e-6);
    return c;
  }
  throw std::runtime_error("gradcheck: no smooth evaluation point found for " + name);
}

}  // namespace detail

inline std::vector<GradcheckCase> gradcheck_losses(std::uint64_t seed) {
  Rng rng(seed);
  const Graph g = random_small_graph(seed, 3, 3);
  const std::size_t n = g.n;
  std::vector<GradcheckCase> out;

  out.push_back(detail::grad_case("losses", "loss_cls", [&](const TensorMap& p) {
    return loss_cls(param(p, "logits"), g.labels, g.splits.train);
  }, [&] { return ParamSet{{"logits", detail::random_matrix(n, 3, rng)}}; }));

  const Matrix teacher = detail::random_matrix(n, 3, rng, 2.0);
  out.push_back(detail::grad_case("losses", "loss_dis", [&](const TensorMap& p) {
    return loss_dis(param(p, "logits"), teacher, 2.0, g.splits.train);
  }, [&] { return ParamSet{{"logits", detail::random_matrix(n, 3, rng)}}; }));

  const Tensor x(g.features);
  out.push_back(detail::grad_case("losses", "loss_div", [&](const TensorMap& p) {
    return loss_div(feature_gram(ad::concat_cols(x, param(p, "z"))), g.feature_dim(), 1.0);
  }, [&] { return ParamSet{{"z", detail::random_matrix(n, 2, rng)}}; }));

  std::uniform_real_distribution<double> unit(0.05, 0.95);
  auto uniform = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& v : m.data()) v = unit(rng);
    return ParamSet{{"w", m}};
  };
  out.push_back(detail::grad_case("losses", "loss_graph", [&](const TensorMap& p) {
    return loss_graph(param(p, "w"), 0.3, 0.7);
  }, [&] { return uniform(n, n); }));

  out.push_back(detail::grad_case("losses", "fairness_penalty", [&](const TensorMap& p) {
    return fairness_penalty(param(p, "w"), *g.sensitive, g.splits.train);
  }, [&] { return uniform(n, 2); }));
  return out;
}

inline std::vector<GradcheckCase> gradcheck_models(std::uint64_t seed) {
  std::vector<GradcheckCase> out;
  const Graph g = random_small_graph(seed, 3, 2);
  for (ModelKind kind : {ModelKind::Gcn, ModelKind::Gat, ModelKind::Graphormer, ModelKind::Mlp}) {
    for (std::size_t heads : {std::size_t{1}, std::size_t{2}}) {
      if (heads == 2 && kind != ModelKind::Gat) continue;
      ModelSpec s;
      s.kind = kind;
      s.in_dim = g.feature_dim();
      s.hidden = 4;
      s.num_classes = 2;
      s.heads = heads;
      Rng rng(seed + 17);
      const ParamSet init = init_model(s, rng);
      ParamSet params;
      const GraphContext ctx = make_context(s, g.adjacency);
      const Tensor x(g.features);
      std::string name = to_string(kind) + "_forward+loss_cls";
      if (heads == 2) name += " (2 heads)";
      out.push_back(detail::grad_case("models", name, [&](const TensorMap& p) {
        return loss_cls(model_forward(s, p, ctx, x).logits, g.labels, g.splits.train);
      }, [&] {
        params = init;
        detail::randomize(params, rng);
        return params;
      }));
    }
  }
  return out;
}

/// Both split objectives of the alternating loop on a 6-10 node graph with
/// d = 3 and d_f = 2, against the parameter group each objective updates.
inline std::vector<GradcheckCase> gradcheck_m2d(std::uint64_t seed) {
  std::vector<GradcheckCase> out;
  const Graph g = random_small_graph(seed, 3, 2);
  Rng rng(seed + 29);
  const Matrix teacher = detail::random_matrix(g.n, 2, rng, 2.0);
  for (Variant v : {Variant::Feat, Variant::Adj, Variant::Both}) {
    M2dConfig cfg;
    cfg.variant = v;
    cfg.d_f = 2;
    cfg.hidden = 4;
    cfg.feature_hidden = 4;
    cfg.structure_hidden = 4;
    cfg.structure_bias_init = 0.0;
    cfg.gamma_blend = 0.5;
    cfg.beta = 0.3;
    cfg.lambda_deg = 0.5;
    cfg.lambda_sparse = 0.5;
    cfg.seed = seed;
    Distiller d(g, teacher, cfg);
    const ParamSet student_init = d.student_params();
    detail::randomize(d.student_params(), rng);
    const ParamSet learner_init = d.learner_params();
    detail::randomize(d.learner_params(), rng, 0.5);
    const Matrix h = d.embed(d.current_augmentation());
    const double lambda_dis = d.config().lambda_dis;

    out.push_back(detail::grad_case("m2d", "graph_objective [" + to_string(v) + "]", [&](const TensorMap& p) {
      auto aug = d.augment(p, Tensor(h));
      auto o = d.student_forward(as_constants(d.student_params()), aug);
      return graph_objective(d.losses(o, aug), lambda_dis);
    }, [&] {
      ParamSet p = learner_init;
      detail::randomize(p, rng, 0.5);
      return p;
    }));

    const auto fixed = d.current_augmentation();
    out.push_back(detail::grad_case("m2d", "student_objective [" + to_string(v) + "]", [&](const TensorMap& p) {
      auto o = d.student_forward(p, fixed);
      return student_objective(d.losses(o, fixed), lambda_dis);
    }, [&] {
      ParamSet p = student_init;
      detail::randomize(p, rng);
      return p;
    }));
  }
  return out;
}

/// module: all, losses, models or m2d.
inline std::vector<GradcheckCase> run_gradcheck(const std::string& module, std::uint64_t seed = 1) {
  if (module != "all" && module != "losses" && module != "models" && module != "m2d")
    throw std::invalid_argument("gradcheck: unknown module " + module);
  std::vector<GradcheckCase> out;
  auto append = [&](std::vector<GradcheckCase> v) { out.insert(out.end(), v.begin(), v.end()); };
  if (module == "all" || module == "losses") append(gradcheck_losses(seed));
  if (module == "all" || module == "models") append(gradcheck_models(seed));
  if (module == "all" || module == "m2d") append(gradcheck_m2d(seed));
  return out;
}

}  // namespace m2d
