#pragma once
// Model-to-data distillation: a feature learner and a structure learner turn
// the student's embeddings into extra node features and learned edge weights.
// Student parameters and graph-learner parameters are optimized alternately
// on split objectives; the product is an augmented graph.

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2d/autodiff.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/losses.hpp"
#include "m2d/metrics.hpp"
#include "m2d/models.hpp"
#include "m2d/optim.hpp"

namespace m2d {

enum class Variant { Feat, Adj, Both, None };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Feat: return "feat";
    case Variant::Adj: return "adj";
    case Variant::Both: return "both";
    case Variant::None: return "none";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "feat") return Variant::Feat;
  if (s == "adj") return Variant::Adj;
  if (s == "both") return Variant::Both;
  if (s == "none") return Variant::None;
  throw std::invalid_argument("unknown variant: " + s);
}

inline bool learns_features(Variant v) { return v == Variant::Feat || v == Variant::Both; }
inline bool learns_structure(Variant v) { return v == Variant::Adj || v == Variant::Both; }

struct M2dConfig {
  Variant variant = Variant::Both;
  ModelKind student = ModelKind::Gcn;
  double gamma_blend = 0.2;
  double beta = 0.1;
  double lambda_dis = 0.5;
  double lambda_div = 1.0;
  double lambda_deg = 0.1;
  double lambda_sparse = 0.1;
  double tau = 2.0;
  std::size_t d_f = 2;
  std::size_t t_max = 40;
  std::size_t inner_steps_student = 5;
  std::size_t inner_steps_graph = 5;
  double lr_student = 0.01;
  double lr_graph = 0.01;
  double weight_decay = 5e-4;
  std::size_t patience = 150;
  std::size_t hidden = 16;
  std::size_t feature_hidden = 16;
  std::size_t structure_hidden = 8;
  /// Initial bias of the structure learner output unit; negative values start
  /// the learned weights sparse.
  double structure_bias_init = -4.0;
  std::uint64_t seed = 0;

  /// Applies the variant contract: feat forces gamma = 0, adj forces d_f = 0.
  M2dConfig resolved() const {
    M2dConfig c = *this;
    if (c.variant == Variant::Feat || c.variant == Variant::None) c.gamma_blend = 0.0;
    if (c.variant == Variant::Adj || c.variant == Variant::None) c.d_f = 0;
    return c;
  }

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(gamma_blend) || !unit(beta)) throw std::invalid_argument("M2dConfig: gamma and beta must lie in [0,1]");
    if (!unit(lambda_dis)) throw std::invalid_argument("M2dConfig: lambda_dis must lie in [0,1]");
    if (lambda_div < 0 || lambda_deg < 0 || lambda_sparse < 0) throw std::invalid_argument("M2dConfig: lambdas must be >= 0");
    if (!(tau > 0)) throw std::invalid_argument("M2dConfig: tau must be positive");
    if (learns_features(variant) && d_f == 0) throw std::invalid_argument("M2dConfig: d_f must be >= 1 when learning features");
    if (t_max == 0 || inner_steps_student == 0) throw std::invalid_argument("M2dConfig: t_max and inner_steps_student must be positive");
    if (!(lr_student > 0) || !(lr_graph > 0) || patience == 0 || hidden == 0)
      throw std::invalid_argument("M2dConfig: learning rates, patience and hidden must be positive");
  }

  /// The supervised-training view used by the student and the plain-KD baseline.
  TrainConfig student_train_config() const {
    TrainConfig t;
    t.lr = lr_student;
    t.epochs = t_max * inner_steps_student;
    t.patience = patience;
    t.hidden = hidden;
    t.weight_decay = weight_decay;
    t.seed = seed;
    return t;
  }
};

// ---------------------------------------------------------------------------
// Learners

/// Feature learner f_phi: relu(H W1 + b1) W2 + b2, d_h -> d_f.
inline ParamSet init_feature_learner(std::size_t d_h, std::size_t hidden, std::size_t d_f, Rng& rng) {
  return {{"feat.w1", glorot(d_h, hidden, rng)},
          {"feat.b1", Matrix(1, hidden)},
          {"feat.w2", glorot(hidden, d_f, rng)},
          {"feat.b2", Matrix(1, d_f)}};
}

inline Tensor feature_learner_forward(const TensorMap& p, const Tensor& h_s) {
  if (h_s.cols() != param(p, "feat.w1").rows()) throw ad::ShapeError("feature_learner_forward: embedding width");
  Tensor hidden = ad::relu(ad::add(ad::matmul(h_s, param(p, "feat.w1")), param(p, "feat.b1")));
  return ad::add(ad::matmul(hidden, param(p, "feat.w2")), param(p, "feat.b2"));
}

/// Structure learner f_a on node pairs. The first layer is split into
/// `struct.a` (applied to h_u + h_v, or to h_u when directed) and `struct.b`
/// (applied to |h_u - h_v|, or to h_v when directed); output is sigmoid.
inline ParamSet init_structure_learner(std::size_t d_h, std::size_t hidden, double bias_init, Rng& rng) {
  Matrix first = glorot(2 * d_h, hidden, rng);
  Matrix a(d_h, hidden), b(d_h, hidden);
  for (std::size_t i = 0; i < d_h; ++i)
    for (std::size_t j = 0; j < hidden; ++j) {
      a(i, j) = first(i, j);
      b(i, j) = first(d_h + i, j);
    }
  return {{"struct.a", std::move(a)},
          {"struct.b", std::move(b)},
          {"struct.b1", Matrix(1, hidden)},
          {"struct.w2", glorot(hidden, 1, rng)},
          {"struct.b2", Matrix::scalar(bias_init)}};
}

namespace detail {

struct PairMlp {
  const Matrix& h;
  const Matrix& a;
  const Matrix& b;
  const Matrix& b1;
  const Matrix& w2;
  double b2;
  std::size_t k;
  bool h_tracked = false;  // |h_u - h_v| is only a kink when h carries gradients

  // Pre-activation for an unordered pair given the per-node projection P = H A.
  void pre_undirected(const Matrix& proj, std::size_t u, std::size_t v, std::vector<double>& diff,
                      std::vector<double>& pre) const {
    const std::size_t dh = h.cols();
    for (std::size_t j = 0; j < dh; ++j) {
      diff[j] = h(u, j) - h(v, j);
      if (h_tracked) ad::detail::note_kink_input(diff[j]);
    }
    for (std::size_t c = 0; c < k; ++c) pre[c] = proj(u, c) + proj(v, c) + b1[c];
    for (std::size_t j = 0; j < dh; ++j) {
      const double ad_ = std::abs(diff[j]);
      if (ad_ == 0.0) continue;
      const double* brow = b.row_span(j).data();
      for (std::size_t c = 0; c < k; ++c) pre[c] += ad_ * brow[c];
    }
  }

  double out(const std::vector<double>& pre) const {
    if (ad::detail::kink_distance)
      for (std::size_t c = 0; c < k; ++c) ad::detail::note_kink_input(pre[c]);
    double o = b2;
    for (std::size_t c = 0; c < k; ++c) o += (pre[c] > 0.0 ? pre[c] : 0.0) * w2[c];
    return o >= 0.0 ? 1.0 / (1.0 + std::exp(-o)) : std::exp(o) / (1.0 + std::exp(o));
  }
};

inline Matrix project(const Matrix& h, const Matrix& w) {
  Matrix out(h.rows(), w.cols());
  ad::detail::gemm_acc(h, false, w, false, out);
  return out;
}

}  // namespace detail

/// W_uv = f_a(pair features of h_u, h_v) in [0,1], diagonal forced to 0.
/// Undirected input uses (h_u + h_v || |h_u - h_v|) so W = W^T exactly.
inline Tensor structure_learner_forward(const TensorMap& p, const Tensor& h_s, bool directed) {
  const Tensor& ta = param(p, "struct.a");
  const Tensor& tb = param(p, "struct.b");
  const Tensor& tb1 = param(p, "struct.b1");
  const Tensor& tw2 = param(p, "struct.w2");
  const Tensor& tb2 = param(p, "struct.b2");
  const std::size_t n = h_s.rows(), dh = h_s.cols(), k = ta.cols();
  if (ta.rows() != dh || tb.rows() != dh || tb.cols() != k) throw ad::ShapeError("structure_learner_forward: parameter shapes");

  auto hv = h_s.shared_value();
  auto av = ta.shared_value(), bv = tb.shared_value(), b1v = tb1.shared_value(), w2v = tw2.shared_value();
  const double b2 = tb2.value()[0];
  const Matrix proj_a = detail::project(*hv, *av);
  Matrix w(n, n);
  if (directed) {
    const Matrix proj_b = detail::project(*hv, *bv);
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v = 0; v < n; ++v) {
        if (u == v) continue;
        double o = b2;
        for (std::size_t c = 0; c < k; ++c) {
          const double pre = proj_a(u, c) + proj_b(v, c) + (*b1v)[c];
          ad::detail::note_kink_input(pre);
          o += (pre > 0.0 ? pre : 0.0) * (*w2v)[c];
        }
        w(u, v) = o >= 0.0 ? 1.0 / (1.0 + std::exp(-o)) : std::exp(o) / (1.0 + std::exp(o));
      }
  } else {
    detail::PairMlp mlp{*hv, *av, *bv, *b1v, *w2v, b2, k, h_s.tracked()};
    std::vector<double> diff(dh), pre(k);
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v = u + 1; v < n; ++v) {
        mlp.pre_undirected(proj_a, u, v, diff, pre);
        w(u, v) = w(v, u) = mlp.out(pre);
      }
  }
  auto wv = std::make_shared<const Matrix>(w);

  return ad::make_result(std::move(w), {&h_s, &ta, &tb, &tb1, &tw2, &tb2},
                         [=](const Matrix& g, std::span<Matrix* const> gi) {
    const Matrix& H = *hv;
    const Matrix& A = *av;
    const Matrix& B = *bv;
    const Matrix& W = *wv;
    Matrix dproj_a(n, k), dproj_b(n, k);
    std::vector<double> pre(k), dpre(k), diff(dh);
    double db2 = 0.0;
    auto accumulate_out = [&](double go) {
      for (std::size_t c = 0; c < k; ++c) {
        const double r = pre[c] > 0.0 ? pre[c] : 0.0;
        if (gi[4]) (*gi[4])[c] += go * r;
        dpre[c] = pre[c] > 0.0 ? go * (*w2v)[c] : 0.0;
        if (gi[3]) (*gi[3])[c] += dpre[c];
      }
      db2 += go;
    };
    if (directed) {
      const Matrix proj_b = detail::project(H, B);
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) {
          if (u == v) continue;
          const double go = g(u, v) * W(u, v) * (1.0 - W(u, v));
          if (go == 0.0) continue;
          for (std::size_t c = 0; c < k; ++c) pre[c] = proj_a(u, c) + proj_b(v, c) + (*b1v)[c];
          accumulate_out(go);
          for (std::size_t c = 0; c < k; ++c) {
            dproj_a(u, c) += dpre[c];
            dproj_b(v, c) += dpre[c];
          }
        }
    } else {
      detail::PairMlp mlp{H, A, B, *b1v, *w2v, b2, k};
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = u + 1; v < n; ++v) {
          const double go = (g(u, v) + g(v, u)) * W(u, v) * (1.0 - W(u, v));
          if (go == 0.0) continue;
          mlp.pre_undirected(proj_a, u, v, diff, pre);
          accumulate_out(go);
          for (std::size_t c = 0; c < k; ++c) {
            dproj_a(u, c) += dpre[c];
            dproj_a(v, c) += dpre[c];
          }
          if (gi[2]) {
            for (std::size_t j = 0; j < dh; ++j) {
              const double ad_ = std::abs(diff[j]);
              if (ad_ == 0.0) continue;
              double* grow = gi[2]->row_span(j).data();
              for (std::size_t c = 0; c < k; ++c) grow[c] += ad_ * dpre[c];
            }
          }
          if (gi[0]) {
            for (std::size_t j = 0; j < dh; ++j) {
              if (diff[j] == 0.0) continue;
              double s = 0.0;
              const double* brow = B.row_span(j).data();
              for (std::size_t c = 0; c < k; ++c) s += brow[c] * dpre[c];
              const double sg = diff[j] > 0.0 ? s : -s;
              (*gi[0])(u, j) += sg;
              (*gi[0])(v, j) -= sg;
            }
          }
        }
    }
    if (gi[5]) (*gi[5])[0] += db2;
    // P = H A (and H B when directed): push projection gradients to H and the weights.
    if (gi[1]) ad::detail::gemm_acc(H, true, dproj_a, false, *gi[1]);
    if (gi[0]) ad::detail::gemm_acc(dproj_a, false, A, true, *gi[0]);
    if (directed) {
      if (gi[2]) ad::detail::gemm_acc(H, true, dproj_b, false, *gi[2]);
      if (gi[0]) ad::detail::gemm_acc(dproj_b, false, B, true, *gi[0]);
    }
  });
}

/// (1 - gamma) A + gamma ((1 - beta) W + beta S), diagonal zeroed.
inline Tensor blend_adjacency(const Tensor& a, const Tensor& w, const Tensor& cos_sim, double gamma_blend, double beta) {
  if (gamma_blend < 0 || gamma_blend > 1 || beta < 0 || beta > 1)
    throw std::invalid_argument("blend_adjacency: gamma and beta must lie in [0,1]");
  Tensor learned = ad::add(ad::scale(w, 1.0 - beta), ad::scale(cos_sim, beta));
  return ad::zero_diagonal(ad::add(ad::scale(a, 1.0 - gamma_blend), ad::scale(learned, gamma_blend)));
}

// ---------------------------------------------------------------------------
// Objectives

struct LossTerms {
  Tensor cls, dis, div, graph;
};

/// (1 - lambda_dis) L_cls + lambda_dis L_dis; the regularizers never reach the student.
inline Tensor student_objective(const LossTerms& l, double lambda_dis) {
  return ad::add(ad::scale(l.cls, 1.0 - lambda_dis), ad::scale(l.dis, lambda_dis));
}

/// Student objective plus L_div and L_graph (each optional by variant).
inline Tensor graph_objective(const LossTerms& l, double lambda_dis) {
  Tensor total = student_objective(l, lambda_dis);
  if (l.div.rows() == 1) total = ad::add(total, l.div);
  if (l.graph.rows() == 1) total = ad::add(total, l.graph);
  return total;
}

// ---------------------------------------------------------------------------
// Augmented graph

struct AugmentedGraph {
  Graph base;
  Matrix a_tilde;
  Matrix x_tilde;
  std::size_t d_f = 0;

  /// The augmented graph in dataset form: weighted edges, extended features.
  Graph as_graph() const {
    Graph g = base;
    g.adjacency = a_tilde;
    g.features = x_tilde;
    g.weighted = true;
    return g;
  }
  Matrix learned_features() const {
    const std::size_t d = x_tilde.cols() - d_f;
    Matrix z(x_tilde.rows(), d_f);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < d_f; ++j) z(i, j) = x_tilde(i, d + j);
    return z;
  }
};

inline void save_dataset(const AugmentedGraph& aug, const fs::path& dir) { save_dataset(aug.as_graph(), dir); }

struct IterationRecord {
  std::size_t iteration = 0;
  double loss_cls = 0.0;
  double loss_dis = 0.0;
  double loss_div = 0.0;
  double loss_graph = 0.0;
  double val_acc = 0.0;
  double fidelity = 0.0;
};

struct TrainHistory {
  std::vector<IterationRecord> iterations;
  std::size_t best_step = 0;
  std::size_t student_steps = 0;
  std::size_t graph_steps = 0;
  std::string stop_reason;
};

inline nlohmann::json history_json(const TrainHistory& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : h.iterations)
    arr.push_back({{"iteration", r.iteration},
                   {"loss_cls", r.loss_cls},
                   {"loss_dis", r.loss_dis},
                   {"loss_div", r.loss_div},
                   {"loss_graph", r.loss_graph},
                   {"val_acc", r.val_acc},
                   {"fidelity", r.fidelity}});
  return {{"iterations", arr},
          {"best_student_step", h.best_step},
          {"student_steps", h.student_steps},
          {"graph_steps", h.graph_steps},
          {"stop_reason", h.stop_reason}};
}

struct DistillResult {
  AugmentedGraph augmented;
  ModelSpec student_spec;
  ParamSet student;  // encoder params plus head.u
  ParamSet learners;
  Matrix student_logits;
  TrainHistory history;
};

/// Alternating optimizer state. Exposed so individual steps can be tested.
class Distiller {
 public:
  Distiller(const Graph& g, const Matrix& teacher_logits, const M2dConfig& cfg)
      : g_(g), teacher_(teacher_logits), cfg_(cfg.resolved()), rng_(cfg_.seed) {
    cfg_.validate();
    if (teacher_.rows() != g_.n || teacher_.cols() != static_cast<std::size_t>(g_.num_classes))
      throw std::invalid_argument("m2d: teacher logits must be n x num_classes");
    for (std::size_t i = 0; i < g_.n; ++i)
      if (g_.splits.train[i])
        for (std::size_t c = 0; c < teacher_.cols(); ++c)
          if (!std::isfinite(teacher_(i, c))) throw std::invalid_argument("m2d: missing teacher logits on a training node");

    spec_ = spec_for(cfg_.student, g_, cfg_.student_train_config(), g_.feature_dim() + cfg_.d_f);
    student_ = init_model(spec_, rng_, "model");
    if (learns_features(cfg_.variant)) learners_.merge(init_feature_learner(cfg_.hidden, cfg_.feature_hidden, cfg_.d_f, rng_));
    if (learns_structure(cfg_.variant))
      learners_.merge(init_structure_learner(cfg_.hidden, cfg_.structure_hidden, cfg_.structure_bias_init, rng_));
    student_opt_.emplace(student_, names_of(student_), AdamConfig{.lr = cfg_.lr_student, .weight_decay = cfg_.weight_decay});
    graph_opt_.emplace(learners_, names_of(learners_), AdamConfig{.lr = cfg_.lr_graph});

    x_ = Tensor(g_.features);
    a_ = Tensor(g_.adjacency);
    if (learns_structure(cfg_.variant)) cos_ = Tensor(blend_similarity(g_.features));
    base_ctx_ = make_context(spec_, g_.adjacency);

    // H^0 = f_s(X, A) with the generated columns still zero.
    Matrix x0(g_.n, g_.feature_dim() + cfg_.d_f);
    for (std::size_t i = 0; i < g_.n; ++i)
      for (std::size_t j = 0; j < g_.feature_dim(); ++j) x0(i, j) = g_.features(i, j);
    h_prev_ = model_forward(spec_, as_constants(student_), base_ctx_, Tensor(x0)).h.value();
  }

  const M2dConfig& config() const { return cfg_; }
  const ModelSpec& student_spec() const { return spec_; }
  ParamSet& student_params() { return student_; }
  ParamSet& learner_params() { return learners_; }
  const Matrix& embeddings() const { return h_prev_; }

  struct Augmentation {
    Tensor x_tilde;
    Tensor a_tilde;
    Tensor z;
    Tensor w;
  };

  /// Z, X~, W, A~ from embeddings h using the given learner parameters.
  Augmentation augment(const TensorMap& learners, const Tensor& h) const {
    Augmentation out;
    out.x_tilde = x_;
    if (learns_features(cfg_.variant)) {
      out.z = feature_learner_forward(learners, h);
      out.x_tilde = ad::concat_cols(x_, out.z);
    }
    out.a_tilde = a_;
    if (learns_structure(cfg_.variant)) {
      out.w = structure_learner_forward(learners, h, g_.directed);
      out.a_tilde = blend_adjacency(a_, out.w, cos_, cfg_.gamma_blend, cfg_.beta);
    }
    return out;
  }

  /// Student forward on a (possibly tracked) augmentation.
  ModelOutput student_forward(const TensorMap& student, const Augmentation& aug) const {
    if (spec_.kind == ModelKind::Gcn && !learns_structure(cfg_.variant)) {
      return model_forward(spec_, student, base_ctx_, aug.x_tilde);
    }
    GraphContext ctx;
    ctx.adjacency = aug.a_tilde.value();
    if (spec_.kind == ModelKind::Gcn) ctx.a_norm = gcn_normalize(aug.a_tilde);
    if (spec_.kind == ModelKind::Graphormer) ctx.graphormer = base_ctx_.graphormer;
    return model_forward(spec_, student, ctx, aug.x_tilde);
  }

  LossTerms losses(const ModelOutput& out, const Augmentation& aug) const {
    LossTerms l;
    l.cls = loss_cls(out.logits, g_.labels, g_.splits.train);
    l.dis = loss_dis(out.logits, teacher_, cfg_.tau, g_.splits.train);
    if (learns_features(cfg_.variant)) l.div = loss_div(feature_gram(aug.x_tilde), g_.feature_dim(), cfg_.lambda_div);
    if (learns_structure(cfg_.variant)) l.graph = loss_graph(aug.w, cfg_.lambda_deg, cfg_.lambda_sparse);
    return l;
  }

  /// Fixed augmentation for the current outer iteration (constants).
  Augmentation current_augmentation() const { return augment(as_constants(learners_), Tensor(h_prev_)); }

  struct StepInfo {
    double objective = 0.0;
    double cls = 0.0;
    double dis = 0.0;
    double div = 0.0;
    double graph = 0.0;
    Matrix logits;  // pre-step logits
  };

  /// One Adam step on the student objective over Theta_s; learner
  /// parameters are not touched.
  StepInfo student_step(const Augmentation& aug) {
    ad::Tape tape;
    auto tp = tape.watch(student_);
    ModelOutput out = student_forward(tp, aug);
    LossTerms l = losses(out, aug);
    Tensor obj = student_objective(l, cfg_.lambda_dis);
    check_finite(obj);
    StepInfo info{obj.item(), l.cls.item(), l.dis.item(), 0.0, 0.0, out.logits.value()};
    student_opt_->step(student_, tape.backward(obj));
    return info;
  }

  /// One Adam step on the graph objective over Theta_g with the student frozen.
  StepInfo graph_step(const Matrix& h) {
    ad::Tape tape;
    auto tl = tape.watch(learners_);
    Augmentation aug = augment(tl, Tensor(h));
    ModelOutput out = student_forward(as_constants(student_), aug);
    LossTerms l = losses(out, aug);
    Tensor obj = graph_objective(l, cfg_.lambda_dis);
    check_finite(obj);
    StepInfo info{obj.item(), l.cls.item(), l.dis.item(), l.div.rows() == 1 ? l.div.item() : 0.0,
                  l.graph.rows() == 1 ? l.graph.item() : 0.0, out.logits.value()};
    if (obj.tracked()) graph_opt_->step(learners_, tape.backward(obj));
    return info;
  }

  /// Student embeddings on an augmentation with the current student.
  Matrix embed(const Augmentation& aug) const { return student_forward(as_constants(student_), aug).h.value(); }

  void set_embeddings(Matrix h) { h_prev_ = std::move(h); }

  DistillResult run() {
    DistillResult res;
    res.student_spec = spec_;
    StoppingRule stop(cfg_.patience);
    std::size_t step = 0;
    bool done = false;
    Augmentation best_aug;
    ParamSet best_student = student_;
    ParamSet best_learners = learners_;

    for (std::size_t t = 1; t <= cfg_.t_max && !done; ++t) {
      Augmentation aug = current_augmentation();
      IterationRecord rec;
      rec.iteration = t;
      for (std::size_t k = 0; k < cfg_.inner_steps_student; ++k) {
        const ParamSet snapshot = student_;
        StepInfo info = student_step(aug);
        ++step;
        const auto pred = metrics::argmax_rows(info.logits);
        const double val_acc = metrics::accuracy(pred, g_.labels, g_.splits.val);
        rec.loss_cls = info.cls;
        rec.loss_dis = info.dis;
        rec.val_acc = val_acc;
        rec.fidelity = metrics::accuracy(pred, metrics::argmax_rows(teacher_), g_.splits.val);
        if (stop.observe(val_acc, info.cls)) {
          best_student = snapshot;
          best_learners = learners_;
          best_aug = aug;
          res.history.best_step = step;
        }
        if (stop.should_stop()) {
          done = true;
          break;
        }
      }
      const Matrix h = embed(aug);
      if (!done && (learns_features(cfg_.variant) || learns_structure(cfg_.variant))) {
        for (std::size_t k = 0; k < cfg_.inner_steps_graph; ++k) {
          StepInfo info = graph_step(h);
          rec.loss_div = info.div;
          rec.loss_graph = info.graph;
          ++res.history.graph_steps;
        }
      }
      set_embeddings(h);
      res.history.iterations.push_back(rec);
    }
    res.history.student_steps = step;
    res.history.stop_reason = stop.reason();
    if (res.history.stop_reason == std::string("running")) res.history.stop_reason = "t_max";

    res.student = std::move(best_student);
    res.learners = std::move(best_learners);
    res.augmented = {g_, best_aug.a_tilde.value(), best_aug.x_tilde.value(), cfg_.d_f};
    res.student_logits = student_forward(as_constants(res.student), best_aug).logits.value();
    return res;
  }

 private:
  static void check_finite(const Tensor& t) {
    if (!std::isfinite(t.item())) throw ad::NumericError("m2d: non-finite loss (divergence)");
  }

  const Graph& g_;
  Matrix teacher_;
  M2dConfig cfg_;
  Rng rng_;
  ModelSpec spec_;
  ParamSet student_;
  ParamSet learners_;
  std::optional<Adam> student_opt_, graph_opt_;
  Tensor x_, a_, cos_;
  GraphContext base_ctx_;
  Matrix h_prev_;
};

/// Runs the alternating distillation. Variant none is the plain knowledge
/// distillation baseline: the student is trained on (A, X) with the same
/// optimizer, schedule and stopping rule as supervised training.
inline DistillResult m2d_distill(const Graph& g, const Matrix& teacher_logits, const M2dConfig& cfg) {
  const M2dConfig c = cfg.resolved();
  if (c.variant == Variant::None) {
    c.validate();
    if (teacher_logits.rows() != g.n || teacher_logits.cols() != static_cast<std::size_t>(g.num_classes))
      throw std::invalid_argument("m2d: teacher logits must be n x num_classes");
    const TrainConfig tc = c.student_train_config();
    TrainResult tr = fit_supervised(spec_for(c.student, g, tc), g, g.features, tc, {&teacher_logits, c.lambda_dis, c.tau});
    DistillResult res;
    res.student_spec = tr.spec;
    res.student = std::move(tr.params);
    res.student_logits = std::move(tr.logits);
    res.augmented = {g, g.adjacency, g.features, 0};
    res.history.best_step = tr.best_epoch;
    res.history.student_steps = tr.history.size();
    res.history.stop_reason = tr.stop_reason;
    for (const auto& e : tr.history) {
      IterationRecord r;
      r.iteration = e.epoch;
      r.loss_cls = e.train_loss;
      r.val_acc = e.val_acc;
      res.history.iterations.push_back(r);
    }
    return res;
  }
  Distiller d(g, teacher_logits, c);
  return d.run();
}

// ---------------------------------------------------------------------------
// Evaluation

struct StudentMetrics {
  double test_accuracy = 0.0;
  std::optional<double> dp;
  std::optional<double> eqop;
  std::optional<double> fidelity;
};

/// Student logits on an augmented graph.
inline Matrix student_logits(const ModelSpec& spec, const ParamSet& student, const AugmentedGraph& aug) {
  GraphContext ctx = make_context(spec, aug.a_tilde);
  return model_forward(spec, as_constants(student), ctx, Tensor(aug.x_tilde)).logits.value();
}

/// Test accuracy, DP/EQOP when the graph has a sensitive attribute and the
/// task is binary, and argmax agreement with the teacher when given.
inline StudentMetrics evaluate_logits(const Matrix& logits, const Graph& g, const Matrix* teacher_logits = nullptr) {
  StudentMetrics m;
  const auto pred = metrics::argmax_rows(logits);
  m.test_accuracy = metrics::accuracy(pred, g.labels, g.splits.test);
  if (g.sensitive && g.num_classes == 2) {
    m.dp = metrics::demographic_parity(pred, *g.sensitive, g.splits.test);
    m.eqop = metrics::equal_opportunity(pred, *g.sensitive, g.labels, g.splits.test);
  }
  if (teacher_logits) m.fidelity = metrics::accuracy(pred, metrics::argmax_rows(*teacher_logits), g.splits.test);
  return m;
}

inline StudentMetrics evaluate_student(const ModelSpec& spec, const ParamSet& student, const AugmentedGraph& aug,
                                       const Graph& g, const Matrix* teacher_logits = nullptr) {
  return evaluate_logits(student_logits(spec, student, aug), g, teacher_logits);
}

}  // namespace m2d
