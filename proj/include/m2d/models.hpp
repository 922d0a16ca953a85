#pragma once
// Teacher and student networks (GCN, GAT, Graphormer-lite, MLP), the linear
// prediction head, a covariance fairness penalty used to build a fair
// surrogate teacher, and supervised training with early stopping.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2d/autodiff.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/losses.hpp"
#include "m2d/metrics.hpp"
#include "m2d/optim.hpp"

namespace m2d {

enum class ModelKind { Gcn, Gat, Graphormer, Mlp };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Gcn: return "gcn";
    case ModelKind::Gat: return "gat";
    case ModelKind::Graphormer: return "graphormer";
    case ModelKind::Mlp: return "mlp";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "gcn") return ModelKind::Gcn;
  if (s == "gat") return ModelKind::Gat;
  if (s == "graphormer") return ModelKind::Graphormer;
  if (s == "mlp") return ModelKind::Mlp;
  throw std::invalid_argument("unknown model kind: " + s);
}

/// Architecture hyperparameters. All encoders have two layers.
struct ModelSpec {
  ModelKind kind = ModelKind::Gcn;
  std::size_t in_dim = 0;
  std::size_t hidden = 16;
  std::size_t num_classes = 2;
  std::size_t heads = 1;
  double leaky_slope = ad::kDefaultLeakySlope;
  int spd_cap = 5;
  int degree_cap = 16;
};

using TensorMap = std::map<std::string, Tensor>;

inline const Tensor& param(const TensorMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

/// Encoder parameters under `prefix`, plus the head matrix `head.u`
/// (hidden x num_classes, no bias).
inline ParamSet init_model(const ModelSpec& s, Rng& rng, const std::string& prefix = "model") {
  ParamSet p;
  const std::size_t h = s.hidden;
  switch (s.kind) {
    case ModelKind::Gcn:
      p[prefix + ".w0"] = glorot(s.in_dim, h, rng);
      p[prefix + ".w1"] = glorot(h, h, rng);
      break;
    case ModelKind::Gat:
      for (std::size_t layer = 0; layer < 2; ++layer)
        for (std::size_t hd = 0; hd < s.heads; ++hd) {
          const std::string base = prefix + ".l" + std::to_string(layer) + ".h" + std::to_string(hd);
          p[base + ".w"] = glorot(layer == 0 ? s.in_dim : h, h, rng);
          p[base + ".a_self"] = glorot(h, 1, rng);
          p[base + ".a_nbr"] = glorot(h, 1, rng);
        }
      break;
    case ModelKind::Graphormer: {
      p[prefix + ".in"] = glorot(s.in_dim, h, rng);
      p[prefix + ".centrality"] = glorot(static_cast<std::size_t>(s.degree_cap) + 1, h, rng);
      for (std::size_t layer = 0; layer < 2; ++layer) {
        const std::string base = prefix + ".l" + std::to_string(layer);
        for (const char* m : {".wq", ".wk", ".wv", ".wo", ".f1", ".f2"}) p[base + m] = glorot(h, h, rng);
        p[base + ".spatial"] = Matrix(1, static_cast<std::size_t>(s.spd_cap) + 2);
      }
      break;
    }
    case ModelKind::Mlp:
      p[prefix + ".w1"] = glorot(s.in_dim, h, rng);
      p[prefix + ".b1"] = Matrix(1, h);
      p[prefix + ".w2"] = glorot(h, h, rng);
      p[prefix + ".b2"] = Matrix(1, h);
      break;
  }
  p["head.u"] = glorot(h, s.num_classes, rng);
  return p;
}

/// H = Ahat relu(Ahat X W0) W1
inline Tensor gcn_forward(const TensorMap& p, const Tensor& a_norm, const Tensor& x, const std::string& prefix = "model") {
  if (a_norm.rows() != x.rows()) throw ad::ShapeError("gcn_forward: adjacency/features row mismatch");
  Tensor h1 = ad::relu(ad::matmul(a_norm, ad::matmul(x, param(p, prefix + ".w0"))));
  return ad::matmul(a_norm, ad::matmul(h1, param(p, prefix + ".w1")));
}

/// relu(X W1 + b1) W2 + b2
inline Tensor mlp_forward(const TensorMap& p, const Tensor& x, const std::string& prefix = "model") {
  Tensor h1 = ad::relu(ad::add(ad::matmul(x, param(p, prefix + ".w1")), param(p, prefix + ".b1")));
  return ad::add(ad::matmul(h1, param(p, prefix + ".w2")), param(p, prefix + ".b2"));
}

inline Tensor predict(const Tensor& head, const Tensor& h) {
  if (h.cols() != head.rows()) throw ad::ShapeError("predict: embedding width does not match head");
  return ad::matmul(h, head);
}

struct AttentionOutput {
  Tensor h;
  Matrix scores;     // layer-1 LeakyReLU scores e_vu, head-averaged, closed neighbourhoods only
  Matrix attention;  // layer-1 alpha_vu, head-averaged, row-stochastic
};

/// Closed-neighbourhood mask A + I over nonzero entries.
inline Matrix closed_neighbourhood(const Matrix& a) {
  Matrix m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = (i == j || a(i, j) != 0.0) ? 1.0 : 0.0;
  return m;
}

/// Two GAT layers; alpha_vu = softmax over u in N(v) U {v} of
/// LeakyReLU(a_self . W h_v + a_nbr . W h_u). Heads are averaged, relu between layers.
inline AttentionOutput gat_forward(const TensorMap& p, const Matrix& adjacency, const Tensor& x, const ModelSpec& s,
                                   const std::string& prefix = "model") {
  const std::size_t n = x.rows();
  if (adjacency.rows() != n) throw ad::ShapeError("gat_forward: adjacency/features row mismatch");
  const Matrix mask = closed_neighbourhood(adjacency);
  const Tensor ones_row(Matrix(1, n, 1.0));
  const Tensor ones_col(Matrix(n, 1, 1.0));
  AttentionOutput out;
  Tensor h = x;
  for (std::size_t layer = 0; layer < 2; ++layer) {
    Tensor acc;
    for (std::size_t hd = 0; hd < s.heads; ++hd) {
      const std::string base = prefix + ".l" + std::to_string(layer) + ".h" + std::to_string(hd);
      Tensor wh = ad::matmul(h, param(p, base + ".w"));
      Tensor e_self = ad::matmul(wh, param(p, base + ".a_self"));
      Tensor e_nbr = ad::matmul(wh, param(p, base + ".a_nbr"));
      Tensor scores = ad::leaky_relu(ad::add(ad::matmul(e_self, ones_row), ad::matmul(ones_col, ad::transpose(e_nbr))),
                                     s.leaky_slope);
      Tensor alpha = ad::masked_row_softmax(scores, mask);
      Tensor head_out = ad::matmul(alpha, wh);
      acc = hd == 0 ? head_out : ad::add(acc, head_out);
      if (layer == 0) {
        if (hd == 0) {
          out.scores = Matrix(n, n);
          out.attention = Matrix(n, n);
        }
        for (std::size_t k = 0; k < n * n; ++k) {
          if (mask[k] == 0.0) continue;
          out.scores[k] += scores.value()[k] / static_cast<double>(s.heads);
          out.attention[k] += alpha.value()[k] / static_cast<double>(s.heads);
        }
      }
    }
    if (s.heads > 1) acc = ad::scale(acc, 1.0 / static_cast<double>(s.heads));
    h = layer == 0 ? ad::relu(acc) : acc;
  }
  out.h = h;
  return out;
}

/// Graph-dependent inputs of the Graphormer encoder.
struct GraphormerInputs {
  std::vector<std::size_t> spd_bucket;  // n*n, row-major, values in [0, cap+1]
  Matrix degree_onehot;                 // n x (degree_cap + 1)
};

inline GraphormerInputs graphormer_inputs(const Matrix& adjacency, int spd_cap, int degree_cap) {
  const std::size_t n = adjacency.rows();
  GraphormerInputs in;
  auto spd = shortest_path_distances(adjacency, spd_cap);
  in.spd_bucket.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) in.spd_bucket[i * n + j] = static_cast<std::size_t>(spd[i][j]);
  in.degree_onehot = Matrix(n, static_cast<std::size_t>(degree_cap) + 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t deg = 0;
    for (std::size_t j = 0; j < n; ++j) deg += (i != j && adjacency(i, j) != 0.0);
    in.degree_onehot(i, std::min(deg, static_cast<std::size_t>(degree_cap))) = 1.0;
  }
  return in;
}

/// Input projection, then two layers of: add centrality embedding; full
/// softmax attention with logits QK^T/sqrt(d_K) + spatial bias[SPD bucket];
/// residual; relu feed-forward; residual. Layer attention matrices are
/// returned in `attention`.
inline Tensor graphormer_forward(const TensorMap& p, const GraphormerInputs& in, const Tensor& x, const ModelSpec& s,
                                 std::vector<Matrix>* attention = nullptr, const std::string& prefix = "model") {
  const std::size_t n = x.rows();
  if (in.degree_onehot.rows() != n) throw ad::ShapeError("graphormer_forward: inputs built for another graph");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(s.hidden));
  const Tensor onehot(in.degree_onehot);
  Tensor h = ad::matmul(x, param(p, prefix + ".in"));
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::string base = prefix + ".l" + std::to_string(layer);
    Tensor hc = ad::add(h, ad::matmul(onehot, param(p, prefix + ".centrality")));
    Tensor q = ad::matmul(hc, param(p, base + ".wq"));
    Tensor k = ad::matmul(hc, param(p, base + ".wk"));
    Tensor v = ad::matmul(hc, param(p, base + ".wv"));
    Tensor logits = ad::add(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_dk),
                            ad::lookup(param(p, base + ".spatial"), in.spd_bucket, n, n));
    Tensor alpha = ad::row_softmax(logits);
    if (attention) attention->push_back(alpha.value());
    Tensor h1 = ad::add(hc, ad::matmul(ad::matmul(alpha, v), param(p, base + ".wo")));
    h = ad::add(h1, ad::matmul(ad::relu(ad::matmul(h1, param(p, base + ".f1"))), param(p, base + ".f2")));
  }
  return h;
}

/// Everything a model needs about the graph, prepared once.
struct GraphContext {
  Tensor a_norm;  // GCN
  Matrix adjacency;
  std::optional<GraphormerInputs> graphormer;
};

inline GraphContext make_context(const ModelSpec& s, const Matrix& adjacency) {
  GraphContext c;
  c.adjacency = adjacency;
  if (s.kind == ModelKind::Gcn) c.a_norm = Tensor(gcn_normalize(adjacency));
  if (s.kind == ModelKind::Graphormer) c.graphormer = graphormer_inputs(adjacency, s.spd_cap, s.degree_cap);
  return c;
}

struct ModelOutput {
  Tensor h;
  Tensor logits;
  std::optional<Matrix> scores;
  std::optional<Matrix> attention;
};

inline ModelOutput model_forward(const ModelSpec& s, const TensorMap& p, const GraphContext& ctx, const Tensor& x) {
  ModelOutput out;
  switch (s.kind) {
    case ModelKind::Gcn: out.h = gcn_forward(p, ctx.a_norm, x); break;
    case ModelKind::Mlp: out.h = mlp_forward(p, x); break;
    case ModelKind::Gat: {
      auto g = gat_forward(p, ctx.adjacency, x, s);
      out.h = g.h;
      out.scores = std::move(g.scores);
      out.attention = std::move(g.attention);
      break;
    }
    case ModelKind::Graphormer: {
      std::vector<Matrix> att;
      out.h = graphormer_forward(p, *ctx.graphormer, x, s, &att);
      out.attention = att.front();
      break;
    }
  }
  out.logits = predict(param(p, "head.u"), out.h);
  return out;
}

inline TensorMap as_constants(const ParamSet& p) {
  TensorMap out;
  for (const auto& [k, v] : p) out.emplace(k, Tensor(v));
  return out;
}

/// Population covariance between predicted class-1 probabilities and s over
/// masked nodes, in absolute value.
inline Tensor covariance_penalty(const Tensor& prob, std::span<const int> s, const std::vector<bool>& mask) {
  if (prob.cols() != 1) throw ad::ShapeError("covariance_penalty: probabilities must be a column");
  auto idx = detail::require_mask(mask, prob.rows(), "covariance_penalty");
  const double m = static_cast<double>(idx.size());
  double s_mean = 0.0;
  bool saw0 = false, saw1 = false;
  for (std::size_t i : idx) {
    s_mean += s[i];
    (s[i] ? saw1 : saw0) = true;
  }
  if (!saw0 || !saw1) throw std::invalid_argument("fairness_penalty: mask covers a single sensitive group");
  s_mean /= m;
  Matrix centred(idx.size(), 1);
  for (std::size_t r = 0; r < idx.size(); ++r) centred(r, 0) = (s[idx[r]] - s_mean) / m;
  // cov(p, s) = sum_i p_i (s_i - mean s) / m
  Tensor cov = ad::sum(ad::mul(ad::gather_rows(prob, std::move(idx)), ad::constant(std::move(centred))));
  return ad::abs(cov);
}

/// |cov(sigmoid(logit_1 - logit_0), s)| over masked nodes; binary tasks only.
inline Tensor fairness_penalty(const Tensor& logits, std::span<const int> s, const std::vector<bool>& mask) {
  if (logits.cols() != 2) throw std::invalid_argument("fairness_penalty: binary task required");
  Tensor diff = ad::matmul(logits, ad::constant(Matrix::from_rows({{-1.0}, {1.0}})));
  return covariance_penalty(ad::sigmoid(diff), s, mask);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 0.01;
  std::size_t epochs = 200;
  std::size_t patience = 150;
  std::size_t hidden = 16;
  double weight_decay = 5e-4;
  std::size_t heads = 1;
  std::uint64_t seed = 0;
  double fair_weight = 0.0;

  void validate() const {
    if (!(lr > 0) || epochs == 0 || patience == 0 || hidden == 0 || heads == 0 || weight_decay < 0 || fair_weight < 0)
      throw std::invalid_argument("TrainConfig: values must be positive");
  }
};

/// Early stopping on validation accuracy (patience in steps), or convergence
/// of the classification loss: |L(t) - L(t - window)| < tol.
class StoppingRule {
 public:
  StoppingRule(std::size_t patience, std::size_t window = 10, double tol = 1e-5)
      : patience_(patience), window_(window), tol_(tol) {}

  /// Records one step; returns true when the step is a new best.
  bool observe(double val_acc, double cls_loss) {
    losses_.push_back(cls_loss);
    ++step_;
    if (step_ == 1 || val_acc > best_) {
      best_ = val_acc;
      best_step_ = step_;
      return true;
    }
    return false;
  }

  bool should_stop() const {
    if (step_ - best_step_ >= patience_) return true;
    if (losses_.size() > window_) {
      const double delta = losses_.back() - losses_[losses_.size() - 1 - window_];
      if (std::abs(delta) < tol_) return true;
    }
    return false;
  }

  const char* reason() const {
    if (step_ - best_step_ >= patience_) return "patience";
    return should_stop() ? "converged" : "running";
  }
  double best() const { return best_; }
  std::size_t best_step() const { return best_step_; }

 private:
  std::size_t patience_, window_;
  double tol_;
  std::size_t step_ = 0, best_step_ = 0;
  double best_ = -1.0;
  std::vector<double> losses_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  ModelSpec spec;
  ParamSet params;
  Matrix logits;
  std::optional<Matrix> scores;
  std::optional<Matrix> attention;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::string stop_reason;
};

inline nlohmann::json history_json(const std::vector<EpochRecord>& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : h)
    arr.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_acc", r.val_acc}});
  return arr;
}

/// Optional distillation target mixed into the supervised objective as
/// (1 - lambda_dis) L_cls + lambda_dis L_dis.
struct SoftTargets {
  const Matrix* teacher_logits = nullptr;
  double lambda_dis = 0.0;
  double tau = 2.0;
};

/// Adam on the supervised objective with early stopping. The returned logits
/// come from the best-validation parameters.
inline TrainResult fit_supervised(const ModelSpec& spec, const Graph& g, const Matrix& features, const TrainConfig& cfg,
                                  SoftTargets soft = {}) {
  cfg.validate();
  if (features.rows() != g.n) throw ad::ShapeError("fit_supervised: feature rows differ from node count");
  if (cfg.fair_weight > 0.0 && !g.sensitive) throw std::invalid_argument("fit_supervised: fairness penalty needs a sensitive attribute");
  Rng rng(cfg.seed);
  TrainResult res;
  res.spec = spec;
  ParamSet params = init_model(spec, rng);
  const GraphContext ctx = make_context(spec, g.adjacency);
  const Tensor x(features);
  Adam opt(params, names_of(params), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  StoppingRule stop(cfg.patience);
  ParamSet best = params;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    ad::Tape tape;
    auto tp = tape.watch(params);
    ModelOutput out = model_forward(spec, tp, ctx, x);
    Tensor cls = loss_cls(out.logits, g.labels, g.splits.train);
    Tensor loss = cls;
    if (soft.teacher_logits && soft.lambda_dis > 0.0) {
      loss = ad::add(ad::scale(cls, 1.0 - soft.lambda_dis),
                     ad::scale(loss_dis(out.logits, *soft.teacher_logits, soft.tau, g.splits.train), soft.lambda_dis));
    }
    if (cfg.fair_weight > 0.0)
      loss = ad::add(loss, ad::scale(fairness_penalty(out.logits, *g.sensitive, g.splits.train), cfg.fair_weight));
    if (!std::isfinite(loss.item())) throw ad::NumericError("training diverged: non-finite loss");

    // Validation metrics come from the pre-step forward pass.
    const auto pred = metrics::argmax_rows(out.logits.value());
    const double val_acc = metrics::accuracy(pred, g.labels, g.splits.val);
    const double val_loss = loss_cls(out.logits.detach(), g.labels, g.splits.val).item();
    const ParamSet snapshot = params;
    auto grads = tape.backward(loss);
    opt.step(params, grads);

    res.history.push_back({epoch, cls.item(), val_loss, val_acc});
    if (stop.observe(val_acc, cls.item())) {
      best = snapshot;
      res.best_epoch = epoch;
    }
    if (stop.should_stop()) break;
  }
  res.stop_reason = stop.reason();
  res.params = std::move(best);
  ModelOutput final_out = model_forward(spec, as_constants(res.params), ctx, x);
  res.logits = final_out.logits.value();
  res.scores = std::move(final_out.scores);
  res.attention = std::move(final_out.attention);
  return res;
}

inline ModelSpec spec_for(ModelKind kind, const Graph& g, const TrainConfig& cfg, std::size_t in_dim = 0) {
  ModelSpec s;
  s.kind = kind;
  s.in_dim = in_dim ? in_dim : g.feature_dim();
  s.hidden = cfg.hidden;
  s.num_classes = static_cast<std::size_t>(g.num_classes);
  s.heads = cfg.heads;
  return s;
}

/// Supervised training on the graph's own features (cross-entropy plus the
/// optional fairness penalty).
inline TrainResult train_supervised(ModelKind kind, const Graph& g, const TrainConfig& cfg) {
  return fit_supervised(spec_for(kind, g, cfg), g, g.features, cfg);
}

}  // namespace m2d
