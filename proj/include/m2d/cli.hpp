#pragma once
// Command-line driver. Every subcommand is a function of (files on disk,
// resolved config); the resolved config is written next to the outputs.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "m2d/audit.hpp"
#include "m2d/distill.hpp"
#include "m2d/gradcheck.hpp"
#include "m2d/graphdata.hpp"
#include "m2d/models.hpp"

namespace m2d::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every key a run config may hold, with its default. Keys are shared
/// between subcommands (hidden, lr, seed ...).
inline json default_config() {
  return json{
      // paths
      {"data", ""},
      {"teacher", ""},
      {"run", ""},
      {"seed", 0u},
      {"seeds", json::array()},
      // generate-sbm
      {"n", 1000u},
      {"blocks", {600u, 400u}},
      {"intra-p", 0.05},
      {"inter-p", 0.005},
      {"p-bias", 0.7},
      {"d", 20u},
      {"d-noise", 8u},
      {"signal-gamma", 1.0},
      {"tune-assortativity", true},
      {"target-assortativity", 0.77},
      // supervised training (teacher, and the student in distill)
      {"model", "gat"},
      {"hidden", 16u},
      {"lr", 0.01},
      {"epochs", 200u},
      {"patience", 150u},
      {"weight-decay", 5e-4},
      {"heads", 1u},
      {"fair-weight", 0.0},
      // distill
      {"variant", "both"},
      {"student", "gcn"},
      {"d-f", 2u},
      {"gamma", 0.2},
      {"beta", 0.1},
      {"tau", 2.0},
      {"lambda-dis", 0.5},
      {"lambda-div", 1.0},
      {"lambda-deg", 0.1},
      {"lambda-sparse", 0.1},
      {"t-max", 40u},
      {"inner-student", 5u},
      {"inner-graph", 5u},
      {"lr-graph", 0.01},
      {"feature-hidden", 16u},
      {"structure-hidden", 8u},
      {"structure-bias-init", -4.0},
      // audit
      {"bins", 10u},
      {"sigma", 1.0},
      {"add-thresh", 0.5},
      {"remove-thresh", 0.1},
      // gradcheck
      {"module", "all"},
  };
}

inline const std::map<std::string, std::vector<std::string>>& subcommand_keys() {
  static const std::map<std::string, std::vector<std::string>> keys{
      {"generate-sbm", {"n", "blocks", "intra-p", "inter-p", "p-bias", "d", "d-noise", "signal-gamma",
                        "tune-assortativity", "target-assortativity", "seed"}},
      {"train-teacher", {"model", "data", "hidden", "lr", "epochs", "patience", "weight-decay", "heads", "fair-weight",
                         "seed", "seeds"}},
      {"distill", {"data", "teacher", "variant", "student", "d-f", "gamma", "beta", "tau", "lambda-dis", "lambda-div",
                   "lambda-deg", "lambda-sparse", "t-max", "inner-student", "inner-graph", "lr", "lr-graph", "hidden",
                   "feature-hidden", "structure-hidden", "structure-bias-init", "weight-decay", "patience", "seed",
                   "seeds"}},
      {"evaluate", {"data", "run", "teacher"}},
      {"audit", {"data", "run", "teacher", "bins", "sigma", "add-thresh", "remove-thresh"}},
      {"gradcheck", {"module", "seed"}},
  };
  return keys;
}

namespace detail {

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw UsageError("--" + key + ": expected a non-negative integer, got '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw UsageError("--" + key + ": value out of range");
  }
}

inline double parse_number(const std::string& key, const std::string& s) {
  try {
    return io::parse_double(s, "--" + key);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

/// Converts a flag string to the JSON type of the key's default.
inline json parse_flag(const std::string& key, const std::string& s, const json& like) {
  switch (like.type()) {
    case json::value_t::number_unsigned: return parse_unsigned(key, s);
    case json::value_t::number_integer:
    case json::value_t::number_float: return parse_number(key, s);
    case json::value_t::boolean:
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw UsageError("--" + key + ": expected true or false");
    case json::value_t::array: {
      json arr = json::array();
      for (const auto& part : io::split_commas(s))
        if (!part.empty()) arr.push_back(parse_unsigned(key, std::string(part)));
      return arr;
    }
    default: return s;
  }
}

inline bool same_kind(const json& v, const json& like) {
  switch (like.type()) {
    case json::value_t::number_unsigned: return v.is_number_unsigned();
    case json::value_t::number_integer:
    case json::value_t::number_float: return v.is_number();
    case json::value_t::array:
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_number_unsigned()) return false;
      return true;
    default: return v.type() == like.type();
  }
}

}  // namespace detail

/// defaults < config file < flags. `out` and `config` are not part of the
/// stored copy: where a run writes does not change what it computes.
inline json resolve_config(const std::string& command, const std::optional<fs::path>& config_file,
                           const std::map<std::string, std::string>& flags) {
  const json defaults = default_config();
  json cfg = defaults;
  bool blocks_set = flags.count("blocks") > 0;
  if (config_file) {
    json file;
    try {
      file = io::read_json(*config_file);
    } catch (const std::exception& e) {
      throw UsageError(std::string("--config: ") + e.what());
    }
    if (!file.is_object()) throw UsageError("--config: expected a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (key == "command") {
        if (value != command) throw UsageError("--config: file was written by '" + value.dump() + "', not " + command);
        continue;
      }
      if (!defaults.contains(key)) throw UsageError("--config: unknown key '" + key + "'");
      if (!detail::same_kind(value, defaults[key])) throw UsageError("--config: wrong type for '" + key + "'");
      cfg[key] = value;
      blocks_set = blocks_set || key == "blocks";
    }
  }
  for (const auto& [key, value] : flags) cfg[key] = detail::parse_flag(key, value, defaults[key]);
  if (command == "generate-sbm" && !blocks_set) {
    // 60/40 split of whatever n is requested
    const auto n = cfg["n"].get<std::size_t>();
    const auto first = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
    cfg["blocks"] = {first, n - first};
  }
  cfg["command"] = command;
  return cfg;
}

// ---------------------------------------------------------------------------
// Typed views

inline SbmConfig sbm_config(const json& c) {
  SbmConfig s;
  s.n = c["n"];
  s.block_sizes = c["blocks"].get<std::vector<std::size_t>>();
  s.intra_p = c["intra-p"];
  s.inter_p = c["inter-p"];
  s.p_bias = c["p-bias"];
  s.d = c["d"];
  s.d_noise = c["d-noise"];
  s.signal_gamma = c["signal-gamma"];
  s.tune_assortativity = c["tune-assortativity"];
  s.target_assortativity = c["target-assortativity"];
  s.seed = c["seed"];
  return s;
}

inline TrainConfig train_config(const json& c) {
  TrainConfig t;
  t.lr = c["lr"];
  t.epochs = c["epochs"];
  t.patience = c["patience"];
  t.hidden = c["hidden"];
  t.weight_decay = c["weight-decay"];
  t.heads = c["heads"];
  t.fair_weight = c["fair-weight"];
  t.seed = c["seed"];
  return t;
}

inline M2dConfig m2d_config(const json& c) {
  M2dConfig m;
  m.variant = parse_variant(c["variant"]);
  m.student = parse_model_kind(c["student"]);
  m.d_f = c["d-f"];
  m.gamma_blend = c["gamma"];
  m.beta = c["beta"];
  m.tau = c["tau"];
  m.lambda_dis = c["lambda-dis"];
  m.lambda_div = c["lambda-div"];
  m.lambda_deg = c["lambda-deg"];
  m.lambda_sparse = c["lambda-sparse"];
  m.t_max = c["t-max"];
  m.inner_steps_student = c["inner-student"];
  m.inner_steps_graph = c["inner-graph"];
  m.lr_student = c["lr"];
  m.lr_graph = c["lr-graph"];
  m.hidden = c["hidden"];
  m.feature_hidden = c["feature-hidden"];
  m.structure_hidden = c["structure-hidden"];
  m.structure_bias_init = c["structure-bias-init"];
  m.weight_decay = c["weight-decay"];
  m.patience = c["patience"];
  m.seed = c["seed"];
  return m;
}

// ---------------------------------------------------------------------------
// Model files

inline json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != m.size()) throw DataError("model.json: matrix data has the wrong length");
  std::copy(data.begin(), data.end(), m.data().begin());
  return m;
}

inline void save_model(const fs::path& p, const ModelSpec& s, const ParamSet& params) {
  json jp = json::object();
  for (const auto& [name, value] : params) jp[name] = matrix_json(value);
  io::write_json(p, {{"spec",
                      {{"kind", to_string(s.kind)},
                       {"in_dim", s.in_dim},
                       {"hidden", s.hidden},
                       {"num_classes", s.num_classes},
                       {"heads", s.heads},
                       {"leaky_slope", s.leaky_slope},
                       {"spd_cap", s.spd_cap},
                       {"degree_cap", s.degree_cap}}},
                     {"params", jp}});
}

inline std::pair<ModelSpec, ParamSet> load_model(const fs::path& p) {
  const json j = io::read_json(p);
  try {
    const json& js = j.at("spec");
    ModelSpec s;
    s.kind = parse_model_kind(js.at("kind").get<std::string>());
    s.in_dim = js.at("in_dim");
    s.hidden = js.at("hidden");
    s.num_classes = js.at("num_classes");
    s.heads = js.at("heads");
    s.leaky_slope = js.at("leaky_slope");
    s.spd_cap = js.at("spd_cap");
    s.degree_cap = js.at("degree_cap");
    ParamSet params;
    for (const auto& [name, value] : j.at("params").items()) params.emplace(name, matrix_from_json(value));
    return {s, params};
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Subcommands

inline json metrics_json(const StudentMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"test_accuracy", m.test_accuracy}, {"dp", opt(m.dp)}, {"eqop", opt(m.eqop)}, {"fidelity", opt(m.fidelity)}};
}

inline fs::path required_dir(const json& cfg, const char* key) {
  const std::string v = cfg[key];
  if (v.empty()) throw UsageError(std::string("--") + key + " is required");
  return v;
}

inline void write_resolved(const fs::path& out, const json& cfg) {
  fs::create_directories(out);
  io::write_json(out / "resolved_config.json", cfg);
}

inline void cmd_generate_sbm(const json& cfg, const fs::path& out, std::ostream& log) {
  SbmConfig used;
  const Graph g = generate_sbm(sbm_config(cfg), &used);
  save_dataset(g, out);
  std::size_t y1 = 0, s1y1 = 0;
  for (std::size_t i = 0; i < g.n; ++i)
    if (g.labels[i] == 1) {
      ++y1;
      s1y1 += (*g.sensitive)[i] == 1;
    }
  const double assort = label_assortativity(g);
  io::write_json(out / "generation.json", {{"label_assortativity", assort},
                                           {"inter_p_used", used.inter_p},
                                           {"p_s1_given_y1", y1 ? double(s1y1) / double(y1) : 0.0},
                                           {"edges", edge_list(g.adjacency, false).size()}});
  write_resolved(out, cfg);
  log << "generated " << g.n << " nodes, label assortativity " << assort << " -> " << out.string() << '\n';
}

inline void train_one(const json& cfg, const fs::path& out, std::ostream& log) {
  const Graph g = load_dataset(required_dir(cfg, "data"));
  const TrainResult r = train_supervised(parse_model_kind(cfg["model"]), g, train_config(cfg));
  fs::create_directories(out);
  io::write_matrix_csv(out / "teacher_logits.csv", r.logits);
  if (r.attention) io::write_attention_csv(out / "attention_layer1.csv", *r.attention);
  if (r.scores) io::write_attention_csv(out / "scores_layer1.csv", *r.scores);
  save_model(out / "model.json", r.spec, r.params);
  io::write_json(out / "history.json",
                 {{"epochs", history_json(r.history)}, {"best_epoch", r.best_epoch}, {"stop_reason", r.stop_reason}});
  const StudentMetrics m = evaluate_logits(r.logits, g);
  json j = metrics_json(m);
  j.erase("fidelity");
  j["model"] = cfg["model"];
  j["best_epoch"] = r.best_epoch;
  j["epochs_run"] = r.history.size();
  j["stop_reason"] = r.stop_reason;
  j["config"] = cfg;
  io::write_json(out / "metrics.json", j);
  write_resolved(out, cfg);
  log << "seed " << cfg["seed"].get<std::uint64_t>() << ": test accuracy " << m.test_accuracy << '\n';
}

inline fs::path teacher_dir_for(const fs::path& teacher, std::uint64_t seed, bool multi) {
  const fs::path per_seed = teacher / ("seed_" + std::to_string(seed));
  return multi && fs::exists(per_seed / "teacher_logits.csv") ? per_seed : teacher;
}

inline void distill_one(const json& cfg, const fs::path& out, const fs::path& teacher_dir, std::ostream& log) {
  const Graph g = load_dataset(required_dir(cfg, "data"));
  const Matrix teacher = io::read_matrix_csv(teacher_dir / "teacher_logits.csv");
  const DistillResult r = m2d_distill(g, teacher, m2d_config(cfg));
  fs::create_directories(out);
  save_dataset(r.augmented, out / "augmented");
  save_model(out / "model.json", r.student_spec, r.student);
  io::write_matrix_csv(out / "student_logits.csv", r.student_logits);
  io::write_json(out / "history.json", history_json(r.history));
  const StudentMetrics m = evaluate_logits(r.student_logits, g, &teacher);
  json j = metrics_json(m);
  j["variant"] = cfg["variant"];
  j["student"] = cfg["student"];
  j["best_student_step"] = r.history.best_step;
  j["student_steps"] = r.history.student_steps;
  j["graph_steps"] = r.history.graph_steps;
  j["stop_reason"] = r.history.stop_reason;
  json curves;
  for (const auto& it : r.history.iterations) {
    curves["loss_cls"].push_back(it.loss_cls);
    curves["loss_dis"].push_back(it.loss_dis);
    curves["loss_div"].push_back(it.loss_div);
    curves["loss_graph"].push_back(it.loss_graph);
  }
  j["curves"] = curves;
  j["config"] = cfg;
  io::write_json(out / "metrics.json", j);
  write_resolved(out, cfg);
  log << "seed " << cfg["seed"].get<std::uint64_t>() << ": test accuracy " << m.test_accuracy;
  if (m.fidelity) log << ", fidelity " << *m.fidelity;
  log << '\n';
}

/// mean and sample std (n - 1) of each numeric metric over per-seed runs.
inline json summarize(const std::vector<json>& runs, const std::vector<std::uint64_t>& seeds) {
  json s = {{"seeds", seeds}};
  for (const char* key : {"test_accuracy", "dp", "eqop", "fidelity"}) {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.contains(key) && r[key].is_number()) v.push_back(r[key]);
    if (v.size() != runs.size()) continue;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    s[key] = {{"mean", mean}, {"std", sd}, {"values", v}};
  }
  return s;
}

template <class RunOne>
void for_each_seed(const json& cfg, const fs::path& out, std::ostream& log, RunOne&& run_one) {
  const auto seeds = cfg["seeds"].get<std::vector<std::uint64_t>>();
  if (seeds.empty()) {
    run_one(cfg, out, false);
    return;
  }
  std::vector<json> runs;
  for (std::uint64_t s : seeds) {
    json c = cfg;
    c["seed"] = s;
    c["seeds"] = json::array();
    const fs::path dir = out / ("seed_" + std::to_string(s));
    run_one(c, dir, true);
    runs.push_back(io::read_json(dir / "metrics.json"));
  }
  json summary = summarize(runs, seeds);
  summary["config"] = cfg;
  io::write_json(out / "metrics.json", summary);
  write_resolved(out, cfg);
  for (const char* key : {"test_accuracy", "dp", "eqop", "fidelity"})
    if (summary.contains(key))
      log << key << ": " << summary[key]["mean"].get<double>() << " +/- " << summary[key]["std"].get<double>() << '\n';
}

/// Loads the graph a run was evaluated on: the run's augmented dataset when
/// present, else the original data.
inline AugmentedGraph run_graph(const Graph& g, const fs::path& run) {
  if (!fs::exists(run / "augmented" / "meta.json")) return {g, g.adjacency, g.features, 0};
  const Graph a = load_dataset(run / "augmented");
  if (a.n != g.n || a.feature_dim() < g.feature_dim()) throw DataError("augmented dataset does not match --data");
  return {g, a.adjacency, a.features, a.feature_dim() - g.feature_dim()};
}

inline void cmd_evaluate(const json& cfg, const fs::path& out, std::ostream& log) {
  const Graph g = load_dataset(required_dir(cfg, "data"));
  const fs::path run = required_dir(cfg, "run");
  const auto [spec, params] = load_model(run / "model.json");
  const AugmentedGraph aug = run_graph(g, run);
  std::optional<Matrix> teacher;
  const std::string tdir = cfg["teacher"];
  if (!tdir.empty()) teacher = io::read_matrix_csv(fs::path(tdir) / "teacher_logits.csv");
  const Matrix logits = student_logits(spec, params, aug);
  const StudentMetrics m = evaluate_logits(logits, g, teacher ? &*teacher : nullptr);
  json j = metrics_json(m);
  j["config"] = cfg;
  fs::create_directories(out);
  io::write_json(out / "metrics.json", j);
  write_resolved(out, cfg);
  log << "test accuracy " << m.test_accuracy << '\n';
}

inline void cmd_audit(const json& cfg, const fs::path& out, std::ostream& log) {
  const fs::path data = required_dir(cfg, "data"), run = required_dir(cfg, "run"), tdir = required_dir(cfg, "teacher");
  const Graph g = load_dataset(data);
  const AugmentedGraph aug = run_graph(g, run);
  audit::AuditReport r;
  std::map<std::string, fs::path> inputs{{"data/edges.csv", data / "edges.csv"},
                                         {"data/features.csv", data / "features.csv"},
                                         {"data/labels.csv", data / "labels.csv"},
                                         {"teacher/teacher_logits.csv", tdir / "teacher_logits.csv"},
                                         {"run/student_logits.csv", run / "student_logits.csv"}};
  if (fs::exists(run / "augmented" / "edges.csv")) {
    inputs["run/augmented/edges.csv"] = run / "augmented" / "edges.csv";
    inputs["run/augmented/features.csv"] = run / "augmented" / "features.csv";
  }

  const Matrix teacher = io::read_matrix_csv(tdir / "teacher_logits.csv");
  const Matrix student = io::read_matrix_csv(run / "student_logits.csv");
  r.fidelity = audit::distillation_fidelity(student, teacher, g.splits.test);

  std::optional<Matrix> attention, scores;
  if (fs::exists(tdir / "attention_layer1.csv")) {
    attention = io::read_attention_csv(tdir / "attention_layer1.csv", g.n);
    inputs["teacher/attention_layer1.csv"] = tdir / "attention_layer1.csv";
  }
  if (fs::exists(tdir / "scores_layer1.csv")) {
    scores = io::read_attention_csv(tdir / "scores_layer1.csv", g.n);
    inputs["teacher/scores_layer1.csv"] = tdir / "scores_layer1.csv";
  }
  r.features = aug.learned_features();
  if (attention) {
    const auto edges = audit::directed_edges(g.adjacency);
    if (aug.d_f > 0) {
      r.bins = audit::attention_alignment_bins(r.features, *attention, edges, cfg["bins"], cfg["sigma"]);
      r.bin_spearman = audit::bin_trend(*r.bins);
    }
    r.weight_attention_r = audit::weight_attention_correlation(aug.a_tilde, *attention, edges);
    if (scores) r.order = audit::attention_order_check(*scores, *attention, closed_neighbourhood(g.adjacency));
  }
  r.diff = audit::graph_diff(g.adjacency, aug.a_tilde, cfg["add-thresh"], cfg["remove-thresh"], g.labels, g.sensitive,
                             g.directed);
  if (g.sensitive && g.num_classes == 2) {
    const StudentMetrics mt = evaluate_logits(teacher, g), ms = evaluate_logits(student, g);
    r.fairness = {{"teacher", {{"dp", *mt.dp}, {"eqop", *mt.eqop}}},
                  {"student", {{"dp", *ms.dp}, {"eqop", *ms.eqop}}},
                  {"delta_dp", *ms.dp - *mt.dp},
                  {"delta_eqop", *ms.eqop - *mt.eqop}};
  }
  r.labels = g.labels;
  r.sensitive = g.sensitive;
  r.a_original = g.adjacency;
  r.a_tilde = aug.a_tilde;
  r.directed = g.directed;
  for (const auto& [label, p] : inputs) r.input_hashes[label] = audit::file_hash(p);
  audit::export_reports(r, out);
  write_resolved(out, cfg);
  log << "fidelity " << *r.fidelity;
  if (r.bin_spearman) log << ", bin trend " << *r.bin_spearman;
  if (r.weight_attention_r) log << ", weight/attention r " << *r.weight_attention_r;
  log << ", " << r.diff.changes.size() << " changed pairs\n";
}

inline int cmd_gradcheck(const json& cfg, const std::optional<fs::path>& out, std::ostream& log) {
  const auto cases = run_gradcheck(cfg["module"], cfg["seed"]);
  bool ok = true;
  json arr = json::array();
  for (const auto& c : cases) {
    log << (c.passed ? "PASS " : "FAIL ") << c.module << ' ' << c.name << " max_rel_error=" << c.max_rel_error << '\n';
    ok = ok && c.passed;
    arr.push_back({{"module", c.module}, {"name", c.name}, {"max_rel_error", c.max_rel_error}, {"passed", c.passed}});
    if (!c.passed) arr.back()["refined_error"] = c.refined_error;
  }
  if (out) {
    fs::create_directories(*out);
    io::write_json(*out / "gradcheck.json", {{"cases", arr}, {"passed", ok}});
    write_resolved(*out, cfg);
  }
  return ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// Entry point

/// Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
/// gradient check).
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"m2d: model-to-data distillation on graphs", "m2d"};
  app.require_subcommand(1);
  const json defaults = default_config();
  struct Sub {
    CLI::App* app = nullptr;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    std::string config, out;
  };
  std::map<std::string, Sub> subs;
  const std::map<std::string, std::string> about{
      {"generate-sbm", "sample the two-block synthetic dataset"},
      {"train-teacher", "train a GNN on a dataset and export its logits and attention"},
      {"distill", "learn an augmented dataset from a teacher and train the student on it"},
      {"evaluate", "recompute test metrics for a trained run"},
      {"audit", "transparency reports for a distillation run"},
      {"gradcheck", "finite-difference check of every differentiable composite"},
  };
  for (const auto& [name, keys] : subcommand_keys()) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, about.at(name));
    for (const auto& key : keys) {
      const json& d = defaults[key];
      std::string shown = d.is_string() ? d.get<std::string>() : d.dump();
      const char* type = d.is_number_unsigned() ? "UINT" : d.is_number() ? "FLOAT" : d.is_boolean() ? "BOOL" : d.is_array() ? "LIST" : "TEXT";
      s.options[key] = s.app->add_option("--" + key, s.values[key], "default: " + shown)->type_name(type);
    }
    s.app->add_option("--config", s.config, "JSON file with kebab-case keys");
    auto* o = s.app->add_option("--out", s.out, "output directory");
    if (name != "gradcheck" && name != "evaluate") o->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n";
    const auto parsed = app.get_subcommands();
    err << (parsed.empty() ? app.help() : parsed.front()->help());
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  Sub& s = subs.at(command);
  try {
    std::map<std::string, std::string> given;
    for (const auto& [key, opt] : s.options)
      if (opt->count()) given[key] = s.values.at(key);
    std::optional<fs::path> config_file;
    if (!s.config.empty()) config_file = s.config;
    const json cfg = resolve_config(command, config_file, given);
    std::optional<fs::path> out;
    if (!s.out.empty()) out = s.out;

    if (command == "generate-sbm") {
      cmd_generate_sbm(cfg, *out, log);
    } else if (command == "train-teacher") {
      for_each_seed(cfg, *out, log, [&](const json& c, const fs::path& dir, bool) { train_one(c, dir, log); });
    } else if (command == "distill") {
      const fs::path teacher = required_dir(cfg, "teacher");
      for_each_seed(cfg, *out, log, [&](const json& c, const fs::path& dir, bool multi) {
        distill_one(c, dir, teacher_dir_for(teacher, c["seed"], multi), log);
      });
    } else if (command == "evaluate") {
      cmd_evaluate(cfg, out ? *out : required_dir(cfg, "run") / "evaluate", log);
    } else if (command == "audit") {
      cmd_audit(cfg, *out, log);
    } else {
      return cmd_gradcheck(cfg, out, log);
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << s.app->help();
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace m2d::cli
