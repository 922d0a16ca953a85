#pragma once
// Parameter initialization and the Adam optimizer over named parameter sets.

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>

#include "m2d/autodiff.hpp"

namespace m2d {

using ad::Gradients;
using ad::Matrix;
using ad::ParamSet;

using Rng = std::mt19937_64;

/// Glorot-uniform fill, drawn row-major from rng.
inline Matrix glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam restricted to one parameter group: step() only touches the names the
/// optimizer was built with, everything else in the ParamSet is left as is.
class Adam {
 public:
  Adam(const ParamSet& params, std::set<std::string> group, AdamConfig cfg)
      : cfg_(cfg), group_(std::move(group)) {
    for (const auto& name : group_) {
      const Matrix& p = params.at(name);
      m_.emplace(name, Matrix(p.rows(), p.cols()));
      v_.emplace(name, Matrix(p.rows(), p.cols()));
    }
  }

  const std::set<std::string>& group() const { return group_; }
  std::uint64_t steps() const { return t_; }

  void step(ParamSet& params, const Gradients& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& name : group_) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      Matrix& p = params.at(name);
      const Matrix& g = it->second;
      Matrix& m = m_.at(name);
      Matrix& v = v_.at(name);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k] + cfg_.weight_decay * p[k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        p[k] -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::set<std::string> group_;
  std::map<std::string, Matrix> m_, v_;
  std::uint64_t t_ = 0;
};

inline std::set<std::string> names_of(const ParamSet& p) {
  std::set<std::string> out;
  for (const auto& [k, v] : p) out.insert(k);
  return out;
}

}  // namespace m2d
