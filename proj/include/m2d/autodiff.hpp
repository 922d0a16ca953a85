#pragma once
// Dense double-precision matrices with a single-use reverse-mode tape.
//
// A Tensor is an immutable value plus an optional handle into a Tape. Ops on
// untracked tensors produce untracked results; as soon as one operand is
// tracked the result is recorded on that operand's tape. Reductions and
// products run serially in a fixed order so identical inputs give
// bit-identical values and gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace m2d::ad {

/// Denominator / log-argument clamp shared by every normalizing op.
inline constexpr double kClamp = 1e-12;
inline constexpr double kDefaultLeakySlope = 0.01;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length does not match shape");
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix column(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }
  static Matrix row(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row_span(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row_span(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Named parameter values; names are unique and shapes are fixed once set.
using ParamSet = std::map<std::string, Matrix>;
/// Gradient per parameter name, same shapes as the ParamSet entries.
using Gradients = std::map<std::string, Matrix>;

class Tape;

class Tensor {
 public:
  Tensor() : value_(std::make_shared<const Matrix>()) {}
  explicit Tensor(Matrix m) : value_(std::make_shared<const Matrix>(std::move(m))) {}

  const Matrix& value() const { return *value_; }
  std::shared_ptr<const Matrix> shared_value() const { return value_; }
  std::size_t rows() const { return value_->rows(); }
  std::size_t cols() const { return value_->cols(); }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  double item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("Tensor::item on non-scalar");
    return (*value_)[0];
  }
  /// Same value, no tape handle.
  Tensor detach() const {
    Tensor t;
    t.value_ = value_;
    return t;
  }

 private:
  friend class Tape;
  std::shared_ptr<const Matrix> value_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Receives the upstream gradient and one accumulation slot per recorded
/// input (nullptr for untracked inputs).
using BackwardFn = std::function<void(const Matrix& grad_out, std::span<Matrix* const> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(std::string name, Matrix value) {
    for (const auto& n : nodes_) {
      if (!n.name.empty() && n.name == name) throw std::invalid_argument("Tape: duplicate leaf " + name);
    }
    Node node;
    node.value = std::make_shared<const Matrix>(std::move(value));
    node.name = std::move(name);
    return push(std::move(node));
  }

  std::map<std::string, Tensor> watch(const ParamSet& params) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, value] : params) out.emplace(name, leaf(name, value));
    return out;
  }

  Tensor record(Matrix value, std::vector<std::size_t> inputs, std::vector<bool> input_tracked,
                BackwardFn fn) {
    if (consumed_) throw std::logic_error("Tape: recording on a consumed tape");
    Node node;
    node.value = std::make_shared<const Matrix>(std::move(value));
    node.inputs = std::move(inputs);
    node.input_tracked = std::move(input_tracked);
    node.backward = std::move(fn);
    return push(std::move(node));
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradients of a 1x1 loss with respect to every named leaf reachable from it.
  Gradients backward(const Tensor& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss is not tracked on this tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward: loss must be 1x1");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;

    std::vector<Matrix> grads(nodes_.size());
    grads[loss.node()] = Matrix::scalar(1.0);
    std::vector<Matrix*> slots;
    for (std::size_t k = loss.node() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (grads[k].size() == 0 && n.value->size() != 0) continue;
      if (!n.backward) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        if (!n.input_tracked[i]) continue;
        Matrix& g = grads[n.inputs[i]];
        if (g.size() == 0) {
          const Matrix& v = *nodes_[n.inputs[i]].value;
          g = Matrix(v.rows(), v.cols());
        }
        slots[i] = &g;
      }
      n.backward(grads[k], slots);
      // Intermediate buffers are no longer needed once propagated.
      if (n.name.empty()) grads[k] = Matrix();
    }

    Gradients out;
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      if (nodes_[k].name.empty()) continue;
      const Matrix& v = *nodes_[k].value;
      out.emplace(nodes_[k].name, grads[k].size() == v.size() ? std::move(grads[k]) : Matrix(v.rows(), v.cols()));
    }
    return out;
  }

 private:
  struct Node {
    std::shared_ptr<const Matrix> value;
    std::vector<std::size_t> inputs;
    std::vector<bool> input_tracked;
    BackwardFn backward;
    std::string name;
  };

  Tensor push(Node node) {
    Tensor t;
    t.value_ = node.value;
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(std::move(node));
    return t;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline Gradients backward(const Tensor& loss) {
  if (!loss.tracked()) throw std::invalid_argument("backward: loss is not tracked");
  return loss.tape()->backward(loss);
}

/// Builds a result from its operands, recording it when any operand is tracked.
inline Tensor make_result(Matrix value, std::initializer_list<const Tensor*> operands, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by tensor op");
  Tape* tape = nullptr;
  for (const Tensor* t : operands) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw std::invalid_argument("operands recorded on different tapes");
    tape = t->tape();
  }
  if (!tape) return Tensor(std::move(value));
  std::vector<std::size_t> inputs;
  std::vector<bool> tracked;
  for (const Tensor* t : operands) {
    inputs.push_back(t->node());
    tracked.push_back(t->tracked());
  }
  return tape->record(std::move(value), std::move(inputs), std::move(tracked), std::move(fn));
}

namespace detail {

inline void gemm_acc(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& out) {
  // out += op(a) * op(b), i-k-j loop order for row-major access.
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  const Matrix* ap = &a;
  const Matrix* bp = &b;
  Matrix at, bt;
  if (ta) {
    at = a.transposed();
    ap = &at;
  }
  if (tb) {
    bt = b.transposed();
    bp = &bt;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.row_span(i).data();
    const double* arow = ap->row_span(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = bp->row_span(p).data();
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

enum class Broadcast { Same, Scalar, Row };

inline Broadcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.same_shape(b)) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": incompatible shapes");
}

inline std::size_t bindex(Broadcast k, const Matrix& a, std::size_t idx) {
  switch (k) {
    case Broadcast::Same: return idx;
    case Broadcast::Scalar: return 0;
    case Broadcast::Row: return idx % a.cols();
  }
  return 0;
}

template <class F>
Matrix map(const Matrix& x, F f) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = f(x[k]);
  return y;
}

}  // namespace detail

inline Tensor constant(Matrix m) { return Tensor(std::move(m)); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  detail::gemm_acc(a.value(), false, b.value(), false, out);
  auto av = a.shared_value();
  auto bv = b.shared_value();
  return make_result(std::move(out), {&a, &b}, [av, bv](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) detail::gemm_acc(g, false, *bv, true, *gi[0]);
    if (gi[1]) detail::gemm_acc(*av, true, g, false, *gi[1]);
  });
}

enum class BinaryKind { Add, Sub, Mul, Div };

/// Elementwise a (op) b. b may equal a's shape, be 1x1, or be 1 x a.cols()
/// (added to every row).
inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  const auto bk = detail::broadcast_kind(x, y, "binary_elementwise");
  Matrix out(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double yv = y[detail::bindex(bk, x, k)];
    switch (kind) {
      case BinaryKind::Add: out[k] = x[k] + yv; break;
      case BinaryKind::Sub: out[k] = x[k] - yv; break;
      case BinaryKind::Mul: out[k] = x[k] * yv; break;
      case BinaryKind::Div:
        if (yv == 0.0) throw std::domain_error("div: zero denominator");
        out[k] = x[k] / yv;
        break;
    }
  }
  auto av = a.shared_value();
  auto bv = b.shared_value();
  return make_result(std::move(out), {&a, &b}, [kind, bk, av, bv](const Matrix& g, std::span<Matrix* const> gi) {
    const Matrix& x = *av;
    const Matrix& y = *bv;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const std::size_t j = detail::bindex(bk, x, k);
      const double yv = y[j];
      double da = 0.0, db = 0.0;
      switch (kind) {
        case BinaryKind::Add: da = g[k]; db = g[k]; break;
        case BinaryKind::Sub: da = g[k]; db = -g[k]; break;
        case BinaryKind::Mul: da = g[k] * yv; db = g[k] * x[k]; break;
        case BinaryKind::Div: da = g[k] / yv; db = -g[k] * x[k] / (yv * yv); break;
      }
      if (gi[0]) (*gi[0])[k] += da;
      if (gi[1]) (*gi[1])[j] += db;
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::Div, a, b); }
inline Tensor scale(const Tensor& a, double s) { return mul(a, constant(Matrix::scalar(s))); }
inline Tensor add_scalar(const Tensor& a, double s) { return add(a, constant(Matrix::scalar(s))); }

namespace detail {
inline thread_local double* kink_distance = nullptr;

// Exact zeros are skipped: at a generic point they come from dead rows that
// stay zero under perturbation (e.g. relu output fed back in), not from a kink.
inline void note_kink_input(double v) {
  if (kink_distance && v != 0.0) *kink_distance = std::min(*kink_distance, std::abs(v));
}
}  // namespace detail

/// While alive, records the smallest |input| reaching a non-smooth op (relu,
/// leaky_relu, abs). Finite differences only mean something away from 0.
class KinkMonitor {
 public:
  KinkMonitor() : prev_(detail::kink_distance) { detail::kink_distance = &min_; }
  ~KinkMonitor() { detail::kink_distance = prev_; }
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;
  double min_distance() const { return min_; }

 private:
  double min_ = INFINITY;
  double* prev_;
};

enum class UnaryKind { Neg, Abs, Log, Exp, Sqrt, Relu, LeakyRelu, Sigmoid };

inline Tensor unary(UnaryKind kind, const Tensor& x, double slope = kDefaultLeakySlope) {
  auto f = [kind, slope](double v) {
    switch (kind) {
      case UnaryKind::Neg: return -v;
      case UnaryKind::Abs: return std::abs(v);
      case UnaryKind::Log: return std::log(std::max(v, kClamp));
      case UnaryKind::Exp: return std::exp(v);
      case UnaryKind::Sqrt: return std::sqrt(std::max(v, kClamp));
      case UnaryKind::Relu: return v > 0.0 ? v : 0.0;
      case UnaryKind::LeakyRelu: return v > 0.0 ? v : slope * v;
      case UnaryKind::Sigmoid:
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return v;
  };
  if (detail::kink_distance && (kind == UnaryKind::Abs || kind == UnaryKind::Relu || kind == UnaryKind::LeakyRelu))
    for (double v : x.value().data()) detail::note_kink_input(v);
  Matrix out = detail::map(x.value(), f);
  auto xv = x.shared_value();
  auto yv = std::make_shared<const Matrix>(out);
  return make_result(std::move(out), {&x}, [kind, slope, xv, yv](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Matrix& xs = *xv;
    const Matrix& ys = *yv;
    Matrix& d = *gi[0];
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const double v = xs[k];
      double dv = 0.0;
      switch (kind) {
        case UnaryKind::Neg: dv = -1.0; break;
        case UnaryKind::Abs: dv = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); break;
        case UnaryKind::Log: dv = v > kClamp ? 1.0 / v : 0.0; break;
        case UnaryKind::Exp: dv = ys[k]; break;
        case UnaryKind::Sqrt: dv = v > kClamp ? 0.5 / ys[k] : 0.0; break;
        case UnaryKind::Relu: dv = v > 0.0 ? 1.0 : 0.0; break;
        case UnaryKind::LeakyRelu: dv = v > 0.0 ? 1.0 : slope; break;
        case UnaryKind::Sigmoid: dv = ys[k] * (1.0 - ys[k]); break;
      }
      d[k] += g[k] * dv;
    }
  });
}

inline Tensor neg(const Tensor& x) { return unary(UnaryKind::Neg, x); }
inline Tensor abs(const Tensor& x) { return unary(UnaryKind::Abs, x); }
inline Tensor log(const Tensor& x) { return unary(UnaryKind::Log, x); }
inline Tensor exp(const Tensor& x) { return unary(UnaryKind::Exp, x); }
inline Tensor sqrt(const Tensor& x) { return unary(UnaryKind::Sqrt, x); }
inline Tensor relu(const Tensor& x) { return unary(UnaryKind::Relu, x); }
inline Tensor leaky_relu(const Tensor& x, double slope = kDefaultLeakySlope) {
  return unary(UnaryKind::LeakyRelu, x, slope);
}
inline Tensor sigmoid(const Tensor& x) { return unary(UnaryKind::Sigmoid, x); }

namespace detail {

/// Row softmax restricted to entries where mask != 0 (all entries when mask is null).
inline Matrix softmax_rows(const Matrix& x, const Matrix* mask) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < x.cols(); ++j)
      if (!mask || (*mask)(i, j) != 0.0) mx = std::max(mx, x(i, j));
    if (mx == -INFINITY) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      if (mask && (*mask)(i, j) == 0.0) continue;
      y(i, j) = std::exp(x(i, j) - mx);
      s += y(i, j);
    }
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= s;
  }
  return y;
}

inline void softmax_rows_backward(const Matrix& y, const Matrix& g, Matrix& d) {
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
  }
}

}  // namespace detail

/// Numerically stable per-row softmax (max subtraction).
inline Tensor row_softmax(const Tensor& x) {
  Matrix y = detail::softmax_rows(x.value(), nullptr);
  auto yv = std::make_shared<const Matrix>(y);
  return make_result(std::move(y), {&x}, [yv](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) detail::softmax_rows_backward(*yv, g, *gi[0]);
  });
}

/// Softmax over the entries of each row where mask is nonzero; other entries are 0.
inline Tensor masked_row_softmax(const Tensor& x, const Matrix& mask) {
  if (!x.value().same_shape(mask)) throw ShapeError("masked_row_softmax: mask shape");
  Matrix y = detail::softmax_rows(x.value(), &mask);
  auto yv = std::make_shared<const Matrix>(y);
  return make_result(std::move(y), {&x}, [yv](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) detail::softmax_rows_backward(*yv, g, *gi[0]);
  });
}

inline Tensor row_log_softmax(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix y(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < v.cols(); ++j) mx = std::max(mx, v(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < v.cols(); ++j) s += std::exp(v(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v.cols(); ++j) y(i, j) = v(i, j) - lse;
  }
  auto yv = std::make_shared<const Matrix>(y);
  return make_result(std::move(y), {&x}, [yv](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Matrix& ls = *yv;
    Matrix& d = *gi[0];
    for (std::size_t i = 0; i < ls.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < ls.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < ls.cols(); ++j) d(i, j) += g(i, j) - std::exp(ls(i, j)) * gs;
    }
  });
}

enum class ReduceKind { Sum, Mean, FrobeniusSq };

/// axis 0 reduces over rows (result 1 x cols), axis 1 over columns (rows x 1),
/// no axis reduces everything to 1x1. Accumulation is serial, left to right.
inline Tensor reduce(ReduceKind kind, const Tensor& x, std::optional<int> axis = std::nullopt) {
  const Matrix& v = x.value();
  if (axis && *axis != 0 && *axis != 1) throw std::invalid_argument("reduce: axis must be 0 or 1");
  const std::size_t orow = !axis ? 1 : (*axis == 0 ? 1 : v.rows());
  const std::size_t ocol = !axis ? 1 : (*axis == 0 ? v.cols() : 1);
  const double count = !axis ? static_cast<double>(v.size())
                             : static_cast<double>(*axis == 0 ? v.rows() : v.cols());
  auto slot = [axis](std::size_t i, std::size_t j) -> std::pair<std::size_t, std::size_t> {
    if (!axis) return {0, 0};
    return *axis == 0 ? std::pair<std::size_t, std::size_t>{0, j} : std::pair<std::size_t, std::size_t>{i, 0};
  };
  Matrix out(orow, ocol);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) {
      auto [r, c] = slot(i, j);
      const double e = v(i, j);
      out(r, c) += kind == ReduceKind::FrobeniusSq ? e * e : e;
    }
  if (kind == ReduceKind::Mean && count > 0)
    for (std::size_t k = 0; k < out.size(); ++k) out[k] /= count;
  auto xv = x.shared_value();
  return make_result(std::move(out), {&x}, [kind, axis, count, slot, xv](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Matrix& v = *xv;
    Matrix& d = *gi[0];
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        auto [r, c] = slot(i, j);
        const double up = g(r, c);
        switch (kind) {
          case ReduceKind::Sum: d(i, j) += up; break;
          case ReduceKind::Mean: d(i, j) += up / count; break;
          case ReduceKind::FrobeniusSq: d(i, j) += 2.0 * v(i, j) * up; break;
        }
      }
  });
}

inline Tensor sum(const Tensor& x, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::Sum, x, axis);
}
inline Tensor mean(const Tensor& x, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::Mean, x, axis);
}
inline Tensor frobenius_sq(const Tensor& x) { return reduce(ReduceKind::FrobeniusSq, x); }

inline Tensor transpose(const Tensor& x) {
  return make_result(x.value().transposed(), {&x}, [](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) (*gi[0])(j, i) += g(i, j);
  });
}

/// [a || b]: a's columns first.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  const std::size_t ca = a.cols(), cb = b.cols();
  Matrix out(a.rows(), ca + cb);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < ca; ++j) out(i, j) = a.value()(i, j);
    for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = b.value()(i, j);
  }
  return make_result(std::move(out), {&a, &b}, [ca, cb](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < g.rows(); ++i) {
      if (gi[0])
        for (std::size_t j = 0; j < ca; ++j) (*gi[0])(i, j) += g(i, j);
      if (gi[1])
        for (std::size_t j = 0; j < cb; ++j) (*gi[1])(i, j) += g(i, ca + j);
    }
  });
}

/// Rows of x at the given indices, in order.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> index) {
  const std::size_t c = x.cols();
  Matrix out(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out(r, j) = x.value()(index[r], j);
  }
  return make_result(std::move(out), {&x}, [index = std::move(index), c](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])(index[r], j) += g(r, j);
  });
}

/// Rows where mask is true.
inline Tensor slice_rows(const Tensor& x, const std::vector<bool>& mask) {
  if (mask.size() != x.rows()) throw ShapeError("slice_rows: mask length");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(i);
  return gather_rows(x, std::move(idx));
}

namespace detail {

// Divides each line (row when by_row, else column) by max(||line||_2, kClamp).
inline Tensor l2_normalize(const Tensor& x, bool by_row) {
  const Matrix& v = x.value();
  const std::size_t lines = by_row ? v.rows() : v.cols();
  const std::size_t len = by_row ? v.cols() : v.rows();
  auto at = [by_row](const Matrix& m, std::size_t line, std::size_t k) -> double {
    return by_row ? m(line, k) : m(k, line);
  };
  std::vector<double> norms(lines, 0.0);
  for (std::size_t l = 0; l < lines; ++l) {
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += at(v, l, k) * at(v, l, k);
    norms[l] = std::sqrt(s);
  }
  Matrix out(v.rows(), v.cols());
  for (std::size_t l = 0; l < lines; ++l) {
    const double den = std::max(norms[l], kClamp);
    for (std::size_t k = 0; k < len; ++k) (by_row ? out(l, k) : out(k, l)) = at(v, l, k) / den;
  }
  auto yv = std::make_shared<const Matrix>(out);
  return make_result(std::move(out), {&x}, [by_row, lines, len, norms, yv, at](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    Matrix& d = *gi[0];
    const Matrix& y = *yv;
    for (std::size_t l = 0; l < lines; ++l) {
      if (norms[l] > kClamp) {
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += at(g, l, k) * at(y, l, k);
        for (std::size_t k = 0; k < len; ++k)
          (by_row ? d(l, k) : d(k, l)) += (at(g, l, k) - at(y, l, k) * dot) / norms[l];
      } else {
        for (std::size_t k = 0; k < len; ++k) (by_row ? d(l, k) : d(k, l)) += at(g, l, k) / kClamp;
      }
    }
  });
}

}  // namespace detail

inline Tensor row_l2_normalize(const Tensor& x) { return detail::l2_normalize(x, true); }
inline Tensor col_l2_normalize(const Tensor& x) { return detail::l2_normalize(x, false); }

/// Square matrix with its diagonal set to zero.
inline Tensor zero_diagonal(const Tensor& x) {
  if (x.rows() != x.cols()) throw ShapeError("zero_diagonal: not square");
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) = 0.0;
  return make_result(std::move(out), {&x}, [](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j)
        if (i != j) (*gi[0])(i, j) += g(i, j);
  });
}

/// out(i,j) = table(0, index(i,j)); a differentiable lookup into a 1 x K table.
inline Tensor lookup(const Tensor& table, const std::vector<std::size_t>& index, std::size_t rows, std::size_t cols) {
  if (table.rows() != 1) throw ShapeError("lookup: table must be 1 x K");
  if (index.size() != rows * cols) throw ShapeError("lookup: index size");
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= table.cols()) throw ShapeError("lookup: index out of range");
    out[k] = table.value()[index[k]];
  }
  return make_result(std::move(out), {&table}, [index](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t k = 0; k < index.size(); ++k) (*gi[0])[index[k]] += g[k];
  });
}

/// Loss closure used by the gradient checker: evaluated once on a tape with
/// tracked parameters and repeatedly with untracked perturbed parameters.
using LossFn = std::function<Tensor(const std::map<std::string, Tensor>&)>;

/// Max over all parameter entries of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8).
inline double finite_diff_check(const LossFn& loss_fn, const ParamSet& params, double step = 1e-4,
                                double floor = 1e-8) {
  Gradients analytic;
  {
    Tape tape;
    auto tracked = tape.watch(params);
    Tensor loss = loss_fn(tracked);
    if (!loss.tracked()) {
      for (const auto& [name, value] : params) analytic.emplace(name, Matrix(value.rows(), value.cols()));
    } else {
      analytic = tape.backward(loss);
    }
  }
  auto eval = [&](const ParamSet& p) {
    std::map<std::string, Tensor> consts;
    for (const auto& [name, value] : p) consts.emplace(name, Tensor(value));
    return loss_fn(consts).item();
  };
  double worst = 0.0;
  ParamSet probe = params;
  for (const auto& [name, value] : params) {
    Matrix& slot = probe.at(name);
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double orig = slot[k];
      slot[k] = orig + step;
      const double up = eval(probe);
      slot[k] = orig - step;
      const double down = eval(probe);
      slot[k] = orig;
      const double cd = (up - down) / (2.0 * step);
      const double an = analytic.at(name)[k];
      const double err = std::abs(an - cd) / std::max({std::abs(an), std::abs(cd), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace m2d::ad
