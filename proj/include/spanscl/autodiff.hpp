#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace spanscl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// A trainable tensor with its accumulated gradient and Adam moments.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix first_moment;
  Matrix second_moment;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) { reset_state(); }

  void reset_state() {
    grad = Matrix::Zero(value.rows(), value.cols());
    first_moment = Matrix::Zero(value.rows(), value.cols());
    second_moment = Matrix::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

namespace autodiff {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its inputs. With recording disabled
/// the tape only evaluates values.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  /// A leaf bound to `p`; gradients are added into p.grad by backward().
  /// Each parameter maps to one leaf per tape.
  /// The leaf references p.value without copying, so p must outlive the tape
  /// and stay unmodified until backward() has run.
  Var parameter(Parameter& p) {
    if (const auto it = leaves_.find(&p); it != leaves_.end()) return Var(this, it->second);
    Var v = push(Matrix(), record_, {});
    nodes_[v.id_].ref = &p.value;
    if (record_) nodes_[v.id_].param = &p;
    leaves_.emplace(&p, v.id_);
    return v;
  }

  /// A differentiable leaf not tied to a Parameter; read its gradient with grad().
  Var input(Matrix value) { return push(std::move(value), record_, {}); }

  /// A node with no tape inputs whose backward writes straight into
  /// parameter gradients (e.g. sparse embedding updates).
  Var make_source(Matrix value, Backward backward) {
    return push(std::move(value), record_, record_ ? std::move(backward) : Backward{});
  }

  /// Appends an op result. `backward` must add into grad(input) for every
  /// input that needs_grad().
  Var make(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id_].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  Var make(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id_].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Matrix& value(Var v) const { return value(v.id_); }
  const Matrix& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool needs_grad(Var v) const { return nodes_[v.id_].needs_grad; }

  /// Gradient buffer of a node, allocated zero on first access.
  Matrix& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }
  Matrix& grad(Var v) { return grad(v.id_); }

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and sweeps backwards.
  void backward(Var loss) {
    if (!record_) throw std::logic_error("backward() on a non-recording tape");
    if (value(loss).size() != 1) throw std::logic_error("backward() needs a scalar loss");
    grad(loss).setOnes();
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
    Parameter* param = nullptr;
    const Matrix* ref = nullptr;
  };

  Var push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), needs_grad, nullptr, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> leaves_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// --- ops -----------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  return t.make(a.value() * b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

/// a * b^T
inline Var matmul_transposed(Var a, Var b) {
  Tape& t = *a.tape();
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_transposed: inner dimensions differ");
  return t.make(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b);
    if (t.needs_grad(b)) t.grad(b).noalias() += g.transpose() * t.value(a);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("add: shape mismatch");
  return t.make(a.value() + b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

/// Adds a 1 x c row to every row of x.
inline Var add_row(Var x, Var row) {
  Tape& t = *x.tape();
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return t.make(std::move(out), {x, row}, [x, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(x)) t.grad(x) += g;
    if (t.needs_grad(row)) t.grad(row) += g.colwise().sum();
  });
}

inline Var scale(Var x, double s) {
  Tape& t = *x.tape();
  return t.make(x.value() * s, {x}, [x, s](Tape& t, std::size_t self) { t.grad(x) += t.grad(self) * s; });
}

/// tanh approximation of GELU.
inline Var gelu(Var x) {
  Tape& t = *x.tape();
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double u = v.data()[i];
    out.data()[i] = 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
  }
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& v = t.value(x);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double u = v.data()[i];
      const double inner = c * (u + 0.044715 * u * u * u);
      const double th = std::tanh(inner);
      const double d = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * u * u);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax_rows(Var x) {
  Tape& t = *x.tape();
  return t.make(softmax_rows_value(x.value()), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(g.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x c).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  const auto n = v.cols();
  Matrix normalized(v.rows(), n);
  Vector inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mean = v.row(r).mean();
    const double var = (v.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = (v.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = normalized;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return t.make(std::move(out), {x, gain, bias},
                [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& t,
                                                                                                 std::size_t self) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(gain)) t.grad(gain) += (g.array() * normalized.array()).colwise().sum().matrix();
                  if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
                  if (!t.needs_grad(x)) return;
                  Matrix& gx = t.grad(x);
                  const auto n = static_cast<double>(g.cols());
                  const auto& w = t.value(gain).row(0).array();
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const Eigen::ArrayXd gh = (g.row(r).array() * w).transpose();
                    const Eigen::ArrayXd xh = normalized.row(r).array().transpose();
                    const double sum_gh = gh.sum();
                    const double sum_gh_xh = (gh * xh).sum();
                    gx.row(r).array() += (inv_std(r) / n * (n * gh - sum_gh - xh * sum_gh_xh)).transpose();
                  }
                });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(Var table, const std::vector<std::size_t>& ids) {
  Tape& t = *table.tape();
  const Matrix& v = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), v.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (static_cast<Eigen::Index>(ids[i]) >= v.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = v.row(static_cast<Eigen::Index>(ids[i]));
  }
  return t.make(std::move(out), {table}, [table, ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      gt.row(static_cast<Eigen::Index>(ids[i])) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

/// Rows of p.value selected by `ids`; the backward pass scatters directly
/// into p.grad instead of materializing a dense gradient for the table.
inline Var embedding_lookup(Tape& t, Parameter& p, const std::vector<std::size_t>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), p.value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (static_cast<Eigen::Index>(ids[i]) >= p.value.rows()) {
      throw std::out_of_range("embedding_lookup: index out of range in " + p.name);
    }
    out.row(static_cast<Eigen::Index>(i)) = p.value.row(static_cast<Eigen::Index>(ids[i]));
  }
  Parameter* param = &p;
  return t.make_source(std::move(out), [param, ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      param->grad.row(static_cast<Eigen::Index>(ids[i])) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

/// The first `count` rows of x.
inline Var top_rows(Var x, Eigen::Index count) {
  Tape& t = *x.tape();
  if (count > x.rows()) throw std::out_of_range("top_rows: count exceeds rows");
  return t.make(x.value().topRows(count), {x},
                [x, count](Tape& t, std::size_t self) { t.grad(x).topRows(count) += t.grad(self); });
}

inline Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  Tape& t = *x.tape();
  if (start + count > x.cols()) throw std::out_of_range("slice_cols: range exceeds columns");
  return t.make(x.value().middleCols(start, count), {x}, [x, start, count](Tape& t, std::size_t self) {
    t.grad(x).middleCols(start, count) += t.grad(self);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  Matrix out(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.make(std::move(out), parts, [parts](Tape& t, std::size_t self) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (t.needs_grad(p)) t.grad(p) += t.grad(self).middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

inline Var stack_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.make(std::move(out), parts, [parts](Tape& t, std::size_t self) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (t.needs_grad(p)) t.grad(p) += t.grad(self).middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

/// 1 x c mean of rows [begin, end).
inline Var mean_rows(Var x, Eigen::Index begin, Eigen::Index end) {
  Tape& t = *x.tape();
  if (begin >= end || end > x.rows()) throw std::out_of_range("mean_rows: invalid row range");
  const double inv = 1.0 / static_cast<double>(end - begin);
  Matrix out = x.value().middleRows(begin, end - begin).colwise().sum() * inv;
  return t.make(std::move(out), {x}, [x, begin, end, inv](Tape& t, std::size_t self) {
    t.grad(x).middleRows(begin, end - begin).rowwise() += t.grad(self).row(0) * inv;
  });
}

/// Scales each row to unit L2 norm. Zero rows are rejected.
inline Var l2_normalize_rows(Var x) {
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  Vector norms(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    norms(r) = v.row(r).norm();
    if (!(norms(r) > 0.0)) throw std::domain_error("l2_normalize_rows: zero-norm row");
    out.row(r) = v.row(r) / norms(r);
  }
  return t.make(std::move(out), {x}, [x, norms = std::move(norms)](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      gx.row(r) += (g.row(r) - y.row(r) * y.row(r).dot(g.row(r))) / norms(r);
    }
  });
}

inline Var add_scalar_terms(Var a, Var b, double b_weight) {
  Tape& t = *a.tape();
  if (a.value().size() != 1 || b.value().size() != 1) throw std::invalid_argument("add_scalar_terms: not scalars");
  Matrix out(1, 1);
  out(0, 0) = a.value()(0, 0) + b_weight * b.value()(0, 0);
  return t.make(std::move(out), {a, b}, [a, b, b_weight](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    if (t.needs_grad(a)) t.grad(a)(0, 0) += g;
    if (t.needs_grad(b)) t.grad(b)(0, 0) += b_weight * g;
  });
}

}  // namespace autodiff
}  // namespace spanscl
