#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every primitive evaluated in a forward pass together with a
// closure that pushes the upstream gradient back to the primitive's inputs.
// Parameters are bound by reference, so a tape never copies weights, and
// backward() accumulates into Parameter::grad.
//
// Batched sequences are stored as stacked blocks: a batch of B samples with n
// channels and d features is a (B*n) x d matrix. Row-wise primitives (affine,
// layer norm, ELU) then run as one dense product, and reshape() turns the
// stack into a B x (n*d) matrix without moving data.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cldta/error.hpp"

namespace cldta {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;
using MatD = Mat<double>;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

enum class Mode { train, eval };

// Additive logit mask standing in for -inf. exp(sentinel - max) underflows to
// exactly zero in both float and double.
inline constexpr double kMaskSentinel = -1e30;
inline constexpr double kNormEpsilon = 1e-5;

template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;  // empty until the first backward touches it
};

// Insertion-ordered named parameters. Order is part of the checkpoint format.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Mat<T> value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.push_back(Parameter<T>{std::move(name), std::move(value), Mat<T>()});
    return items_.back();
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  Parameter<T>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("unknown parameter: " + std::string(name));
    return items_[it->second];
  }
  const Parameter<T>& at(std::string_view name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }

  void zero_grad() {
    for (auto& p : items_) p.grad.setZero(p.value.rows(), p.value.cols());
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Running statistics for batch normalization (1 x features each).
template <class T>
struct BatchNormState {
  Mat<T> running_mean;
  Mat<T> running_var;
  double momentum = 0.1;

  static BatchNormState init(Index features) {
    BatchNormState s;
    s.running_mean = Mat<T>::Zero(1, features);
    s.running_var = Mat<T>::Ones(1, features);
    return s;
  }
};

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const {
    if (!tape_) throw StateError("use of an unbound Var (no forward pass recorded)");
    return *tape_;
  }
  std::size_t id() const { return id_; }
  const Mat<T>& value() const { return tape().value(id_); }
  const Mat<T>& grad() const { return tape().grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat<T> value) { return push("constant", std::move(value), false, nullptr); }

  // A leaf whose gradient is kept on the tape (read it with Var::grad()).
  Var<T> input(Mat<T> value) { return push("input", std::move(value), true, nullptr); }

  Var<T> param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.needs_grad = true;
    n.op = "param";
    Parameter<T>* target = &p;
    n.backward = [target](Tape& t, std::size_t id) {
      const Mat<T>& g = t.nodes_[id].grad;
      if (target->grad.size() == 0) target->grad = Mat<T>::Zero(g.rows(), g.cols());
      target->grad += g;
    };
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Records an op result. needs_grad propagates from any parent.
  Var<T> record(const char* op, Mat<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw InvalidArgument(std::string(op) + ": operands from different tapes");
      needs = needs || nodes_[p.id()].needs_grad;
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : Backward());
  }

  const Mat<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }
  const Mat<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var<T>& out) {
    if (!out.valid()) throw StateError("backward called before forward");
    if (out.rows() != 1 || out.cols() != 1)
      throw ShapeMismatch("backward without a seed requires a scalar output");
    backward(out, Mat<T>::Ones(1, 1));
  }

  void backward(const Var<T>& out, const Mat<T>& seed) {
    if (!out.valid()) throw StateError("backward called before forward");
    if (backward_done_) throw StateError("backward already run on this tape");
    if (seed.rows() != out.rows() || seed.cols() != out.cols())
      throw ShapeMismatch("backward seed shape does not match output");
    backward_done_ = true;
    nodes_[out.id()].grad = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // Set when a primitive consumed randomness (dropout in train mode).
  bool stochastic() const { return stochastic_; }
  void mark_stochastic() { stochastic_ = true; }

 private:
  struct Node {
    Mat<T> value;
    const Mat<T>* external = nullptr;
    Mat<T> grad;
    bool needs_grad = false;
    const char* op = "";
    Backward backward;
  };

  Var<T> push(const char* op, Mat<T> value, bool needs, Backward backward) {
    // x * 0 is 0 for finite x and NaN otherwise; the sum vectorizes.
    if (check_finite_ && value.size() && !((value.array() * T(0)).sum() == T(0)))
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.op = op;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool check_finite_;
  bool backward_done_ = false;
  bool stochastic_ = false;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  auto& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", a.value() * b.value(), {a, b}, [ia, ib](Tape<T>& t, std::size_t id) {
    const Mat<T>& g = t.grad(id);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

// x * W + b, with b a 1 x out row broadcast over rows. b may be unbound.
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  if (x.cols() != w.rows()) throw ShapeMismatch("affine: input width does not match weight rows");
  auto& t = x.tape();
  Mat<T> y = x.value() * w.value();
  const bool has_bias = b.valid();
  if (has_bias) {
    if (b.rows() != 1 || b.cols() != w.cols()) throw ShapeMismatch("affine: bias shape");
    y.rowwise() += b.value().row(0);
  }
  const std::size_t ix = x.id(), iw = w.id(), ib = has_bias ? b.id() : 0;
  auto back = [ix, iw, ib, has_bias](Tape<T>& t, std::size_t id) {
    const Mat<T>& g = t.grad(id);
    if (t.needs_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.needs_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (has_bias && t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
  };
  if (has_bias) return t.record("affine", std::move(y), {x, w, b}, back);
  return t.record("affine", std::move(y), {x, w}, back);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape<T>& t, std::size_t id) {
    t.accumulate(ia, t.grad(id));
    t.accumulate(ib, t.grad(id));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "mul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", a.value().cwiseProduct(b.value()), {a, b},
                         [ia, ib](Tape<T>& t, std::size_t id) {
                           const Mat<T>& g = t.grad(id);
                           if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                           if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                         });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  const std::size_t ia = a.id();
  return a.tape().record("scale", a.value() * s, {a},
                         [ia, s](Tape<T>& t, std::size_t id) { t.accumulate(ia, t.grad(id) * s); });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t ia = a.id();
  return a.tape().record("transpose", a.value().transpose(), {a},
                         [ia](Tape<T>& t, std::size_t id) { t.accumulate(ia, t.grad(id).transpose()); });
}

// Row-major reinterpretation; element order is unchanged.
template <class T>
Var<T> reshape(const Var<T>& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ShapeMismatch("reshape: element count changes");
  const std::size_t ia = a.id();
  const Index r0 = a.rows(), c0 = a.cols();
  Mat<T> y = Eigen::Map<const Mat<T>>(a.value().data(), rows, cols);
  return a.tape().record("reshape", std::move(y), {a}, [ia, r0, c0](Tape<T>& t, std::size_t id) {
    const Mat<T>& g = t.grad(id);
    t.accumulate(ia, Eigen::Map<const Mat<T>>(g.data(), r0, c0));
  });
}

// Stacks `times` copies of a vertically.
template <class T>
Var<T> tile_rows(const Var<T>& a, Index times) {
  if (times < 1) throw InvalidArgument("tile_rows: times must be positive");
  const std::size_t ia = a.id();
  const Index r = a.rows();
  Mat<T> y(r * times, a.cols());
  for (Index k = 0; k < times; ++k) y.middleRows(k * r, r) = a.value();
  return a.tape().record("tile_rows", std::move(y), {a}, [ia, r, times](Tape<T>& t, std::size_t id) {
    const Mat<T>& g = t.grad(id);
    Mat<T> acc = g.topRows(r);
    for (Index k = 1; k < times; ++k) acc += g.middleRows(k * r, r);
    t.accumulate(ia, acc);
  });
}

template <class T>
Var<T> elu(const Var<T>& a) {
  Mat<T> y = a.value().unaryExpr([](T x) { return x > T(0) ? x : std::expm1(x); });
  const std::size_t ia = a.id();
  return a.tape().record("elu", std::move(y), {a}, [ia](Tape<T>& t, std::size_t id) {
    const Mat<T>& x = t.value(ia);
    Mat<T> d = x.unaryExpr([](T v) { return v > T(0) ? T(1) : std::exp(v); });
    t.accumulate(ia, t.grad(id).cwiseProduct(d));
  });
}

// Inverted dropout. Identity in eval mode or at rate 0.
template <class T>
Var<T> dropout(const Var<T>& a, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw InvalidArgument("dropout rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return a;
  auto& t = a.tape();
  t.mark_stochastic();
  // keep iff the top 53 bits of a draw fall below (1 - rate) * 2^53
  const auto cut = static_cast<std::uint64_t>((1.0 - rate) * 9007199254740992.0);
  const T inv = T(1.0 / (1.0 - rate));
  Mat<T> mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = (rng() >> 11) < cut ? inv : T(0);
  Mat<T> y = a.value().cwiseProduct(mask);
  const std::size_t ia = a.id();
  return t.record("dropout", std::move(y), {a}, [ia, mask = std::move(mask)](Tape<T>& t, std::size_t id) {
    t.accumulate(ia, t.grad(id).cwiseProduct(mask));
  });
}

// Normalizes each row over its columns, then applies gamma/beta (1 x cols).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const Index n = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw ShapeMismatch("layer_norm: gamma/beta must be 1 x features");
  const Mat<T>& xv = x.value();
  Mat<T> xhat(n, c);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const T mu = xv.row(i).mean();
    const T var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = T(1) / std::sqrt(var + T(kNormEpsilon));
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Mat<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      "layer_norm", std::move(y), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), c](Tape<T>& t, std::size_t id) {
        const Mat<T>& g = t.grad(id);
        if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.needs_grad(ix)) return;
        Mat<T> gx = g.array().rowwise() * t.value(ig).row(0).array();
        for (Index i = 0; i < gx.rows(); ++i) {
          const T m1 = gx.row(i).mean();
          const T m2 = gx.row(i).dot(xhat.row(i)) / T(c);
          gx.row(i) = ((gx.row(i).array() - m1) - xhat.row(i).array() * m2) * inv_std(i);
        }
        t.accumulate(ix, gx);
      });
}

// Normalizes each column over the batch (rows). Train mode uses batch
// statistics and updates `state`; eval mode uses state's running statistics.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                  Mode mode) {
  const Index n = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw ShapeMismatch("batch_norm: gamma/beta must be 1 x features");
  if (state.running_mean.cols() != c || state.running_var.cols() != c)
    throw ShapeMismatch("batch_norm: running statistics width");
  const Mat<T>& xv = x.value();
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();

  if (mode == Mode::eval) {
    Eigen::Array<T, 1, Eigen::Dynamic> inv_std =
        (state.running_var.row(0).array() + T(kNormEpsilon)).sqrt().inverse();
    Mat<T> xhat = (xv.array().rowwise() - state.running_mean.row(0).array()).rowwise() * inv_std;
    Mat<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape().record("batch_norm", std::move(y), {x, gamma, beta},
                           [ix, ig, ib, xhat = std::move(xhat), inv_std](Tape<T>& t, std::size_t id) {
                             const Mat<T>& g = t.grad(id);
                             if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                             if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                             if (t.needs_grad(ix))
                               t.accumulate(ix, (g.array().rowwise() * (t.value(ig).row(0).array() * inv_std))
                                                    .matrix());
                           });
  }

  Eigen::Array<T, 1, Eigen::Dynamic> mu = xv.colwise().mean().array();
  Mat<T> centered = xv.array().rowwise() - mu;
  Eigen::Array<T, 1, Eigen::Dynamic> var = centered.array().square().colwise().mean();
  Eigen::Array<T, 1, Eigen::Dynamic> inv_std = (var + T(kNormEpsilon)).sqrt().inverse();
  Mat<T> xhat = centered.array().rowwise() * inv_std;
  Mat<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();

  const T m = T(state.momentum);
  const T unbias = n > 1 ? T(n) / T(n - 1) : T(1);
  state.running_mean.row(0) = (T(1) - m) * state.running_mean.row(0).array() + m * mu;
  state.running_var.row(0) = (T(1) - m) * state.running_var.row(0).array() + m * var * unbias;

  return x.tape().record(
      "batch_norm", std::move(y), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std, n](Tape<T>& t, std::size_t id) {
        const Mat<T>& g = t.grad(id);
        if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.needs_grad(ix)) return;
        Mat<T> gx = g.array().rowwise() * t.value(ig).row(0).array();
        Eigen::Array<T, 1, Eigen::Dynamic> m1 = gx.colwise().mean().array();
        Eigen::Array<T, 1, Eigen::Dynamic> m2 = gx.cwiseProduct(xhat).colwise().sum().array() / T(n);
        Mat<T> out = ((gx.array().rowwise() - m1) - xhat.array().rowwise() * m2).rowwise() * inv_std;
        t.accumulate(ix, out);
      });
}

namespace detail {

// In-place numerically stable row softmax.
template <class Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const auto mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

}  // namespace detail

// Row-wise softmax of (logits + mask). The mask is a constant additive matrix
// of the same shape (0 or kMaskSentinel), or empty for no masking.
template <class T>
Var<T> masked_softmax(const Var<T>& logits, const Mat<T>& mask = Mat<T>()) {
  Mat<T> a = logits.value();
  if (mask.size() != 0) {
    if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw ShapeMismatch("masked_softmax: mask shape");
    a += mask;
  }
  detail::softmax_rows(a);
  if (mask.size() != 0)
    for (Index i = 0; i < a.size(); ++i)
      if (mask.data()[i] <= T(kMaskSentinel)) a.data()[i] = T(0);
  const std::size_t il = logits.id();
  auto& t = logits.tape();
  Var<T> out = t.record("masked_softmax", std::move(a), {logits}, [il](Tape<T>& t, std::size_t id) {
    const Mat<T>& g = t.grad(id);
    const Mat<T>& p = t.value(id);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(p).rowwise().sum();
    t.accumulate(il, (p.array() * (g.array().colwise() - dot.array())).matrix());
  });
  return out;
}

// How the diagonal of the attention logits is treated when masking is on.
enum class DiagonalMask {
  none,          // plain self-attention
  exclude,       // diagonal logit := -inf, so the diagonal weight is exactly 0
  zero_logit,    // diagonal logit := 0 (literal (J - I) * logits reading)
};

// Attention weights captured during a forward pass: for each sample b and
// head h, weights[b * heads + h] is an n x n row-stochastic matrix.
template <class T>
struct AttentionRecord {
  std::vector<Mat<T>> weights;
};

// Multi-head scaled dot-product attention over stacked blocks of `group`
// rows. q, k, v are (B*group) x d with d divisible by heads. Head h uses
// columns [h*dh, (h+1)*dh). Output is the concatenation of head outputs.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index group, Index heads, DiagonalMask diag,
                 AttentionRecord<T>* record = nullptr) {
  detail::same_shape(q, k, "attention(q,k)");
  detail::same_shape(q, v, "attention(q,v)");
  const Index rows = q.rows(), d = q.cols();
  if (group < 1 || rows % group != 0) throw ShapeMismatch("attention: rows not a multiple of group size");
  if (heads < 1 || d % heads != 0) throw ShapeMismatch("attention: width not divisible by heads");
  if (diag != DiagonalMask::none && group < 2)
    throw InvalidArgument("attention: diagonal masking needs at least 2 positions per row");
  const Index batch = rows / group, dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  const Mat<T>& qv = q.value();
  const Mat<T>& kv = k.value();
  const Mat<T>& vv = v.value();

  // weights for all (b, h), stacked: row block (b*heads + h) * group.
  Mat<T> probs(batch * heads * group, group);
  Mat<T> out(rows, d);
  Mat<T> logits(group, group);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = qv.block(b * group, h * dh, group, dh);
      auto kb = kv.block(b * group, h * dh, group, dh);
      auto vb = vv.block(b * group, h * dh, group, dh);
      logits.noalias() = (qb * kb.transpose()) * sc;
      if (diag == DiagonalMask::exclude) {
        for (Index i = 0; i < group; ++i) logits(i, i) = T(kMaskSentinel);
      } else if (diag == DiagonalMask::zero_logit) {
        for (Index i = 0; i < group; ++i) logits(i, i) = T(0);
      }
      detail::softmax_rows(logits);
      // vectorized exp clamps its argument, leaving a denormal instead of 0
      if (diag == DiagonalMask::exclude)
        for (Index i = 0; i < group; ++i) logits(i, i) = T(0);
      probs.middleRows((b * heads + h) * group, group) = logits;
      out.block(b * group, h * dh, group, dh).noalias() = logits * vb;
    }
  }
  if (record) {
    record->weights.clear();
    for (Index i = 0; i < batch * heads; ++i) record->weights.push_back(probs.middleRows(i * group, group));
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      "attention", std::move(out), {q, k, v},
      [iq, ik, iv, probs = std::move(probs), batch, heads, group, dh, sc, diag](Tape<T>& t, std::size_t id) {
        const Mat<T>& g = t.grad(id);
        const Mat<T>& qv = t.value(iq);
        const Mat<T>& kv = t.value(ik);
        const Mat<T>& vv = t.value(iv);
        const Index rows = g.rows(), d = g.cols();
        Mat<T> gq = Mat<T>::Zero(rows, d), gk = Mat<T>::Zero(rows, d), gv = Mat<T>::Zero(rows, d);
        Mat<T> ga(group, group), gl(group, group);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            auto p = probs.middleRows((b * heads + h) * group, group);
            auto gb = g.block(b * group, h * dh, group, dh);
            ga.noalias() = gb * vv.block(b * group, h * dh, group, dh).transpose();
            gv.block(b * group, h * dh, group, dh).noalias() += p.transpose() * gb;
            Eigen::Matrix<T, Eigen::Dynamic, 1> dot = ga.cwiseProduct(p).rowwise().sum();
            gl = p.array() * (ga.array().colwise() - dot.array());
            if (diag != DiagonalMask::none)
              for (Index i = 0; i < group; ++i) gl(i, i) = T(0);
            gq.block(b * group, h * dh, group, dh).noalias() += (gl * kv.block(b * group, h * dh, group, dh)) * sc;
            gk.block(b * group, h * dh, group, dh).noalias() +=
                (gl.transpose() * qv.block(b * group, h * dh, group, dh)) * sc;
          }
        }
        t.accumulate(iq, gq);
        t.accumulate(ik, gk);
        t.accumulate(iv, gv);
      });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Mat<T> y(1, 1);
  y(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record("sum", std::move(y), {a}, [ia, r, c](Tape<T>& t, std::size_t id) {
    t.accumulate(ia, Mat<T>::Constant(r, c, t.grad(id)(0, 0)));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  Mat<T> y(1, 1);
  y(0, 0) = a.value().mean();
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record("mean", std::move(y), {a}, [ia, r, c](Tape<T>& t, std::size_t id) {
    t.accumulate(ia, Mat<T>::Constant(r, c, t.grad(id)(0, 0) / T(r * c)));
  });
}

// Row-wise Euclidean norms as a rows x 1 column.
template <class T>
Var<T> l2_norm_rows(const Var<T>& a) {
  Mat<T> y = a.value().rowwise().norm();
  const std::size_t ia = a.id();
  return a.tape().record("l2_norm_rows", std::move(y), {a}, [ia](Tape<T>& t, std::size_t id) {
    const Mat<T>& x = t.value(ia);
    const Mat<T>& n = t.value(id);
    const Mat<T>& g = t.grad(id);
    Mat<T> gx(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
      gx.row(i) = n(i, 0) > T(0) ? (x.row(i) * (g(i, 0) / n(i, 0))).eval() : Mat<T>::Zero(1, x.cols());
    t.accumulate(ia, gx);
  });
}

// Scales each row to unit Euclidean norm. Zero rows are an error.
template <class T>
Var<T> normalize_rows(const Var<T>& a) {
  const Mat<T>& x = a.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = x.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i)
    if (!(norms(i) > T(0))) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
  Mat<T> y = x.array().colwise() / norms.array();
  const std::size_t ia = a.id();
  return a.tape().record("normalize_rows", std::move(y), {a}, [ia, norms](Tape<T>& t, std::size_t id) {
    const Mat<T>& y = t.value(id);
    const Mat<T>& g = t.grad(id);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(y).rowwise().sum();
    Mat<T> gx = (g - y.cwiseProduct(dot.replicate(1, y.cols()))).array().colwise() / norms.array();
    t.accumulate(ia, gx);
  });
}

// Weighted mean of elementwise binary cross-entropy with logits x against
// constant targets y in {0,1}: max(x,0) - x*y + log(1 + exp(-|x|)).
// weights (same shape, non-negative) may be empty, meaning all ones.
template <class T>
Var<T> bce_with_logits_mean(const Var<T>& x, const Mat<T>& targets, const Mat<T>& weights = Mat<T>()) {
  const Mat<T>& xv = x.value();
  if (targets.rows() != xv.rows() || targets.cols() != xv.cols()) throw ShapeMismatch("bce: target shape");
  const bool weighted = weights.size() != 0;
  if (weighted && (weights.rows() != xv.rows() || weights.cols() != xv.cols()))
    throw ShapeMismatch("bce: weight shape");
  const T total = weighted ? weights.sum() : T(xv.size());
  if (!(total > T(0))) throw InvalidArgument("bce: weights sum to zero");
  T acc = 0;
  for (Index i = 0; i < xv.size(); ++i) {
    const T v = xv.data()[i];
    const T l = std::max(v, T(0)) - v * targets.data()[i] + std::log1p(std::exp(-std::abs(v)));
    acc += weighted ? weights.data()[i] * l : l;
  }
  Mat<T> y(1, 1);
  y(0, 0) = acc / total;
  const std::size_t ix = x.id();
  return x.tape().record("bce_with_logits", std::move(y), {x},
                         [ix, targets, weights, weighted, total](Tape<T>& t, std::size_t id) {
                           const Mat<T>& xv = t.value(ix);
                           const T g = t.grad(id)(0, 0) / total;
                           Mat<T> gx(xv.rows(), xv.cols());
                           for (Index i = 0; i < xv.size(); ++i) {
                             const T s = T(1) / (T(1) + std::exp(-xv.data()[i]));
                             const T w = weighted ? weights.data()[i] : T(1);
                             gx.data()[i] = g * w * (s - targets.data()[i]);
                           }
                           t.accumulate(ix, gx);
                         });
}

// Mean over rows of -log softmax(logits_row)[label_row].
template <class T>
Var<T> cross_entropy_mean(const Var<T>& logits, const std::vector<int>& labels) {
  const Mat<T>& lv = logits.value();
  if (static_cast<Index>(labels.size()) != lv.rows()) throw ShapeMismatch("cross_entropy: label count");
  for (int l : labels)
    if (l < 0 || l >= lv.cols()) throw InvalidArgument("cross_entropy: label out of range");
  Mat<T> p = lv;
  detail::softmax_rows(p);
  T acc = 0;
  for (Index i = 0; i < lv.rows(); ++i) {
    const T mx = lv.row(i).maxCoeff();
    const T lse = mx + std::log((lv.row(i).array() - mx).exp().sum());
    acc += lse - lv(i, labels[i]);
  }
  Mat<T> y(1, 1);
  y(0, 0) = acc / T(lv.rows());
  const std::size_t il = logits.id();
  return logits.tape().record("cross_entropy", std::move(y), {logits},
                              [il, p = std::move(p), labels](Tape<T>& t, std::size_t id) {
                                Mat<T> g = p;
                                for (Index i = 0; i < g.rows(); ++i) g(i, labels[i]) -= T(1);
                                t.accumulate(il, g * (t.grad(id)(0, 0) / T(g.rows())));
                              });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Index worst_index = 0;
  std::size_t coordinates = 0;
};

// `program(tape)` must build a scalar loss from parameters bound on `tape`.
// Compares every parameter coordinate's analytic gradient with the central
// difference (f(p+h) - f(p-h)) / 2h; relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8).
template <class Program>
GradCheckResult grad_check(ParameterSet<double>& params, Program&& program, double h = 1e-5) {
  params.zero_grad();
  double base = 0.0;
  {
    Tape<double> tape;
    Var<double> loss = program(tape);
    if (tape.stochastic())
      throw StateError("grad_check: program uses randomness (dropout active); disable it first");
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeMismatch("grad_check: program must return a scalar");
    base = loss.value()(0, 0);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape;
    return program(tape).value()(0, 0);
  };
  const double again = eval();
  if (std::memcmp(&again, &base, sizeof(double)) != 0)
    throw StateError("grad_check: program is not deterministic");

  GradCheckResult res;
  for (auto& p : params) {
    const Mat<double> analytic =
        p.grad.size() ? p.grad : Mat<double>::Zero(p.value.rows(), p.value.cols());
    for (Index i = 0; i < p.value.size(); ++i) {
      double& theta = p.value.data()[i];
      const double saved = theta;
      theta = saved + h;
      const double fp = eval();
      theta = saved - h;
      const double fm = eval();
      theta = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++res.coordinates;
      if (rel > res.max_rel_error || res.worst_parameter.empty()) {
        if (rel >= res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst_parameter = p.name;
          res.worst_index = i;
        }
      }
    }
  }
  return res;
}

}  // namespace cldta
