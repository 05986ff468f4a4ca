#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fmtts::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// A named trainable tensor. Lives outside the tape; graphs reference it and
// backward() accumulates into `grad`.
template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v)
      : name(std::move(n)), value(std::move(v)) {
    grad = Mat<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

template <class S>
class Tape;

// Lightweight handle into a tape.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const;
};

// Reverse-mode tape over dense Eigen matrices. Nodes are created in forward
// order; backward() walks them in reverse, handing each node's accumulated
// gradient to its pull function. Node ids are assigned sequentially, so an
// op can capture its own id (the tape size before make) to read its output
// value during the backward pass.
template <class S>
class Tape {
 public:
  struct Node {
    Mat<S> value;
    Mat<S> grad;  // lazily sized on first contribution
    std::function<void(Tape&, const Mat<S>&)> pull;
    bool needs_grad = false;
  };

  Var<S> make(Mat<S> v, bool needs_grad,
              std::function<void(Tape&, const Mat<S>&)> pull = nullptr) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<S> constant(Mat<S> v) { return make(std::move(v), false); }

  Var<S> constant_scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  Var<S> param(Parameter<S>& p) {
    Parameter<S>* pp = &p;
    return make(p.value, true,
                [pp](Tape&, const Mat<S>& g) { pp->grad += g; });
  }

  const Mat<S>& val(int id) const { return nodes_[id].value; }
  bool needs(int id) const { return nodes_[id].needs_grad; }

  void add_grad(int id, const Mat<S>& g) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0)
      n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  const Mat<S>& grad_of(int id) const { return nodes_[id].grad; }

  void backward(Var<S> loss) {
    if (loss.tape != this) throw std::logic_error("backward: foreign var");
    const Node& ln = nodes_[loss.id];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw std::invalid_argument("backward: loss must be 1x1");
    Mat<S> seed(1, 1);
    seed(0, 0) = S(1);
    add_grad(loss.id, seed);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.pull) continue;
      n.pull(*this, n.grad);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <class S>
const Mat<S>& Var<S>::value() const {
  return tape->val(id);
}

template <class S>
S Var<S>::scalar() const {
  const Mat<S>& v = value();
  if (v.rows() != 1 || v.cols() != 1)
    throw std::logic_error("scalar() on non-1x1 var");
  return v(0, 0);
}

namespace detail {

template <class S>
void check_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw std::logic_error("vars from different tapes");
}

template <class S>
void check_same_shape(Var<S> a, Var<S> b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

}  // namespace detail

// ---- arithmetic ----

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.make(t.val(ia) + t.val(ib), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                  if (t.needs(ib)) t.add_grad(ib, g);
                });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.make(t.val(ia) - t.val(ib), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                  if (t.needs(ib)) t.add_grad(ib, -g);
                });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.make(t.val(ia).cwiseProduct(t.val(ib)), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g.cwiseProduct(t.val(ib)));
                  if (t.needs(ib)) t.add_grad(ib, g.cwiseProduct(t.val(ia)));
                });
}

template <class S>
Var<S> neg(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(-t.val(ia), t.needs(ia), [ia](Tape<S>& t, const Mat<S>& g) {
    if (t.needs(ia)) t.add_grad(ia, -g);
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(t.val(ia) * c, t.needs(ia),
                [ia, c](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g * c);
                });
}

template <class S>
Var<S> add_const(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).array() + c), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                });
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.make(t.val(ia) * t.val(ib), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g * t.val(ib).transpose());
                  if (t.needs(ib)) t.add_grad(ib, t.val(ia).transpose() * g);
                });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(t.val(ia).transpose(), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g.transpose());
                });
}

// ---- nonlinearities ----

template <class S>
Var<S> tanh_(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const int self = static_cast<int>(t.size());
  return t.make(Mat<S>(t.val(ia).array().tanh()), t.needs(ia),
                [ia, self](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& y = t.val(self).array();
                  t.add_grad(ia, (g.array() * (S(1) - y.square())).matrix());
                });
}

template <class S>
Var<S> exp_(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const int self = static_cast<int>(t.size());
  return t.make(Mat<S>(t.val(ia).array().exp()), t.needs(ia),
                [ia, self](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  t.add_grad(ia, g.cwiseProduct(t.val(self)));
                });
}

template <class S>
Var<S> log_(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).array().log()), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  t.add_grad(ia, g.cwiseQuotient(t.val(ia)));
                });
}

template <class S>
Var<S> abs_(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).array().abs()), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia).array();
                  Mat<S> s = (x > S(0)).template cast<S>() -
                             (x < S(0)).template cast<S>();
                  t.add_grad(ia, g.cwiseProduct(s));
                });
}

template <class S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> sig = (S(1) / (S(1) + (-t.val(ia).array()).exp())).matrix();
  Mat<S> y = t.val(ia).cwiseProduct(sig);
  return t.make(std::move(y), t.needs(ia),
                [ia, sig](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia).array();
                  const auto& s = sig.array();
                  Mat<S> d = (s * (S(1) + x * (S(1) - s))).matrix();
                  t.add_grad(ia, g.cwiseProduct(d));
                });
}

// y = (a + eps)^(-1/2). Inputs must satisfy a + eps > 0.
template <class S>
Var<S> rsqrt_off(Var<S> a, S eps) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const int self = static_cast<int>(t.size());
  return t.make(Mat<S>((t.val(ia).array() + eps).rsqrt()), t.needs(ia),
                [ia, self](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& y = t.val(self).array();
                  t.add_grad(ia, (g.array() * S(-0.5) * y.cube()).matrix());
                });
}

// Round to nearest integer and clamp each column j into [0, hi[j]].
// Backward is the identity (straight-through).
template <class S>
Var<S> ste_round_clamp(Var<S> a, const std::vector<S>& hi_per_col) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  if (static_cast<Eigen::Index>(hi_per_col.size()) != a.cols())
    throw std::invalid_argument("ste_round_clamp: hi size mismatch");
  Mat<S> y = t.val(ia);
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      S r = std::nearbyint(y(i, j));
      if (r < S(0)) r = S(0);
      if (r > hi_per_col[j]) r = hi_per_col[j];
      y(i, j) = r;
    }
  }
  return t.make(std::move(y), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                });
}

template <class S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value());
}

// ---- softmax ----

template <class S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> y = t.val(ia);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  const int self = static_cast<int>(t.size());
  return t.make(std::move(y), t.needs(ia),
                [ia, self](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const Mat<S>& y = t.val(self);
                  Mat<S> gx(y.rows(), y.cols());
                  for (Eigen::Index r = 0; r < y.rows(); ++r) {
                    const S dot = g.row(r).dot(y.row(r));
                    gx.row(r) = y.row(r).cwiseProduct(
                        (g.row(r).array() - dot).matrix());
                  }
                  t.add_grad(ia, gx);
                });
}

template <class S>
Var<S> log_softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> y = t.val(ia);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S m = y.row(r).maxCoeff();
    const S lse = std::log((y.row(r).array() - m).exp().sum()) + m;
    y.row(r) = y.row(r).array() - lse;
  }
  const int self = static_cast<int>(t.size());
  return t.make(std::move(y), t.needs(ia),
                [ia, self](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const Mat<S>& y = t.val(self);
                  Mat<S> gx(y.rows(), y.cols());
                  for (Eigen::Index r = 0; r < y.rows(); ++r) {
                    const S gs = g.row(r).sum();
                    gx.row(r) = g.row(r) - (y.row(r).array().exp() * gs).matrix();
                  }
                  t.add_grad(ia, gx);
                });
}

// ---- reductions ----

template <class S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> y(1, 1);
  y(0, 0) = t.val(ia).sum();
  return t.make(std::move(y), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  t.add_grad(ia, Mat<S>::Constant(x.rows(), x.cols(), g(0, 0)));
                });
}

template <class S>
Var<S> mean_all(Var<S> a) {
  const S n = static_cast<S>(a.rows() * a.cols());
  return scale(sum_all(a), S(1) / n);
}

// [T x E] -> [T x 1], sum across columns.
template <class S>
Var<S> sum_cols(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).rowwise().sum()), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  t.add_grad(ia, g * Mat<S>::Ones(1, x.cols()));
                });
}

// [T x E] -> [1 x E], sum across rows.
template <class S>
Var<S> sum_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).colwise().sum()), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  t.add_grad(ia, Mat<S>::Ones(x.rows(), 1) * g);
                });
}

template <class S>
Var<S> mean_cols(Var<S> a) {
  return scale(sum_cols(a), S(1) / static_cast<S>(a.cols()));
}

template <class S>
Var<S> mean_rows(Var<S> a) {
  return scale(sum_rows(a), S(1) / static_cast<S>(a.rows()));
}

// ---- broadcasts ----

template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (b.rows() != 1 || b.cols() != a.cols())
    throw std::invalid_argument("add_rowvec: b must be 1 x cols(a)");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Mat<S> y = t.val(ia);
  y.rowwise() += t.val(ib).row(0);
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                  if (t.needs(ib)) t.add_grad(ib, Mat<S>(g.colwise().sum()));
                });
}

template <class S>
Var<S> add_colvec(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (b.cols() != 1 || b.rows() != a.rows())
    throw std::invalid_argument("add_colvec: b must be rows(a) x 1");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Mat<S> y = t.val(ia);
  y.colwise() += t.val(ib).col(0);
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g);
                  if (t.needs(ib)) t.add_grad(ib, Mat<S>(g.rowwise().sum()));
                });
}

template <class S>
Var<S> mul_rowvec(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (b.rows() != 1 || b.cols() != a.cols())
    throw std::invalid_argument("mul_rowvec: b must be 1 x cols(a)");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Mat<S> y = t.val(ia);
  y.array().rowwise() *= t.val(ib).row(0).array();
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) {
                    Mat<S> ga = g;
                    ga.array().rowwise() *= t.val(ib).row(0).array();
                    t.add_grad(ia, ga);
                  }
                  if (t.needs(ib)) {
                    Mat<S> gb = g.cwiseProduct(t.val(ia)).colwise().sum();
                    t.add_grad(ib, gb);
                  }
                });
}

template <class S>
Var<S> mul_colvec(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (b.cols() != 1 || b.rows() != a.rows())
    throw std::invalid_argument("mul_colvec: b must be rows(a) x 1");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Mat<S> y = t.val(ia);
  y.array().colwise() *= t.val(ib).col(0).array();
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) {
                    Mat<S> ga = g;
                    ga.array().colwise() *= t.val(ib).col(0).array();
                    t.add_grad(ia, ga);
                  }
                  if (t.needs(ib)) {
                    Mat<S> gb = g.cwiseProduct(t.val(ia)).rowwise().sum();
                    t.add_grad(ib, gb);
                  }
                });
}

// Multiply by a 1x1 var broadcast over all entries.
template <class S>
Var<S> mul_scalar1(Var<S> a, Var<S> s) {
  detail::check_same_tape(a, s);
  if (s.rows() != 1 || s.cols() != 1)
    throw std::invalid_argument("mul_scalar1: s must be 1x1");
  Tape<S>& t = *a.tape;
  const int ia = a.id, is = s.id;
  return t.make(Mat<S>(t.val(ia) * t.val(is)(0, 0)),
                t.needs(ia) || t.needs(is),
                [ia, is](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, g * t.val(is)(0, 0));
                  if (t.needs(is)) {
                    Mat<S> gs(1, 1);
                    gs(0, 0) = g.cwiseProduct(t.val(ia)).sum();
                    t.add_grad(is, gs);
                  }
                });
}

// Broadcast a [1 x E] row to [n x E].
template <class S>
Var<S> repeat_row(Var<S> a, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  if (a.rows() != 1) throw std::invalid_argument("repeat_row: a must be 1 x E");
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).replicate(n, 1)), t.needs(ia),
                [ia](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  t.add_grad(ia, Mat<S>(g.colwise().sum()));
                });
}

// ---- structure ----

template <class S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: column count mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  const Eigen::Index ra = a.rows(), rb = b.rows();
  Mat<S> y(ra + rb, a.cols());
  y.topRows(ra) = t.val(ia);
  y.bottomRows(rb) = t.val(ib);
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib, ra, rb](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, Mat<S>(g.topRows(ra)));
                  if (t.needs(ib)) t.add_grad(ib, Mat<S>(g.bottomRows(rb)));
                });
}

template <class S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows())
    throw std::invalid_argument("concat_cols: row count mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Mat<S> y(a.rows(), ca + cb);
  y.leftCols(ca) = t.val(ia);
  y.rightCols(cb) = t.val(ib);
  return t.make(std::move(y), t.needs(ia) || t.needs(ib),
                [ia, ib, ca, cb](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs(ia)) t.add_grad(ia, Mat<S>(g.leftCols(ca)));
                  if (t.needs(ib)) t.add_grad(ib, Mat<S>(g.rightCols(cb)));
                });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index r0, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  if (r0 < 0 || n < 0 || r0 + n > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).middleRows(r0, n)), t.needs(ia),
                [ia, r0, n](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                  gx.middleRows(r0, n) = g;
                  t.add_grad(ia, gx);
                });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index c0, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  if (c0 < 0 || n < 0 || c0 + n > a.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  const int ia = a.id;
  return t.make(Mat<S>(t.val(ia).middleCols(c0, n)), t.needs(ia),
                [ia, c0, n](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                  gx.middleCols(c0, n) = g;
                  t.add_grad(ia, gx);
                });
}

// y.row(i) = a.row(idx[i]); indices may repeat.
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  for (int i : idx)
    if (i < 0 || i >= a.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(i) +
                              " out of range");
  Mat<S> y(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) y.row(i) = t.val(ia).row(idx[i]);
  return t.make(std::move(y), t.needs(ia),
                [ia, idx = std::move(idx)](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  const auto& x = t.val(ia);
                  Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    gx.row(idx[i]) += g.row(i);
                  t.add_grad(ia, gx);
                });
}

// Unfold a [T x E] sequence into [T x K*E] with zero padding, so that a 1-D
// convolution along time becomes a single matmul with a [K*E x E_out] weight.
template <class S>
Var<S> im2col(Var<S> a, int kernel, int dilation = 1) {
  Tape<S>& t = *a.tape;
  if (kernel < 1 || kernel % 2 == 0)
    throw std::invalid_argument("im2col: kernel must be odd and positive");
  if (dilation < 1) throw std::invalid_argument("im2col: dilation < 1");
  const int ia = a.id;
  const Eigen::Index T = a.rows(), E = a.cols();
  const int half = kernel / 2;
  Mat<S> y = Mat<S>::Zero(T, kernel * E);
  for (int k = 0; k < kernel; ++k) {
    const Eigen::Index off = static_cast<Eigen::Index>((k - half) * dilation);
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index src = i + off;
      if (src >= 0 && src < T) y.block(i, k * E, 1, E) = t.val(ia).row(src);
    }
  }
  return t.make(std::move(y), t.needs(ia),
                [ia, kernel, dilation, half, T, E](Tape<S>& t, const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  Mat<S> gx = Mat<S>::Zero(T, E);
                  for (int k = 0; k < kernel; ++k) {
                    const Eigen::Index off =
                        static_cast<Eigen::Index>((k - half) * dilation);
                    for (Eigen::Index i = 0; i < T; ++i) {
                      const Eigen::Index src = i + off;
                      if (src >= 0 && src < T)
                        gx.row(src) += g.block(i, k * E, 1, E);
                    }
                  }
                  t.add_grad(ia, gx);
                });
}

// ---- composed helpers ----

// Normalize each row to zero mean, unit variance across columns (no affine).
template <class S>
Var<S> layer_norm_rows(Var<S> a, S eps) {
  Var<S> mu = mean_cols(a);                      // [T x 1]
  Var<S> xc = add_colvec(a, neg(mu));            // centered
  Var<S> var = mean_cols(mul(xc, xc));           // [T x 1]
  Var<S> inv = rsqrt_off(var, eps);              // [T x 1]
  return mul_colvec(xc, inv);
}

// Mean squared error over all entries.
template <class S>
Var<S> mse(Var<S> a, Var<S> b) {
  Var<S> d = sub(a, b);
  return mean_all(mul(d, d));
}

// Mean absolute error over all entries.
template <class S>
Var<S> mae(Var<S> a, Var<S> b) {
  return mean_all(abs_(sub(a, b)));
}

}  // namespace fmtts::ad
