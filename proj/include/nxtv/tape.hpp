#pragma once

#include "nxtv/core.hpp"

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace nxtv {

// Reverse-mode autodiff over dense Eigen matrices. Nodes are appended in
// program order, so reverse creation order is a valid topological order for
// the backward sweep. One tape builds one loss graph; clear() between graphs.
template <typename S>
class Tape {
 public:
  struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Mat<S>& value() const { return tape->value(*this); }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat<S> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }
  Var constant(Mat<S> value) { return leaf(std::move(value), false); }

  const Mat<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  // Valid after backward(); zero matrix if the var was not reached.
  Mat<S> grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root, S seed = S(1)) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.value.size() != 1)
      throw ConfigError("backward: root must be a scalar (1x1) node");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    r.grad = Mat<S>::Constant(1, 1, seed);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back();
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // --- operations -----------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Var y = make(value(a) + value(b), {a, b});
    set_back(y, [this, y, a, b] {
      acc(a, g(y));
      acc(b, g(y));
    });
    return y;
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Var y = make(value(a) - value(b), {a, b});
    set_back(y, [this, y, a, b] {
      acc(a, g(y));
      acc(b, -g(y));
    });
    return y;
  }

  Var cmul(Var a, Var b) {
    check_same_shape(a, b, "cmul");
    Var y = make((value(a).array() * value(b).array()).matrix(), {a, b});
    set_back(y, [this, y, a, b] {
      acc(a, (g(y).array() * value(b).array()).matrix());
      acc(b, (g(y).array() * value(a).array()).matrix());
    });
    return y;
  }

  Var scale(Var a, S c) {
    Var y = make(value(a) * c, {a});
    set_back(y, [this, y, a, c] { acc(a, g(y) * c); });
    return y;
  }

  // y = alpha * a + beta (elementwise constants)
  Var affine_const(Var a, S alpha, S beta) {
    Var y = make(((value(a).array() * alpha) + beta).matrix(), {a});
    set_back(y, [this, y, a, alpha] { acc(a, g(y) * alpha); });
    return y;
  }

  // y = a + M, M a constant matrix (e.g. the additive attention bias)
  Var add_const(Var a, const Mat<S>& m) {
    if (m.rows() != value(a).rows() || m.cols() != value(a).cols())
      throw ConfigError("add_const: shape mismatch");
    Var y = make(value(a) + m, {a});
    set_back(y, [this, y, a] { acc(a, g(y)); });
    return y;
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows())
      throw ConfigError("matmul: inner dims differ");
    Var y = make(value(a) * value(b), {a, b});
    set_back(y, [this, y, a, b] {
      acc_prod(a, g(y), value(b).transpose());
      acc_prod(b, value(a).transpose(), g(y));
    });
    return y;
  }

  // y = alpha * a * b^T  (attention scores)
  Var matmul_nt(Var a, Var b, S alpha = S(1)) {
    if (value(a).cols() != value(b).cols())
      throw ConfigError("matmul_nt: inner dims differ");
    Var y = make((value(a) * value(b).transpose()) * alpha, {a, b});
    set_back(y, [this, y, a, b, alpha] {
      acc_prod(a, g(y) * alpha, value(b));
      acc_prod(b, g(y).transpose() * alpha, value(a));
    });
    return y;
  }

  Var softmax_rows(Var a) {
    const Mat<S>& x = value(a);
    Mat<S> out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      const S mx = x.row(i).maxCoeff();
      auto e = (x.row(i).array() - mx).exp();
      out.row(i) = (e / e.sum()).matrix();
    }
    Var y = make(std::move(out), {a});
    set_back(y, [this, y, a] {
      const Mat<S>& p = value(y);
      const Mat<S>& gy = g(y);
      Mat<S> dx(p.rows(), p.cols());
      for (Index i = 0; i < p.rows(); ++i) {
        const S dot = (gy.row(i).array() * p.row(i).array()).sum();
        dx.row(i) = (p.row(i).array() * (gy.row(i).array() - dot)).matrix();
      }
      acc(a, dx);
    });
    return y;
  }

  // Per-row standardization without affine terms.
  Var layernorm_rows(Var a, S eps) {
    const Mat<S>& x = value(a);
    const Index d = x.cols();
    auto inv_std = std::make_shared<Mat<S>>(x.rows(), 1);
    Mat<S> out(x.rows(), d);
    for (Index i = 0; i < x.rows(); ++i) {
      const S mu = x.row(i).mean();
      const S var = (x.row(i).array() - mu).square().sum() / S(d);
      const S is = S(1) / std::sqrt(var + eps);
      (*inv_std)(i, 0) = is;
      out.row(i) = ((x.row(i).array() - mu) * is).matrix();
    }
    Var y = make(std::move(out), {a});
    set_back(y, [this, y, a, inv_std] {
      const Mat<S>& n = value(y);
      const Mat<S>& gy = g(y);
      Mat<S> dx(n.rows(), n.cols());
      const S d = static_cast<S>(n.cols());
      for (Index i = 0; i < n.rows(); ++i) {
        const S mg = gy.row(i).mean();
        const S mgn = (gy.row(i).array() * n.row(i).array()).sum() / d;
        dx.row(i) = ((*inv_std)(i, 0) *
                     (gy.row(i).array() - mg - n.row(i).array() * mgn))
                        .matrix();
      }
      acc(a, dx);
    });
    return y;
  }

  // y = x .* (1 x D scale broadcast) + (1 x D shift broadcast)
  Var row_affine(Var x, Var s, Var b) {
    check_rowvec(x, s, "row_affine scale");
    check_rowvec(x, b, "row_affine shift");
    Mat<S> out = value(x);
    out.array().rowwise() *= value(s).row(0).array();
    out.array().rowwise() += value(b).row(0).array();
    Var y = make(std::move(out), {x, s, b});
    set_back(y, [this, y, x, s, b] {
      const Mat<S>& gy = g(y);
      Mat<S> dx = gy;
      dx.array().rowwise() *= value(s).row(0).array();
      acc(x, dx);
      acc(s, (gy.array() * value(x).array()).colwise().sum().matrix());
      acc(b, gy.colwise().sum());
    });
    return y;
  }

  Var row_mul(Var x, Var s) {
    check_rowvec(x, s, "row_mul scale");
    Mat<S> out = value(x);
    out.array().rowwise() *= value(s).row(0).array();
    Var y = make(std::move(out), {x, s});
    set_back(y, [this, y, x, s] {
      const Mat<S>& gy = g(y);
      Mat<S> dx = gy;
      dx.array().rowwise() *= value(s).row(0).array();
      acc(x, dx);
      acc(s, (gy.array() * value(x).array()).colwise().sum().matrix());
    });
    return y;
  }

  // y = x + (1 x D bias broadcast)
  Var add_row(Var x, Var b) {
    check_rowvec(x, b, "add_row bias");
    Mat<S> out = value(x);
    out.array().rowwise() += value(b).row(0).array();
    Var y = make(std::move(out), {x, b});
    set_back(y, [this, y, x, b] {
      acc(x, g(y));
      acc(b, g(y).colwise().sum());
    });
    return y;
  }

  // Exact GELU, x * Phi(x).
  Var gelu(Var a) {
    const Mat<S>& x = value(a);
    Mat<S> out = x.unaryExpr([](S v) {
      return static_cast<S>(v * S(0.5) *
                            (S(1) + std::erf(v / S(1.4142135623730951))));
    });
    Var y = make(std::move(out), {a});
    set_back(y, [this, y, a] {
      const Mat<S>& x = value(a);
      Mat<S> d = x.unaryExpr([](S v) {
        const S phi = S(0.5) * (S(1) + std::erf(v / S(1.4142135623730951)));
        const S pdf =
            std::exp(S(-0.5) * v * v) * S(0.3989422804014327);
        return static_cast<S>(phi + v * pdf);
      });
      acc(a, (g(y).array() * d.array()).matrix());
    });
    return y;
  }

  // n copies of a 1 x D row.
  Var repeat_row(Var a, Index n) {
    if (value(a).rows() != 1) throw ConfigError("repeat_row: need a row vector");
    Mat<S> out = value(a).replicate(n, 1);
    Var y = make(std::move(out), {a});
    set_back(y, [this, y, a] { acc(a, g(y).colwise().sum()); });
    return y;
  }

  Var rows(Var a, Index i0, Index n) {
    if (i0 < 0 || i0 + n > value(a).rows())
      throw ConfigError("rows: slice out of range");
    Var y = make(value(a).middleRows(i0, n), {a});
    set_back(y, [this, y, a, i0, n] {
      acc_block(a, i0, 0, n, value(y).cols(), g(y));
    });
    return y;
  }

  Var cols(Var a, Index j0, Index w) {
    if (j0 < 0 || j0 + w > value(a).cols())
      throw ConfigError("cols: slice out of range");
    Var y = make(value(a).middleCols(j0, w), {a});
    set_back(y, [this, y, a, j0, w] {
      acc_block(a, 0, j0, value(y).rows(), w, g(y));
    });
    return y;
  }

  Var hcat(Var a, Var b) {
    if (value(a).rows() != value(b).rows())
      throw ConfigError("hcat: row count mismatch");
    Mat<S> out(value(a).rows(), value(a).cols() + value(b).cols());
    out << value(a), value(b);
    Var y = make(std::move(out), {a, b});
    set_back(y, [this, y, a, b] {
      const Index ca = value(a).cols();
      acc(a, g(y).leftCols(ca));
      acc(b, g(y).rightCols(value(b).cols()));
    });
    return y;
  }

  Var vcat(Var a, Var b) {
    if (value(a).cols() != value(b).cols())
      throw ConfigError("vcat: col count mismatch");
    Mat<S> out(value(a).rows() + value(b).rows(), value(a).cols());
    out << value(a), value(b);
    Var y = make(std::move(out), {a, b});
    set_back(y, [this, y, a, b] {
      const Index ra = value(a).rows();
      acc(a, g(y).topRows(ra));
      acc(b, g(y).bottomRows(value(b).rows()));
    });
    return y;
  }

  // mean((a - b)^2) over all elements -> 1x1
  Var mean_sq_diff(Var a, Var b) {
    check_same_shape(a, b, "mean_sq_diff");
    const Mat<S> d = value(a) - value(b);
    const S n = static_cast<S>(d.size());
    Var y = make(Mat<S>::Constant(1, 1, d.array().square().sum() / n), {a, b});
    set_back(y, [this, y, a, b, n] {
      const S c = S(2) / n * g(y)(0, 0);
      acc(a, (value(a) - value(b)) * c);
      acc(b, (value(b) - value(a)) * c);
    });
    return y;
  }

  Var mean_all(Var a) {
    const S n = static_cast<S>(value(a).size());
    Var y = make(Mat<S>::Constant(1, 1, value(a).sum() / n), {a});
    set_back(y, [this, y, a, n] {
      acc(a, Mat<S>::Constant(value(a).rows(), value(a).cols(),
                              g(y)(0, 0) / n));
    });
    return y;
  }

  // y = fwd(a) for a fixed linear map; adj must apply the adjoint map to the
  // incoming gradient (for orthogonal maps like RoPE, the inverse rotation).
  Var linear_map(Var a, std::function<Mat<S>(const Mat<S>&)> fwd,
                 std::function<Mat<S>(const Mat<S>&)> adj) {
    Var y = make(fwd(value(a)), {a});
    set_back(y, [this, y, a, adj = std::move(adj)] { acc(a, adj(g(y))); });
    return y;
  }

  // mean over rows of (logsumexp(row) - row[label])
  Var cross_entropy(Var logits, std::shared_ptr<const std::vector<int>> labels) {
    const Mat<S>& x = value(logits);
    if (static_cast<Index>(labels->size()) != x.rows())
      throw ConfigError("cross_entropy: label count mismatch");
    Mat<S> p(x.rows(), x.cols());
    S loss = 0;
    for (Index i = 0; i < x.rows(); ++i) {
      const int li = (*labels)[static_cast<std::size_t>(i)];
      if (li < 0 || li >= x.cols())
        throw ConfigError("cross_entropy: label out of range");
      const S mx = x.row(i).maxCoeff();
      auto e = (x.row(i).array() - mx).exp();
      const S z = e.sum();
      p.row(i) = (e / z).matrix();
      loss += std::log(z) + mx - x(i, li);
    }
    loss /= static_cast<S>(x.rows());
    auto probs = std::make_shared<Mat<S>>(std::move(p));
    Var y = make(Mat<S>::Constant(1, 1, loss), {logits});
    set_back(y, [this, y, logits, probs, labels] {
      Mat<S> dx = *probs;
      for (Index i = 0; i < dx.rows(); ++i)
        dx(i, (*labels)[static_cast<std::size_t>(i)]) -= S(1);
      acc(logits, dx * (g(y)(0, 0) / static_cast<S>(dx.rows())));
    });
    return y;
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool requires_grad;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  Var make(Mat<S> value, std::initializer_list<Var> parents) {
    bool rg = false;
    for (const Var& p : parents) {
      assert(p.tape == this);
      rg = rg || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, rg, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  void set_back(Var y, F&& f) {
    Node& n = nodes_[static_cast<std::size_t>(y.id)];
    if (n.requires_grad) n.back = std::forward<F>(f);
  }

  const Mat<S>& g(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  template <typename E>
  void acc(Var v, const E& e) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    n.grad += e;
  }

  template <typename A, typename B>
  void acc_prod(Var v, const A& a, const B& b) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    n.grad.noalias() += a * b;
  }

  template <typename E>
  void acc_block(Var v, Index i0, Index j0, Index r, Index c, const E& e) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    n.grad.block(i0, j0, r, c) += e;
  }

  void check_same_shape(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() ||
        value(a).cols() != value(b).cols())
      throw ConfigError(std::string(what) + ": shape mismatch");
  }
  void check_rowvec(Var x, Var s, const char* what) const {
    if (value(s).rows() != 1 || value(s).cols() != value(x).cols())
      throw ConfigError(std::string(what) + ": need 1 x cols(x)");
  }
};

template <typename S>
using Var = typename Tape<S>::Var;

}  // namespace nxtv
