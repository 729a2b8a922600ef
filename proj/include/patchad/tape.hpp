#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "patchad/error.hpp"

namespace patchad {

/// Row-major 2-D tensor. Rows index points/patches, columns index feature channels.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
};

/// Named, insertion-ordered parameters with stable addresses.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Matrix<T> init) {
    for (const auto& p : params_)
      if (p.name == name) fail(ErrorCode::BadConfig, "duplicate parameter '" + name + "'");
    Matrix<T> grad = Matrix<T>::Zero(init.rows(), init.cols());
    params_.push_back({std::move(name), std::move(init), std::move(grad)});
    return params_.back();
  }

  Parameter<T>& get(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    fail(ErrorCode::BadConfig, "no parameter named '" + std::string(name) + "'");
  }
  const Parameter<T>& get(std::string_view name) const { return const_cast<ParameterSet*>(this)->get(name); }
  bool contains(std::string_view name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  /// Copies values by name from `other` (shapes must agree).
  template <typename U>
  void assign_from(const ParameterSet<U>& other) {
    for (const auto& q : other) {
      auto& p = get(q.name);
      if (p.value.rows() != q.value.rows() || p.value.cols() != q.value.cols())
        fail(ErrorCode::ShapeMismatch, "parameter '" + q.name + "' has a different shape");
      p.value = q.value.template cast<T>();
    }
  }

 private:
  std::deque<Parameter<T>> params_;
};

/// Glorot-uniform weight matrix.
template <typename T>
Matrix<T> glorot(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix<T> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
  return w;
}

/// Glorot draw with zero-mean columns, for layers fed by elu+1 activations: the constant +1
/// component of the input then cancels instead of dominating every output.
template <typename T>
Matrix<T> centered_glorot(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, double gain = 1.0) {
  Matrix<T> w = glorot<T>(in, out, rng, gain);
  w.rowwise() -= w.colwise().mean();
  return w;
}

/// Variable-size row groups: group g covers entries [offsets[g], offsets[g+1]) of `index`
/// (and `weight`, when weighted).
struct RowGroups {
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<double> weight;

  std::size_t count() const noexcept { return offsets.size() - 1; }
  void add(std::span<const std::uint32_t> rows, std::span<const double> w = {}) {
    index.insert(index.end(), rows.begin(), rows.end());
    weight.insert(weight.end(), w.begin(), w.end());
    offsets.push_back(static_cast<std::uint32_t>(index.size()));
  }
};

/// cos/sin of the rotation angle for each (row, rotation pair).
template <typename T>
struct RotaryTable {
  Matrix<T> cos;
  Matrix<T> sin;
};

struct Var {
  int id = -1;
};

/// Reverse-mode tape over a fixed op set. Values must stay finite: any op producing NaN/Inf
/// raises NonFinite naming the op.
template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Var constant(Mat v) { return push(std::move(v), "constant", false); }

  Var param(Parameter<T>& p) {
    Var out = push(p.value, "param", true);
    nodes_[out.id].param = &p;
    return out;
  }

  /// A parameter as a trainable leaf, or as a plain constant when gradients are not wanted.
  Var weight(Parameter<T>& p, bool trainable) { return trainable ? param(p) : constant(p.value); }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient accumulated by `backward`; empty if the node received none.
  const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1, runs every recorded backward rule, and accumulates into the
  /// gradients of the parameters that were placed on this tape.
  void backward(Var loss) {
    const auto& l = nodes_.at(loss.id).value;
    if (l.rows() != 1 || l.cols() != 1) fail(ErrorCode::NonScalarOutput, "backward needs a 1x1 output");
    g(loss.id) = Mat::Constant(1, 1, T(1));
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param) {
        if (!n.grad.allFinite()) fail(ErrorCode::NonFinite, "gradient of '" + n.param->name + "' is not finite");
        n.param->grad += n.grad;
      }
    }
  }

  // -- linear algebra ------------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto &A = value(a), &B = value(b);
    if (A.cols() != B.rows()) fail(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
    Mat y = A * B;
    return record(std::move(y), "matmul", {a, b}, [this, a, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id).noalias() += dy * value(b).transpose();
      if (needs(b)) g(b.id).noalias() += value(a).transpose() * dy;
    });
  }

  /// x W + b with W [in, out] and b [1, out].
  Var dense(Var x, Var w, Var b) {
    const auto &X = value(x), &W = value(w), &B = value(b);
    if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols())
      fail(ErrorCode::ShapeMismatch, "dense: input/weight/bias shapes disagree");
    Mat y = X * W;
    y.rowwise() += B.row(0);
    return record(std::move(y), "dense", {x, w, b}, [this, x, w, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(x)) g(x.id).noalias() += dy * value(w).transpose();
      if (needs(w)) g(w.id).noalias() += value(x).transpose() * dy;
      if (needs(b)) g(b.id) += dy.colwise().sum();
    });
  }

  // -- elementwise ---------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return record(value(a) + value(b), "add", {a, b}, [this, a, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id) += dy;
      if (needs(b)) g(b.id) += dy;
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return record(value(a) - value(b), "sub", {a, b}, [this, a, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id) += dy;
      if (needs(b)) g(b.id) -= dy;
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return record(value(a).cwiseProduct(value(b)), "mul", {a, b}, [this, a, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id) += dy.cwiseProduct(value(b));
      if (needs(b)) g(b.id) += dy.cwiseProduct(value(a));
    });
  }

  /// Adds the single row `r` to every row of `a`.
  Var add_row(Var a, Var r) {
    const auto &A = value(a), &R = value(r);
    if (R.rows() != 1 || R.cols() != A.cols()) fail(ErrorCode::ShapeMismatch, "add_row: row width differs");
    Mat y = A;
    y.rowwise() += R.row(0);
    return record(std::move(y), "add_row", {a, r}, [this, a, r](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id) += dy;
      if (needs(r)) g(r.id) += dy.colwise().sum();
    });
  }

  /// s * a + c elementwise.
  Var affine(Var a, T s, T c = T(0)) {
    Mat y = (value(a) * s).array() + c;
    return record(std::move(y), "affine", {a}, [this, a, s](int out) { g(a.id) += nodes_[out].grad * s; });
  }

  /// Sum of `terms` weighted by `coeffs` (all the same shape).
  Var linear_combination(std::span<const Var> terms, std::span<const T> coeffs) {
    if (terms.empty() || terms.size() != coeffs.size())
      fail(ErrorCode::ShapeMismatch, "linear_combination needs one coefficient per term");
    Mat y = Mat::Zero(value(terms[0]).rows(), value(terms[0]).cols());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      same_shape(terms[0], terms[i], "linear_combination");
      y += coeffs[i] * value(terms[i]);
    }
    std::vector<Var> ts(terms.begin(), terms.end());
    std::vector<T> cs(coeffs.begin(), coeffs.end());
    return record(std::move(y), "linear_combination", ts, [this, ts, cs](int out) {
      for (std::size_t i = 0; i < ts.size(); ++i)
        if (needs(ts[i])) g(ts[i].id) += cs[i] * nodes_[out].grad;
    });
  }

  /// elu(x) + 1: x + 1 for x >= 0, exp(x) otherwise. Strictly positive.
  Var elu_plus_one(Var a) {
    Mat y = value(a).unaryExpr([](T x) { return x >= T(0) ? x + T(1) : std::exp(x); });
    return record(std::move(y), "elu_plus_one", {a}, [this, a](int out) {
      const Mat &dy = nodes_[out].grad, &x = value(a), &yv = nodes_[out].value;
      Mat d = dy;
      for (Eigen::Index i = 0; i < d.size(); ++i)
        if (x.data()[i] < T(0)) d.data()[i] *= yv.data()[i];
      g(a.id) += d;
    });
  }

  Var sigmoid(Var a) {
    Mat y = value(a).unaryExpr([](T x) {
      if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
      const T e = std::exp(x);
      return e / (T(1) + e);
    });
    return record(std::move(y), "sigmoid", {a}, [this, a](int out) {
      const Mat& yv = nodes_[out].value;
      g(a.id) += nodes_[out].grad.cwiseProduct(yv.cwiseProduct((T(1) - yv.array()).matrix()));
    });
  }

  Var relu(Var a) {
    Mat y = value(a).cwiseMax(T(0));
    return record(std::move(y), "relu", {a}, [this, a](int out) {
      g(a.id) += nodes_[out].grad.cwiseProduct(
          value(a).unaryExpr([](T x) { return x > T(0) ? T(1) : T(0); }));
    });
  }

  /// Each row divided by (its L2 norm + 1e-12).
  Var l2_normalize_rows(Var a) {
    const Mat& x = value(a);
    Eigen::Matrix<T, Eigen::Dynamic, 1> n = x.rowwise().norm();
    Mat y = x;
    for (Eigen::Index i = 0; i < y.rows(); ++i) y.row(i) /= n(i) + T(1e-12);
    return record(std::move(y), "l2_normalize_rows", {a}, [this, a, n](int out) {
      const Mat &dy = nodes_[out].grad, &xv = value(a);
      Mat& dx = g(a.id);
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const T d = n(i) + T(1e-12);
        dx.row(i) += dy.row(i) / d;
        if (n(i) > T(0)) dx.row(i) -= xv.row(i) * (xv.row(i).dot(dy.row(i)) / (n(i) * d * d));
      }
    });
  }

  // -- structure -----------------------------------------------------------

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat of nothing");
    const auto rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) fail(ErrorCode::ShapeMismatch, "concat_cols: row counts differ");
      cols += value(p).cols();
    }
    Mat y(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      y.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return record(std::move(y), "concat_cols", ps, [this, ps](int out) {
      Eigen::Index c0 = 0;
      for (Var p : ps) {
        const auto w = value(p).cols();
        if (needs(p)) g(p.id) += nodes_[out].grad.middleCols(c0, w);
        c0 += w;
      }
    });
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > value(a).cols())
      fail(ErrorCode::ShapeMismatch, "slice_cols out of range");
    Mat y = value(a).middleCols(start, count);
    return record(std::move(y), "slice_cols", {a}, [this, a, start, count](int out) {
      g(a.id).middleCols(start, count) += nodes_[out].grad;
    });
  }

  /// y[i] = a[rows[i]].
  Var gather_rows(Var a, std::vector<std::uint32_t> rows) {
    const Mat& A = value(a);
    Mat y(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= A.rows()) fail(ErrorCode::ShapeMismatch, "gather_rows index out of range");
      y.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    return record(std::move(y), "gather_rows", {a}, [this, a, rows = std::move(rows)](int out) {
      const Mat& dy = nodes_[out].grad;
      Mat& da = g(a.id);
      for (std::size_t i = 0; i < rows.size(); ++i) da.row(rows[i]) += dy.row(static_cast<Eigen::Index>(i));
    });
  }

  /// y[g] = sum over the group's rows of weight * a[row].
  Var weighted_rows(Var a, RowGroups groups) {
    const Mat& A = value(a);
    if (groups.weight.size() != groups.index.size()) fail(ErrorCode::ShapeMismatch, "weighted_rows needs weights");
    Mat y = Mat::Zero(static_cast<Eigen::Index>(groups.count()), A.cols());
    for (std::size_t gi = 0; gi < groups.count(); ++gi)
      for (auto k = groups.offsets[gi]; k < groups.offsets[gi + 1]; ++k) {
        if (groups.index[k] >= A.rows()) fail(ErrorCode::ShapeMismatch, "weighted_rows index out of range");
        y.row(static_cast<Eigen::Index>(gi)) += static_cast<T>(groups.weight[k]) * A.row(groups.index[k]);
      }
    return record(std::move(y), "weighted_rows", {a}, [this, a, groups = std::move(groups)](int out) {
      const Mat& dy = nodes_[out].grad;
      Mat& da = g(a.id);
      for (std::size_t gi = 0; gi < groups.count(); ++gi)
        for (auto k = groups.offsets[gi]; k < groups.offsets[gi + 1]; ++k)
          da.row(groups.index[k]) += static_cast<T>(groups.weight[k]) * dy.row(static_cast<Eigen::Index>(gi));
    });
  }

  /// y[g] = elementwise max over the group's rows (the first maximal row receives the gradient).
  Var max_rows(Var a, RowGroups groups) {
    const Mat& A = value(a);
    const auto G = static_cast<Eigen::Index>(groups.count());
    Mat y(G, A.cols());
    std::vector<std::uint32_t> arg(static_cast<std::size_t>(G * A.cols()));
    for (Eigen::Index gi = 0; gi < G; ++gi) {
      const auto lo = groups.offsets[gi], hi = groups.offsets[gi + 1];
      if (lo == hi) fail(ErrorCode::EmptyPatch, "max over an empty group");
      for (Eigen::Index c = 0; c < A.cols(); ++c) {
        std::uint32_t best = groups.index[lo];
        for (auto k = lo + 1; k < hi; ++k)
          if (A(groups.index[k], c) > A(best, c)) best = groups.index[k];
        y(gi, c) = A(best, c);
        arg[static_cast<std::size_t>(gi * A.cols() + c)] = best;
      }
    }
    const auto cols = A.cols();
    return record(std::move(y), "max_rows", {a}, [this, a, arg = std::move(arg), cols](int out) {
      const Mat& dy = nodes_[out].grad;
      Mat& da = g(a.id);
      for (Eigen::Index gi = 0; gi < dy.rows(); ++gi)
        for (Eigen::Index c = 0; c < cols; ++c) da(arg[static_cast<std::size_t>(gi * cols + c)], c) += dy(gi, c);
    });
  }

  /// Per-row dot product, [N, 1].
  Var rowdot(Var a, Var b) {
    same_shape(a, b, "rowdot");
    Mat y = value(a).cwiseProduct(value(b)).rowwise().sum();
    return record(std::move(y), "rowdot", {a, b}, [this, a, b](int out) {
      const Mat& dy = nodes_[out].grad;
      if (needs(a)) g(a.id).array() += value(b).array().colwise() * dy.col(0).array();
      if (needs(b)) g(b.id).array() += value(a).array().colwise() * dy.col(0).array();
    });
  }

  Var sum(Var a) {
    Mat y = Mat::Constant(1, 1, value(a).sum());
    return record(std::move(y), "sum", {a}, [this, a](int out) { g(a.id).array() += nodes_[out].grad(0, 0); });
  }

  Var mean(Var a) {
    const T n = static_cast<T>(std::max<Eigen::Index>(1, value(a).size()));
    return affine(sum(a), T(1) / n);
  }

  // -- fused kernels -------------------------------------------------------

  /// Kernelized linear attention with rotary position encoding, per head:
  ///   out_i = sum_n <R_i q_i, R_n k_n> v_n / (sum_n <q_i, k_n> + eps)
  /// where q, k are already non-negative feature maps and R are the row rotations.
  Var rope_linear_attention(Var q, Var k, Var v, const RotaryTable<T>& qrot, const RotaryTable<T>& krot, int heads,
                            T eps = T(1e-6)) {
    const Mat &Q = value(q), &K = value(k), &V = value(v);
    const Eigen::Index d = Q.cols();
    if (K.cols() != d || V.cols() != d || V.rows() != K.rows() || K.rows() == 0)
      fail(ErrorCode::ShapeMismatch, "attention: q/k/v shapes disagree");
    if (heads <= 0 || d % (2 * heads) != 0) fail(ErrorCode::ShapeMismatch, "attention: head split must keep pairs");
    if (qrot.cos.rows() != Q.rows() || krot.cos.rows() != K.rows() || qrot.cos.cols() * 2 != d ||
        krot.cos.cols() * 2 != d)
      fail(ErrorCode::ShapeMismatch, "attention: rotary table shape");
    const Eigen::Index hd = d / heads;
    Mat Qr = rotate(Q, qrot, false), Kr = rotate(K, krot, false);
    Mat y(Q.rows(), d);
    Mat den(Q.rows(), heads);
    std::vector<Mat> kv(static_cast<std::size_t>(heads));
    Mat ks(heads, hd);
    for (int h = 0; h < heads; ++h) {
      const auto c0 = h * hd;
      kv[h].noalias() = Kr.middleCols(c0, hd).transpose() * V.middleCols(c0, hd);
      ks.row(h) = K.middleCols(c0, hd).colwise().sum();
      den.col(h) = (Q.middleCols(c0, hd) * ks.row(h).transpose()).array() + eps;
      y.middleCols(c0, hd).noalias() = Qr.middleCols(c0, hd) * kv[h];
      y.middleCols(c0, hd).array().colwise() /= den.col(h).array();
    }
    if (!den.allFinite() || (den.array() <= T(0)).any())
      fail(ErrorCode::NonFinite, "attention denominator is not positive");
    return record(std::move(y), "rope_linear_attention", {q, k, v},
                  [this, q, k, v, qrot, krot, heads, hd, Qr = std::move(Qr), Kr = std::move(Kr),
                   den = std::move(den), kv = std::move(kv), ks = std::move(ks)](int out) {
                    const Mat &G = nodes_[out].grad, &Y = nodes_[out].value;
                    const Mat &Q = value(q), &V = value(v);
                    Mat dQr(Q.rows(), Q.cols()), dQ = Mat::Zero(Q.rows(), Q.cols());
                    Mat dKr(V.rows(), V.cols()), dK = Mat::Zero(V.rows(), V.cols()), dV(V.rows(), V.cols());
                    for (int h = 0; h < heads; ++h) {
                      const auto c0 = h * hd;
                      Mat dnum = G.middleCols(c0, hd);
                      dnum.array().colwise() /= den.col(h).array();
                      // d den_i = -(G_i . out_i) / den_i
                      Eigen::Matrix<T, Eigen::Dynamic, 1> dden =
                          -(G.middleCols(c0, hd).cwiseProduct(Y.middleCols(c0, hd)).rowwise().sum().array() /
                            den.col(h).array())
                               .matrix();
                      dQr.middleCols(c0, hd).noalias() = dnum * kv[h].transpose();
                      dQ.middleCols(c0, hd).noalias() += dden * ks.row(h);
                      Mat dkv = Qr.middleCols(c0, hd).transpose() * dnum;
                      Eigen::Matrix<T, 1, Eigen::Dynamic> dks = dden.transpose() * Q.middleCols(c0, hd);
                      dKr.middleCols(c0, hd).noalias() = V.middleCols(c0, hd) * dkv.transpose();
                      dV.middleCols(c0, hd).noalias() = Kr.middleCols(c0, hd) * dkv;
                      dK.middleCols(c0, hd).rowwise() += dks;
                    }
                    if (needs(q)) g(q.id) += dQ + rotate(dQr, qrot, true);
                    if (needs(k)) g(k.id) += dK + rotate(dKr, krot, true);
                    if (needs(v)) g(v.id) += dV;
                  });
  }

  /// Mean over rows of the row-wise L1 distance to a constant target.
  Var l1_loss(Var pred, const Mat& target) {
    const Mat& P = value(pred);
    if (P.rows() != target.rows() || P.cols() != target.cols())
      fail(ErrorCode::ShapeMismatch, "l1_loss: prediction and target shapes differ");
    const T n = static_cast<T>(std::max<Eigen::Index>(1, P.rows()));
    Mat y = Mat::Constant(1, 1, (P - target).cwiseAbs().sum() / n);
    return record(std::move(y), "l1_loss", {pred}, [this, pred, target, n](int out) {
      const T s = nodes_[out].grad(0, 0) / n;
      Mat d = (value(pred) - target).unaryExpr([](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
      g(pred.id) += s * d;
    });
  }

  /// -mean over rows with nonzero target of (1 + cos(pred, target)) / 2, where
  /// cos = p.t / (|p| |t| + eps). Zero when no target row is nonzero.
  Var cosine_loss(Var pred, const Mat& target, T eps = T(1e-6)) {
    const Mat& P = value(pred);
    if (P.rows() != target.rows() || P.cols() != target.cols())
      fail(ErrorCode::ShapeMismatch, "cosine_loss: prediction and target shapes differ");
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < target.rows(); ++i)
      if (target.row(i).squaredNorm() > T(0)) rows.push_back(i);
    T acc = T(0);
    for (auto i : rows) {
      const T c = P.row(i).dot(target.row(i)) / (P.row(i).norm() * target.row(i).norm() + eps);
      acc += T(0.5) * (T(1) + c);
    }
    const T m = static_cast<T>(rows.size());
    Mat y = Mat::Constant(1, 1, rows.empty() ? T(0) : -acc / m);
    return record(std::move(y), "cosine_loss", {pred}, [this, pred, target, eps, rows = std::move(rows), m](int out) {
      if (rows.empty()) return;
      const Mat& P = value(pred);
      Mat& dp = g(pred.id);
      const T s = -nodes_[out].grad(0, 0) / (T(2) * m);
      for (auto i : rows) {
        const T pn = P.row(i).norm(), tn = target.row(i).norm();
        const T D = pn * tn + eps, dot = P.row(i).dot(target.row(i));
        dp.row(i) += s * target.row(i) / D;
        if (pn > T(0)) dp.row(i) -= s * (dot * tn / (pn * D * D)) * P.row(i);
      }
    });
  }

  /// Mean binary cross-entropy of probabilities (clamped to [1e-7, 1 - 1e-7]) against 0/1 targets.
  Var bce_loss(Var prob, const Mat& target) {
    const Mat& P = value(prob);
    if (P.rows() != target.rows() || P.cols() != target.cols())
      fail(ErrorCode::ShapeMismatch, "bce_loss: prediction and target shapes differ");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    const T n = static_cast<T>(std::max<Eigen::Index>(1, P.size()));
    T acc = T(0);
    for (Eigen::Index i = 0; i < P.size(); ++i) {
      const T p = std::clamp(P.data()[i], lo, hi), t = target.data()[i];
      acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
    }
    Mat y = Mat::Constant(1, 1, acc / n);
    return record(std::move(y), "bce_loss", {prob}, [this, prob, target, lo, hi, n](int out) {
      const Mat& P = value(prob);
      Mat& dp = g(prob.id);
      const T s = nodes_[out].grad(0, 0) / n;
      for (Eigen::Index i = 0; i < P.size(); ++i) {
        const T p = P.data()[i], t = target.data()[i];
        if (p < lo || p > hi) continue;
        dp.data()[i] += s * (-t / p + (T(1) - t) / (T(1) - p));
      }
    });
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Mat& g(int id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      fail(ErrorCode::ShapeMismatch, std::string(op) + ": operand shapes differ");
  }

  Var push(Mat value, const char* op, bool needs_grad) {
    // x * 0 is 0 for finite x and NaN otherwise, so the sum is 0 exactly when every entry is finite.
    if (!((value.array() * T(0)).sum() == T(0))) fail(ErrorCode::NonFinite, std::string(op) + " produced a non-finite value");
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, nullptr, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  Var record(Mat value, const char* op, std::initializer_list<Var> inputs, F&& back) {
    return record(std::move(value), op, std::vector<Var>(inputs), std::forward<F>(back));
  }

  template <typename F>
  Var record(Mat value, const char* op, const std::vector<Var>& inputs, F&& back) {
    bool ng = false;
    for (Var in : inputs) ng = ng || needs(in);
    Var out = push(std::move(value), op, ng);
    if (ng) nodes_[out.id].back = [fn = std::forward<F>(back), id = out.id]() { fn(id); };
    return out;
  }

  /// Applies (or, with `transpose`, undoes) the per-row pair rotations.
  static Mat rotate(const Mat& x, const RotaryTable<T>& rot, bool transpose) {
    Mat y(x.rows(), x.cols());
    const Eigen::Index pairs = x.cols() / 2;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index p = 0; p < pairs; ++p) {
        const T c = rot.cos(i, p), s = transpose ? -rot.sin(i, p) : rot.sin(i, p);
        const T a = x(i, 2 * p), b = x(i, 2 * p + 1);
        y(i, 2 * p) = a * c - b * s;
        y(i, 2 * p + 1) = a * s + b * c;
      }
    return y;
  }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
};

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      state.v.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }
  if (state.m.size() != params.size()) fail(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
  ++state.step;
  const auto& c = state.config;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(state.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(c.lr), eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() || state.m[i].rows() != p.value.rows() ||
        state.m[i].cols() != p.value.cols())
      fail(ErrorCode::ShapeMismatch, "gradient shape differs for '" + p.name + "'");
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto gr = p.grad.array();
    m = b1 * m + (T(1) - b1) * gr;
    v = b2 * v + (T(1) - b2) * gr * gr;
    p.value.array() -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Gradient check

/// Central-difference check of d(program)/d(params). Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, floor) over all parameter entries.
/// The floor, 1e-6 * max(1, |f|), sits above the rounding noise of the difference quotient
/// (a few ulps of f over eps), so near-zero entries are judged by absolute error instead.
template <typename F>
double grad_check(ParameterSet<double>& params, F&& program, double eps = 1e-5) {
  auto evaluate = [&]() {
    Tape<double> tape;
    Var out = program(tape);
    const auto& v = tape.value(out);
    if (v.rows() != 1 || v.cols() != 1) fail(ErrorCode::NonScalarOutput, "grad_check needs a scalar program");
    return v(0, 0);
  };
  params.zero_grad();
  double noise_floor = 0.0;
  {
    Tape<double> tape;
    Var out = program(tape);
    noise_floor = 1e-6 * std::max(1.0, std::abs(tape.value(out)(0, 0)));
    tape.backward(out);
  }
  double worst = 0.0;
  for (auto& p : params)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double keep = x;
      x = keep + eps;
      const double fp = evaluate();
      x = keep - eps;
      const double fm = evaluate();
      x = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = p.grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), noise_floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PADCKPT\0", u32 version, u32 metadata length, metadata JSON, u32 parameter
// count, then per parameter: u32 name length, name, u32 rank, u64 dims, float32 LE values.

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put(std::ostream& out, U v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U take(std::istream& in, const std::string& what) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) fail(ErrorCode::CorruptFile, "truncated " + what);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  const std::string m = meta.dump();
  detail::put(out, static_cast<std::uint32_t>(m.size()));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  detail::put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put(out, std::uint32_t{2});
    detail::put(out, static_cast<std::uint64_t>(p.value.rows()));
    detail::put(out, static_cast<std::uint64_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) detail::put(out, static_cast<float>(p.value.data()[i]));
  }
  if (!out) fail(ErrorCode::IoError, "failed writing '" + path.string() + "'");
}

/// Loads every stored tensor into the same-named parameter of `params` and returns the metadata.
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    fail(ErrorCode::CorruptFile, "'" + path.string() + "' is not a checkpoint");
  const auto version = detail::take<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + " is not supported");
  const auto mlen = detail::take<std::uint32_t>(in, "metadata length");
  if (mlen > (1u << 24)) fail(ErrorCode::CorruptFile, "implausible metadata length");
  std::string m(mlen, '\0');
  if (!in.read(m.data(), mlen)) fail(ErrorCode::CorruptFile, "truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("bad checkpoint metadata: ") + e.what());
  }
  const auto count = detail::take<std::uint32_t>(in, "parameter count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = detail::take<std::uint32_t>(in, "name length");
    if (nlen > 4096) fail(ErrorCode::CorruptFile, "implausible parameter name length");
    std::string name(nlen, '\0');
    if (!in.read(name.data(), nlen)) fail(ErrorCode::CorruptFile, "truncated parameter name");
    const auto rank = detail::take<std::uint32_t>(in, "rank");
    if (rank != 2) fail(ErrorCode::CorruptFile, "parameter '" + name + "' is not 2-D");
    const auto rows = detail::take<std::uint64_t>(in, "shape");
    const auto cols = detail::take<std::uint64_t>(in, "shape");
    if (!params.contains(name)) fail(ErrorCode::ShapeMismatch, "checkpoint parameter '" + name + "' is not in the model");
    auto& p = params.get(name);
    if (static_cast<std::uint64_t>(p.value.rows()) != rows || static_cast<std::uint64_t>(p.value.cols()) != cols)
      fail(ErrorCode::ShapeMismatch, "parameter '" + name + "' has shape " + std::to_string(rows) + "x" +
                                         std::to_string(cols) + " in the checkpoint");
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(detail::take<float>(in, name));
  }
  return meta;
}

}  // namespace patchad
