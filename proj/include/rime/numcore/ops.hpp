#pragma once

// Differentiable operations on Tensor. Everything is two-dimensional: rows are
// points (or tasks), columns are features. Broadcasting is limited to adding a
// 1 x d row to every row of an n x d matrix.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rime/numcore/tensor.hpp"

namespace rime::ops {

namespace detail_ops {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Vectorised elementwise kernels. Eigen's tanh and log1p run scalar code
// for doubles; these forms go through its SIMD exp and log instead.

inline Matrix tanh_of(const Matrix& a) {
  const Matrix t = (-2.0 * a.array().abs()).exp().matrix();
  return (((1.0 - t.array()) / (1.0 + t.array())) * a.array().sign()).matrix();
}

inline Matrix sigmoid_of(const Matrix& a) { return (1.0 / (1.0 + (-a.array()).exp())).matrix(); }

/// log(1 + exp(a)) = max(a, 0) + log1p(exp(-|a|)); log1p(e) is replaced by
/// e where e is too small for 1 + e to carry it.
inline Matrix softplus_of(const Matrix& a) {
  const Matrix e = (-a.array().abs()).exp().matrix();
  return (a.array().max(0.0) + (e.array() < 1e-10).select(e.array(), (1.0 + e.array()).log())).matrix();
}

}  // namespace detail_ops

using detail_ops::sigmoid;
using detail_ops::softplus;

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [a, b](detail::Node& out) {
    a.node()->accumulate(out.grad);
    b.node()->accumulate(out.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [a, b](detail::Node& out) {
    a.node()->accumulate(out.grad);
    b.node()->accumulate(-out.grad);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail_ops::require_same_shape(a, b, "mul");
  Matrix v = a.value().cwiseProduct(b.value());
  return make_op(std::move(v), {a, b}, [a, b](detail::Node& out) {
    a.node()->accumulate(out.grad.cwiseProduct(b.value()));
    b.node()->accumulate(out.grad.cwiseProduct(a.value()));
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return make_op(a.value() * s, {a}, [a, s](detail::Node& out) { a.node()->accumulate(out.grad * s); });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  Matrix v = a.value().array() + s;
  return make_op(std::move(v), {a}, [a](detail::Node& out) { a.node()->accumulate(out.grad); });
}

/// a (n x d) + row (1 x d) added to every row.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ConfigError("add_row: row must be 1 x " + std::to_string(a.cols()));
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(v), {a, row}, [a, row](detail::Node& out) {
    a.node()->accumulate(out.grad);
    row.node()->accumulate(out.grad.colwise().sum());
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  }
  Matrix v = a.value() * b.value();
  return make_op(std::move(v), {a, b}, [a, b](detail::Node& out) {
    if (a.requires_grad()) a.node()->accumulate(out.grad * b.value().transpose());
    if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * out.grad);
  });
}

/// x W + b, with W of shape (in x out) and b of shape (1 x out).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.cols() != weight.rows()) {
    throw ConfigError("linear: input has " + std::to_string(x.cols()) + " features, layer expects " +
                      std::to_string(weight.rows()));
  }
  Matrix v = x.value() * weight.value();
  v.rowwise() += bias.value().row(0);
  return make_op(std::move(v), {x, weight, bias}, [x, weight, bias](detail::Node& out) {
    if (x.requires_grad()) x.node()->accumulate(out.grad * weight.value().transpose());
    if (weight.requires_grad()) weight.node()->accumulate(x.value().transpose() * out.grad);
    bias.node()->accumulate(out.grad.colwise().sum());
  });
}

inline Tensor tanh(const Tensor& a) {
  Matrix v = detail_ops::tanh_of(a.value());
  return make_op(v, {a}, [a, v](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * (1.0 - v.array().square())).matrix());
  });
}

inline Tensor relu(const Tensor& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return make_op(std::move(v), {a}, [a](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * (a.value().array() > 0.0).cast<double>()).matrix());
  });
}

inline Tensor softplus(const Tensor& a) {
  Matrix v = detail_ops::softplus_of(a.value());
  return make_op(std::move(v), {a}, [a](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * detail_ops::sigmoid_of(a.value()).array()).matrix());
  });
}

inline Tensor sigmoid(const Tensor& a) {
  Matrix v = detail_ops::sigmoid_of(a.value());
  return make_op(v, {a}, [a, v](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * v.array() * (1.0 - v.array())).matrix());
  });
}

inline Tensor exp(const Tensor& a) {
  Matrix v = a.value().array().exp();
  return make_op(v, {a}, [a, v](detail::Node& out) { a.node()->accumulate(out.grad.cwiseProduct(v)); });
}

inline Tensor log(const Tensor& a) {
  Matrix v = a.value().array().log();
  return make_op(std::move(v), {a}, [a](detail::Node& out) {
    a.node()->accumulate((out.grad.array() / a.value().array()).matrix());
  });
}

inline Tensor sqrt(const Tensor& a) {
  Matrix v = a.value().array().sqrt();
  return make_op(v, {a}, [a, v](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * 0.5 / v.array()).matrix());
  });
}

inline Tensor square(const Tensor& a) {
  Matrix v = a.value().array().square();
  return make_op(std::move(v), {a}, [a](detail::Node& out) {
    a.node()->accumulate((out.grad.array() * 2.0 * a.value().array()).matrix());
  });
}

/// Elementwise clamp; the gradient is zero where the input was clipped.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return make_op(std::move(v), {a}, [a, lo, hi](detail::Node& out) {
    a.node()->accumulate(
        (out.grad.array() * ((a.value().array() >= lo) && (a.value().array() <= hi)).cast<double>()).matrix());
  });
}

inline Tensor sum(const Tensor& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](detail::Node& out) {
    a.node()->accumulate(Matrix::Constant(a.rows(), a.cols(), out.grad(0, 0)));
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  return scale(sum(a), 1.0 / n);
}

/// Row-wise sum over columns: (n x d) -> (n x 1).
inline Tensor row_sum(const Tensor& a) {
  Matrix v = a.value().rowwise().sum();
  return make_op(std::move(v), {a}, [a](detail::Node& out) {
    a.node()->accumulate(out.grad.col(0).replicate(1, a.cols()));
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: nothing to concatenate");
  const Index n = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ConfigError("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix v(n, total);
  Index offset = 0;
  for (const auto& p : parts) {
    v.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return make_op(std::move(v), parts, [parts](detail::Node& out) {
    Index off = 0;
    for (const auto& p : parts) {
      p.node()->accumulate(out.grad.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ConfigError("slice_cols: out of range");
  Matrix v = a.value().middleCols(start, count);
  return make_op(std::move(v), {a}, [a, start, count](detail::Node& out) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    a.node()->grad.middleCols(start, count) += out.grad;
  });
}

/// out[i] = a[index[i]]; the backward pass scatter-adds.
inline Tensor gather_rows(const Tensor& a, std::span<const Index> index) {
  Matrix v(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) v.row(static_cast<Index>(i)) = a.value().row(index[i]);
  std::vector<Index> idx(index.begin(), index.end());
  return make_op(std::move(v), {a}, [a, idx = std::move(idx)](detail::Node& out) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) a.node()->grad.row(idx[i]) += out.grad.row(static_cast<Index>(i));
  });
}

/// Weighted per-segment reduction of the rows of `a`.
///   out[s] = sum_{i: seg[i]=s} w[i] a[i]            (normalize = false)
///   out[s] = that sum / sum_{i: seg[i]=s} w[i]      (normalize = true; zero row when the weights sum to 0)
inline Tensor segment_reduce(const Tensor& a, std::span<const Index> segment, std::span<const double> weight,
                             Index segments, bool normalize) {
  if (static_cast<Index>(segment.size()) != a.rows() || weight.size() != segment.size()) {
    throw ConfigError("segment_reduce: segment/weight length must equal the row count");
  }
  std::vector<double> total(static_cast<std::size_t>(segments), 0.0);
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] < 0 || segment[i] >= segments) throw ConfigError("segment_reduce: segment id out of range");
    total[static_cast<std::size_t>(segment[i])] += weight[i];
  }
  std::vector<double> coef(segment.size());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const double t = total[static_cast<std::size_t>(segment[i])];
    coef[i] = normalize ? (t > 0.0 ? weight[i] / t : 0.0) : weight[i];
  }
  Matrix v = Matrix::Zero(segments, a.cols());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (coef[i] != 0.0) v.row(segment[i]) += coef[i] * a.value().row(static_cast<Index>(i));
  }
  std::vector<Index> seg(segment.begin(), segment.end());
  return make_op(std::move(v), {a}, [a, seg = std::move(seg), coef = std::move(coef)](detail::Node& out) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    for (std::size_t i = 0; i < seg.size(); ++i) {
      if (coef[i] != 0.0) a.node()->grad.row(static_cast<Index>(i)) += coef[i] * out.grad.row(seg[i]);
    }
  });
}

/// Elementwise negative log-density of `target` under N(mean, var).
inline Tensor gaussian_nll(const Matrix& target, const Tensor& mean, const Tensor& var) {
  detail_ops::require_same_shape(mean, var, "gaussian_nll");
  if (target.rows() != mean.rows() || target.cols() != mean.cols()) throw ConfigError("gaussian_nll: target shape mismatch");
  constexpr double log_two_pi = 1.8378770664093453;
  const auto diff = (target - mean.value()).array();
  Matrix v = 0.5 * (log_two_pi + var.value().array().log() + diff.square() / var.value().array());
  return make_op(std::move(v), {mean, var}, [target, mean, var](detail::Node& out) {
    const auto d = (mean.value() - target).array();
    const auto s = var.value().array();
    if (mean.requires_grad()) mean.node()->accumulate((out.grad.array() * d / s).matrix());
    if (var.requires_grad()) var.node()->accumulate((out.grad.array() * (0.5 / s - 0.5 * d.square() / s.square())).matrix());
  });
}

/// Row-wise KL( N(qm, qv) || N(pm, pv) ) for diagonal Gaussians: (n x d) -> (n x 1).
inline Tensor kl_diag(const Tensor& qm, const Tensor& qv, const Tensor& pm, const Tensor& pv) {
  detail_ops::require_same_shape(qm, qv, "kl_diag");
  detail_ops::require_same_shape(qm, pm, "kl_diag");
  detail_ops::require_same_shape(qm, pv, "kl_diag");
  const auto dm = (qm.value() - pm.value()).array();
  const auto a = qv.value().array();
  const auto b = pv.value().array();
  Matrix elems = 0.5 * ((b / a).log() + (a + dm.square()) / b - 1.0);
  Matrix v = elems.rowwise().sum();
  return make_op(std::move(v), {qm, qv, pm, pv}, [qm, qv, pm, pv](detail::Node& out) {
    const auto d = (qm.value() - pm.value()).array();
    const auto qa = qv.value().array();
    const auto pb = pv.value().array();
    const Matrix g = out.grad.col(0).replicate(1, qm.cols());
    const auto ga = g.array();
    if (qm.requires_grad()) qm.node()->accumulate((ga * d / pb).matrix());
    if (pm.requires_grad()) pm.node()->accumulate((-ga * d / pb).matrix());
    if (qv.requires_grad()) qv.node()->accumulate((ga * 0.5 * (1.0 / pb - 1.0 / qa)).matrix());
    if (pv.requires_grad()) pv.node()->accumulate((ga * 0.5 * (1.0 / pb - (qa + d.square()) / pb.square())).matrix());
  });
}

/// Elementwise logistic loss on logits: softplus(l) - label * l.
inline Tensor bce_with_logits(const Tensor& logits, const Matrix& labels) {
  if (labels.rows() != logits.rows() || labels.cols() != logits.cols()) throw ConfigError("bce_with_logits: label shape mismatch");
  Matrix v = detail_ops::softplus_of(logits.value()) - labels.cwiseProduct(logits.value());
  return make_op(std::move(v), {logits}, [logits, labels](detail::Node& out) {
    const Matrix s = detail_ops::sigmoid_of(logits.value());
    logits.node()->accumulate((out.grad.array() * (s - labels).array()).matrix());
  });
}

}  // namespace rime::ops
