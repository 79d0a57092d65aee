// Fitting kernels shared by every estimator: weighted least squares,
// weighted binary logistic regression and baseline-category multinomial
// logistic regression. All kernels are templated on the scalar type and
// are pure functions of their inputs.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmar::glm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when X'WX is singular; carries the columns the pivoted QR could not
/// resolve.
class RankDeficientError : public FitError {
 public:
  RankDeficientError(const std::string& what, std::vector<std::string> cols)
      : FitError(what), columns(std::move(cols)) {}
  std::vector<std::string> columns;
};

/// Named dense design matrix. Column 0 is conventionally "(intercept)".
template <typename Scalar>
struct DesignMatrix {
  std::vector<std::string> names;
  Matrix<Scalar> values;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  void validate() const {
    if (static_cast<Eigen::Index>(names.size()) != values.cols())
      throw FitError("design matrix: column name count does not match column count");
    std::set<std::string> seen;
    for (const auto& n : names)
      if (!seen.insert(n).second) throw FitError("design matrix: duplicate column name '" + n + "'");
    if (!values.allFinite()) throw FitError("design matrix: non-finite entry");
  }
};

enum class FitKind { wls, logistic, multinomial };

template <typename Scalar>
struct FitResult {
  FitKind kind = FitKind::wls;
  std::vector<std::string> names;
  // p x 1 for wls/logistic, p x (K-1) for multinomial (reference category 0).
  Matrix<Scalar> coefficients;
  // Covariance of vec(coefficients): sigma^2 (X'WX)^-1 for wls, inverse
  // information for the likelihood fits.
  Matrix<Scalar> covariance;
  bool converged = false;
  int iterations = 0;
  // Weighted residual sum of squares (wls) or log-likelihood.
  Scalar objective = 0;
  Scalar gradient_norm = 0;
  bool separated = false;

  Vector<Scalar> coef() const { return coefficients.col(0); }
  int categories() const {
    return kind == FitKind::multinomial ? static_cast<int>(coefficients.cols()) + 1 : 2;
  }
};

struct WlsOptions {
  bool ridge_fallback = false;
  double ridge = 1e-8;
};

struct LogisticOptions {
  double tolerance = 1e-8;  // max absolute coefficient change
  int max_iterations = 100;
  double separation_bound = 30.0;
};

struct MultinomialOptions {
  double tolerance = 1e-8;  // max-norm of the per-unit-weight score
  int max_iterations = 200;
};

namespace detail {

template <typename Scalar>
Vector<Scalar> unit_or(const Vector<Scalar>& w, Eigen::Index n) {
  if (w.size() == 0) return Vector<Scalar>::Ones(n);
  if (w.size() != n) throw FitError("weight vector length does not match row count");
  return w;
}

template <typename Scalar>
void check_weights(const Vector<Scalar>& w) {
  if (!w.allFinite() || (w.array() < 0).any()) throw FitError("weights must be finite and nonnegative");
  if (!(w.array() > 0).any()) throw FitError("at least one weight must be positive");
}

// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > 0 ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= 0) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

// Row-wise softmax with an implicit zero linear predictor for category 0.
template <typename Scalar>
Matrix<Scalar> softmax_with_reference(const Matrix<Scalar>& eta) {
  const Eigen::Index n = eta.rows(), k = eta.cols() + 1;
  Matrix<Scalar> p(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar m = 0;
    for (Eigen::Index j = 0; j < eta.cols(); ++j) m = std::max(m, eta(i, j));
    p(i, 0) = std::exp(-m);
    for (Eigen::Index j = 0; j < eta.cols(); ++j) p(i, j + 1) = std::exp(eta(i, j) - m);
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename Scalar>
Matrix<Scalar> symmetric_inverse(const Matrix<Scalar>& a) {
  Eigen::LDLT<Matrix<Scalar>> ldlt(a);
  if (ldlt.info() != Eigen::Success) return Matrix<Scalar>::Constant(a.rows(), a.cols(), std::numeric_limits<Scalar>::quiet_NaN());
  Matrix<Scalar> inv = ldlt.solve(Matrix<Scalar>::Identity(a.rows(), a.cols()));
  return (inv + inv.transpose()) / Scalar(2);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Weighted least squares
// ---------------------------------------------------------------------------

/// Solves the weighted normal equations through a column-pivoted QR of
/// sqrt(W) X. Rows with zero weight do not enter the factorization.
template <typename Scalar>
FitResult<Scalar> fit_wls(const DesignMatrix<Scalar>& X, const Vector<Scalar>& y,
                          const Vector<Scalar>& weights = {}, const WlsOptions& opt = {}) {
  X.validate();
  const Eigen::Index n = X.rows(), p = X.cols();
  if (y.size() != n) throw FitError("fit_wls: response length does not match row count");
  if (!y.allFinite()) throw FitError("fit_wls: non-finite response");
  const Vector<Scalar> w = detail::unit_or(weights, n);
  detail::check_weights(w);

  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    if (w(i) > 0) keep.push_back(i);
  const auto m = static_cast<Eigen::Index>(keep.size());
  Matrix<Scalar> sx(m, p);
  Vector<Scalar> sy(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Scalar s = std::sqrt(w(keep[r]));
    sx.row(r) = s * X.values.row(keep[r]);
    sy(r) = s * y(keep[r]);
  }

  FitResult<Scalar> out;
  out.kind = FitKind::wls;
  out.names = X.names;
  Eigen::ColPivHouseholderQR<Matrix<Scalar>> qr(sx);
  Vector<Scalar> beta;
  if (qr.rank() < p) {
    if (!opt.ridge_fallback) {
      std::vector<std::string> bad;
      for (Eigen::Index j = qr.rank(); j < p; ++j) bad.push_back(X.names[qr.colsPermutation().indices()(j)]);
      std::ostringstream msg;
      msg << "fit_wls: rank-deficient design (rank " << qr.rank() << " of " << p << "); unresolved columns:";
      for (const auto& b : bad) msg << ' ' << b;
      throw RankDeficientError(msg.str(), bad);
    }
    Matrix<Scalar> a = sx.transpose() * sx;
    a.diagonal().array() += Scalar(opt.ridge);
    beta = a.ldlt().solve(sx.transpose() * sy);
  } else {
    beta = qr.solve(sy);
  }
  const Vector<Scalar> resid = sy - sx * beta;
  out.coefficients = beta;
  out.objective = resid.squaredNorm();
  out.gradient_norm = (sx.transpose() * resid).cwiseAbs().maxCoeff();
  out.converged = true;
  out.iterations = 1;
  const Scalar dof = std::max<Scalar>(Scalar(1), Scalar(m - p));
  out.covariance = detail::symmetric_inverse<Scalar>(sx.transpose() * sx) * (out.objective / dof);
  return out;
}

// ---------------------------------------------------------------------------
// Binary logistic regression
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar logistic_loglik(const Matrix<Scalar>& X, const Vector<Scalar>& y, const Vector<Scalar>& w,
                       const Vector<Scalar>& beta) {
  const Vector<Scalar> eta = X * beta;
  Scalar ll = 0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += w(i) * (y(i) * eta(i) - detail::softplus(eta(i)));
  return ll;
}

template <typename Scalar>
Vector<Scalar> logistic_gradient(const Matrix<Scalar>& X, const Vector<Scalar>& y, const Vector<Scalar>& w,
                                 const Vector<Scalar>& beta) {
  const Vector<Scalar> eta = X * beta;
  Vector<Scalar> r(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) r(i) = w(i) * (y(i) - detail::sigmoid(eta(i)));
  return X.transpose() * r;
}

/// Weighted maximum likelihood by Newton-IRLS with step halving.
template <typename Scalar>
FitResult<Scalar> fit_logistic(const DesignMatrix<Scalar>& X, const Vector<Scalar>& y,
                               const Vector<Scalar>& weights = {}, const LogisticOptions& opt = {}) {
  X.validate();
  const Eigen::Index n = X.rows(), p = X.cols();
  if (y.size() != n) throw FitError("fit_logistic: response length does not match row count");
  const Vector<Scalar> w = detail::unit_or(weights, n);
  detail::check_weights(w);
  bool has0 = false, has1 = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y(i) != 0 && y(i) != 1) throw FitError("fit_logistic: response must be 0/1");
    if (w(i) > 0) (y(i) == 1 ? has1 : has0) = true;
  }
  if (!(has0 && has1)) throw FitError("fit_logistic: single-class response");

  const Matrix<Scalar>& x = X.values;
  Vector<Scalar> beta = Vector<Scalar>::Zero(p);
  Scalar ll = logistic_loglik<Scalar>(x, y, w, beta);
  FitResult<Scalar> out;
  out.kind = FitKind::logistic;
  out.names = X.names;
  Matrix<Scalar> info(p, p);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    out.iterations = it;
    const Vector<Scalar> eta = x * beta;
    Vector<Scalar> wv(n), r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar pi = detail::sigmoid(eta(i));
      wv(i) = w(i) * pi * (1 - pi);
      r(i) = w(i) * (y(i) - pi);
    }
    info = x.transpose() * wv.asDiagonal() * x;
    const Vector<Scalar> grad = x.transpose() * r;
    Vector<Scalar> step = info.ldlt().solve(grad);
    if (!step.allFinite()) break;
    Scalar ll_new = logistic_loglik<Scalar>(x, y, w, beta + step);
    for (int h = 0; h < 40 && !(ll_new >= ll - Scalar(1e-12) * std::abs(ll)); ++h) {
      step /= Scalar(2);
      ll_new = logistic_loglik<Scalar>(x, y, w, beta + step);
    }
    beta += step;
    ll = ll_new;
    if (step.cwiseAbs().maxCoeff() < opt.tolerance) {
      out.converged = true;
      break;
    }
  }
  {
    const Vector<Scalar> eta = x * beta;
    Vector<Scalar> wv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar pi = detail::sigmoid(eta(i));
      wv(i) = w(i) * pi * (1 - pi);
    }
    info = x.transpose() * wv.asDiagonal() * x;
  }
  out.coefficients = beta;
  out.objective = ll;
  out.gradient_norm = logistic_gradient<Scalar>(x, y, w, beta).cwiseAbs().maxCoeff();
  out.covariance = detail::symmetric_inverse<Scalar>(info);
  // Diverging coefficients, or a likelihood that has reached its supremum.
  out.separated = (!out.converged && beta.cwiseAbs().maxCoeff() > opt.separation_bound) || -ll < Scalar(1e-6) * w.sum();
  return out;
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression (baseline category 0)
// ---------------------------------------------------------------------------

/// Parameters are stacked category-major: theta = vec(B), B is p x (K-1).
template <typename Scalar>
Scalar multinomial_loglik(const Matrix<Scalar>& X, const std::vector<int>& y, const Vector<Scalar>& w,
                          const Matrix<Scalar>& B) {
  const Matrix<Scalar> eta = X * B;
  Scalar ll = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Scalar m = 0;
    for (Eigen::Index j = 0; j < eta.cols(); ++j) m = std::max(m, eta(i, j));
    Scalar s = std::exp(-m);
    for (Eigen::Index j = 0; j < eta.cols(); ++j) s += std::exp(eta(i, j) - m);
    const Scalar lse = m + std::log(s);
    const Scalar own = y[static_cast<std::size_t>(i)] == 0 ? Scalar(0) : eta(i, y[static_cast<std::size_t>(i)] - 1);
    ll += w(i) * (own - lse);
  }
  return ll;
}

/// Per-row score contributions, n x p(K-1), in the stacked parameter order.
template <typename Scalar>
Matrix<Scalar> multinomial_scores(const Matrix<Scalar>& X, const std::vector<int>& y, const Vector<Scalar>& w,
                                  const Matrix<Scalar>& B) {
  const Eigen::Index n = X.rows(), p = X.cols(), km1 = B.cols();
  const Matrix<Scalar> prob = detail::softmax_with_reference<Scalar>(X * B);
  Matrix<Scalar> s(n, p * km1);
  for (Eigen::Index k = 0; k < km1; ++k)
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar resid = (y[static_cast<std::size_t>(i)] == k + 1 ? Scalar(1) : Scalar(0)) - prob(i, k + 1);
      s.block(i, k * p, 1, p) = w(i) * resid * X.row(i);
    }
  return s;
}

template <typename Scalar>
Vector<Scalar> multinomial_gradient(const Matrix<Scalar>& X, const std::vector<int>& y, const Vector<Scalar>& w,
                                    const Matrix<Scalar>& B) {
  const Eigen::Index n = X.rows(), p = X.cols(), km1 = B.cols();
  const Matrix<Scalar> prob = detail::softmax_with_reference<Scalar>(X * B);
  Vector<Scalar> g(p * km1);
  for (Eigen::Index k = 0; k < km1; ++k) {
    Vector<Scalar> r(n);
    for (Eigen::Index i = 0; i < n; ++i)
      r(i) = w(i) * ((y[static_cast<std::size_t>(i)] == k + 1 ? Scalar(1) : Scalar(0)) - prob(i, k + 1));
    g.segment(k * p, p) = X.transpose() * r;
  }
  return g;
}

/// Observed (= expected) information matrix, p(K-1) square.
template <typename Scalar>
Matrix<Scalar> multinomial_information(const Matrix<Scalar>& X, const Vector<Scalar>& w, const Matrix<Scalar>& B) {
  const Eigen::Index p = X.cols(), km1 = B.cols();
  const Matrix<Scalar> prob = detail::softmax_with_reference<Scalar>(X * B);
  Matrix<Scalar> info(p * km1, p * km1);
  for (Eigen::Index a = 0; a < km1; ++a)
    for (Eigen::Index b = a; b < km1; ++b) {
      Vector<Scalar> d = w.array() * prob.col(a + 1).array() *
                         ((a == b ? Scalar(1) : Scalar(0)) - prob.col(b + 1).array());
      const Matrix<Scalar> blk = X.transpose() * d.asDiagonal() * X;
      info.block(a * p, b * p, p, p) = blk;
      info.block(b * p, a * p, p, p) = blk.transpose();
    }
  return info;
}

/// Maximum likelihood by Newton iterations on the stacked score.
/// Convergence is declared when the max-norm of the score per unit weight
/// falls below `opt.tolerance`.
template <typename Scalar>
FitResult<Scalar> fit_multinomial(const DesignMatrix<Scalar>& X, const std::vector<int>& y, int n_categories = 3,
                                  const Vector<Scalar>& weights = {}, const MultinomialOptions& opt = {}) {
  X.validate();
  const Eigen::Index n = X.rows(), p = X.cols();
  if (static_cast<Eigen::Index>(y.size()) != n) throw FitError("fit_multinomial: response length does not match row count");
  if (n_categories < 2) throw FitError("fit_multinomial: need at least two categories");
  const Vector<Scalar> w = detail::unit_or(weights, n);
  detail::check_weights(w);
  std::vector<Scalar> mass(static_cast<std::size_t>(n_categories), Scalar(0));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = y[static_cast<std::size_t>(i)];
    if (c < 0 || c >= n_categories) throw FitError("fit_multinomial: category out of range");
    mass[static_cast<std::size_t>(c)] += w(i);
  }
  std::vector<int> absent;
  for (int c = 0; c < n_categories; ++c)
    if (mass[static_cast<std::size_t>(c)] <= 0) absent.push_back(c);
  if (!absent.empty()) {
    std::ostringstream msg;
    msg << "fit_multinomial: absent categor" << (absent.size() > 1 ? "ies" : "y") << ':';
    for (int c : absent) msg << ' ' << c;
    throw FitError(msg.str());
  }

  const Matrix<Scalar>& x = X.values;
  const Eigen::Index km1 = n_categories - 1;
  const Scalar wsum = w.sum();
  Matrix<Scalar> B = Matrix<Scalar>::Zero(p, km1);
  Scalar ll = multinomial_loglik<Scalar>(x, y, w, B);
  FitResult<Scalar> out;
  out.kind = FitKind::multinomial;
  out.names = X.names;
  Vector<Scalar> grad = multinomial_gradient<Scalar>(x, y, w, B);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    out.iterations = it;
    if (grad.cwiseAbs().maxCoeff() / wsum < opt.tolerance) {
      out.converged = true;
      break;
    }
    const Matrix<Scalar> info = multinomial_information<Scalar>(x, w, B);
    Vector<Scalar> step = info.ldlt().solve(grad);
    if (!step.allFinite()) break;
    Matrix<Scalar> cand = B + Eigen::Map<const Matrix<Scalar>>(step.data(), p, km1);
    Scalar ll_new = multinomial_loglik<Scalar>(x, y, w, cand);
    for (int h = 0; h < 40 && !(ll_new >= ll - Scalar(1e-12) * std::abs(ll)); ++h) {
      step /= Scalar(2);
      cand = B + Eigen::Map<const Matrix<Scalar>>(step.data(), p, km1);
      ll_new = multinomial_loglik<Scalar>(x, y, w, cand);
    }
    B = cand;
    ll = ll_new;
    grad = multinomial_gradient<Scalar>(x, y, w, B);
  }
  if (!out.converged && grad.cwiseAbs().maxCoeff() / wsum < opt.tolerance) out.converged = true;
  out.coefficients = B;
  out.objective = ll;
  out.gradient_norm = grad.cwiseAbs().maxCoeff() / wsum;
  out.covariance = detail::symmetric_inverse<Scalar>(multinomial_information<Scalar>(x, w, B));
  return out;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Binary fits return one column (P(y=1)); multinomial fits return K columns
/// summing to one.
template <typename Scalar>
Matrix<Scalar> predict_proba(const FitResult<Scalar>& fit, const DesignMatrix<Scalar>& X) {
  if (X.names != fit.names) throw FitError("predict_proba: design columns do not match the fit");
  switch (fit.kind) {
    case FitKind::logistic: {
      const Vector<Scalar> eta = X.values * fit.coef();
      return eta.unaryExpr([](Scalar e) { return detail::sigmoid(e); });
    }
    case FitKind::multinomial:
      return detail::softmax_with_reference<Scalar>(X.values * fit.coefficients);
    case FitKind::wls:
      break;
  }
  throw FitError("predict_proba: least-squares fits have no probabilities");
}

template <typename Scalar>
Vector<Scalar> predict(const FitResult<Scalar>& fit, const DesignMatrix<Scalar>& X) {
  if (X.names != fit.names) throw FitError("predict: design columns do not match the fit");
  return X.values * fit.coef();
}

template <typename Scalar>
Vector<Scalar> standard_errors(const FitResult<Scalar>& fit) {
  return fit.covariance.diagonal().cwiseSqrt();
}

}  // namespace dmar::glm
