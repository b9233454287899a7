#include "vbmix/gauss.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "vbmix/errors.hpp"

namespace vbmix {

namespace {
constexpr double kLn2Pi = 1.8378770664093454836;
constexpr double kLn2 = 0.69314718055994530942;
constexpr double kLnPi = 1.1447298858494001741;
constexpr double kRcondFloor = 1e-12;
}  // namespace

void GaussWishartParams::validate() const {
  const int M = dim();
  if (M < 1) throw ValidationError("Gauss-Wishart parameters need dim >= 1");
  if (!(b > 0.0)) throw ValidationError("Gauss-Wishart b must be positive");
  if (!(nu > M - 1))
    throw ValidationError("Gauss-Wishart nu must exceed dim - 1");
  if (V.rows() != M || V.cols() != M)
    throw ValidationError("Gauss-Wishart scale has wrong shape");
  const double scale = std::max(1.0, V.cwiseAbs().maxCoeff());
  if ((V - V.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw ValidationError("Gauss-Wishart scale is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success)
    throw ValidationError("Gauss-Wishart scale is not positive definite");
}

Eigen::VectorXd CholSpd::solve(const Eigen::VectorXd& rhs) const {
  Eigen::VectorXd y = L.triangularView<Eigen::Lower>().solve(rhs);
  return L.transpose().triangularView<Eigen::Upper>().solve(y);
}

Eigen::MatrixXd CholSpd::solve(const Eigen::MatrixXd& rhs) const {
  Eigen::MatrixXd y = L.triangularView<Eigen::Lower>().solve(rhs);
  return L.transpose().triangularView<Eigen::Upper>().solve(y);
}

Eigen::MatrixXd CholSpd::inverse() const {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(L.rows(), L.cols());
  return solve(eye);
}

CholSpd chol_spd(const Eigen::MatrixXd& A, const char* what) {
  const auto n = A.rows();
  CholSpd out;
  if (n == 0) return out;
  Eigen::MatrixXd work = A;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(work);
    if (llt.info() == Eigen::Success && llt.rcond() >= kRcondFloor) {
      out.L = llt.matrixL();
      out.log_det = 2.0 * out.L.diagonal().array().log().sum();
      return out;
    }
    if (attempt == 0)
      work.diagonal().array() += 1e-8 * work.trace() / static_cast<double>(n);
  }
  throw NumericalError(std::string(what) +
                       " is numerically singular (after jitter)");
}

double multivariate_digamma(double x, int M) {
  if (M < 1) throw ValidationError("multivariate_digamma needs M >= 1");
  if (!(x > 0.5 * (M - 1)))
    throw ValidationError("multivariate_digamma needs x > (M-1)/2");
  double s = 0.0;
  for (int i = 1; i <= M; ++i) s += boost::math::digamma(x + 0.5 * (1 - i));
  return s;
}

double multivariate_trigamma(double x, int M) {
  if (M < 1) throw ValidationError("multivariate_trigamma needs M >= 1");
  if (!(x > 0.5 * (M - 1)))
    throw ValidationError("multivariate_trigamma needs x > (M-1)/2");
  double s = 0.0;
  for (int i = 1; i <= M; ++i) s += boost::math::trigamma(x + 0.5 * (1 - i));
  return s;
}

double multivariate_lgamma(double x, int M) {
  double s = 0.25 * M * (M - 1) * kLnPi;
  for (int i = 1; i <= M; ++i) s += std::lgamma(x + 0.5 * (1 - i));
  return s;
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> marginal_observed(
    const Eigen::VectorXd& mu, const Eigen::MatrixXd& Sigma,
    const MissingPattern& pattern) {
  const auto& o = pattern.observed;
  if (o.empty()) throw ValidationError("marginal_observed: empty observed set");
  const auto Mo = static_cast<Eigen::Index>(o.size());
  Eigen::VectorXd mu_o(Mo);
  Eigen::MatrixXd S_oo(Mo, Mo);
  for (Eigen::Index i = 0; i < Mo; ++i) {
    mu_o[i] = mu[o[i]];
    for (Eigen::Index j = 0; j < Mo; ++j) S_oo(i, j) = Sigma(o[i], o[j]);
  }
  return {mu_o, S_oo};
}

ConditionalGaussian conditional_missing(const Eigen::VectorXd& mu,
                                        const Eigen::MatrixXd& Lambda,
                                        const MissingPattern& pattern,
                                        const Eigen::VectorXd& g) {
  const auto& o = pattern.observed;
  const auto& m = pattern.missing;
  if (m.empty())
    throw ValidationError("conditional_missing: nothing is missing");
  if (static_cast<Eigen::Index>(o.size()) != g.size())
    throw ValidationError("conditional_missing: g does not match pattern");
  if (!g.allFinite())
    throw ValidationError("conditional_missing: g must be finite");
  const auto Mm = static_cast<Eigen::Index>(m.size());
  const auto Mo = static_cast<Eigen::Index>(o.size());

  Eigen::MatrixXd L_mm(Mm, Mm), L_mo(Mm, Mo);
  Eigen::VectorXd mu_m(Mm), resid(Mo);
  for (Eigen::Index i = 0; i < Mm; ++i) {
    mu_m[i] = mu[m[i]];
    for (Eigen::Index j = 0; j < Mm; ++j) L_mm(i, j) = Lambda(m[i], m[j]);
    for (Eigen::Index j = 0; j < Mo; ++j) L_mo(i, j) = Lambda(m[i], o[j]);
  }
  for (Eigen::Index j = 0; j < Mo; ++j) resid[j] = g[j] - mu[o[j]];

  const CholSpd chol = chol_spd(L_mm, "Lambda_mm");
  ConditionalGaussian out;
  out.h_mean = mu_m - chol.solve(Eigen::VectorXd(L_mo * resid));
  out.S = chol.inverse();
  out.S = 0.5 * (out.S + out.S.transpose()).eval();
  return out;
}

ObservedScore observed_score(const GaussWishartParams& q,
                             const MissingPattern& pattern) {
  const int M = q.dim();
  const auto& o = pattern.observed;
  const auto& m = pattern.missing;
  const auto Mo = static_cast<int>(o.size());
  const auto Mm = static_cast<int>(m.size());

  ObservedScore s;
  s.nu = q.nu;
  s.mu_o.resize(Mo);
  for (int i = 0; i < Mo; ++i) s.mu_o[i] = q.mu[o[i]];

  double logdet_omega = 0.0;
  if (Mm == 0) {
    s.omega = q.V;
    logdet_omega = chol_spd(q.V, "V").log_det;
  } else if (Mo > 0) {
    Eigen::MatrixXd V_oo(Mo, Mo), V_om(Mo, Mm), V_mm(Mm, Mm);
    for (int i = 0; i < Mo; ++i) {
      for (int j = 0; j < Mo; ++j) V_oo(i, j) = q.V(o[i], o[j]);
      for (int j = 0; j < Mm; ++j) V_om(i, j) = q.V(o[i], m[j]);
    }
    for (int i = 0; i < Mm; ++i)
      for (int j = 0; j < Mm; ++j) V_mm(i, j) = q.V(m[i], m[j]);
    const CholSpd chol_mm = chol_spd(V_mm, "V_mm");
    s.omega = V_oo - V_om * chol_mm.solve(Eigen::MatrixXd(V_om.transpose()));
    s.omega = 0.5 * (s.omega + s.omega.transpose()).eval();
    logdet_omega = chol_spd(s.omega, "Schur block").log_det;
  } else {
    s.omega.resize(0, 0);
  }

  // Expected log-determinant of the precision plus the imputation-entropy
  // correction for the missing block; together with the quadratic term this
  // is the exact contribution of one voxel's observed data to the bound.
  double elogdet = 0.0;
  for (int i = 1; i <= M; ++i)
    elogdet += boost::math::digamma(0.5 * (q.nu + 1 - i));
  elogdet += M * kLn2;
  s.constant = 0.5 * (elogdet - Mm * std::log(q.nu) + logdet_omega) -
               M / (2.0 * q.b) - 0.5 * Mo * kLn2Pi;
  return s;
}

double expected_log_marginal_density(const GaussWishartParams& q,
                                     const Eigen::VectorXd& g,
                                     const MissingPattern& pattern) {
  q.validate();
  if (pattern.observed.empty())
    throw ValidationError(
        "expected_log_marginal_density: empty observed set");
  return observed_score(q, pattern)(g);
}

double kl_gauss_wishart(const GaussWishartParams& q,
                        const GaussWishartParams& p) {
  q.validate();
  p.validate();
  const int M = q.dim();
  if (p.dim() != M)
    throw ValidationError("kl_gauss_wishart: dimension mismatch");

  const CholSpd chol_q = chol_spd(q.V, "q.V");
  const CholSpd chol_p = chol_spd(p.V, "p.V");
  const Eigen::VectorXd dmu = q.mu - p.mu;

  // Expected KL of the conditional Gaussian over the mean.
  const double kl_mean =
      0.5 * (M * std::log(q.b / p.b) + M * p.b / q.b - M +
             p.b * q.nu * dmu.dot(q.V * dmu));

  // Wishart KL.
  const double tr = chol_p.solve(q.V).trace();
  const double kl_wishart =
      -0.5 * p.nu * (chol_q.log_det - chol_p.log_det) +
      0.5 * q.nu * (tr - M) + multivariate_lgamma(0.5 * p.nu, M) -
      multivariate_lgamma(0.5 * q.nu, M) +
      0.5 * (q.nu - p.nu) * multivariate_digamma(0.5 * q.nu, M);
  return kl_mean + kl_wishart;
}

double kl_categorical(const Eigen::VectorXd& q, const Eigen::VectorXd& p) {
  if (q.size() != p.size())
    throw ValidationError("kl_categorical: dimension mismatch");
  if (std::abs(q.sum() - 1.0) > 1e-9 || std::abs(p.sum() - 1.0) > 1e-9)
    throw ValidationError("kl_categorical: inputs must lie on the simplex");
  double kl = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    if (q[k] <= 0.0) continue;
    if (p[k] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += q[k] * std::log(q[k] / p[k]);
  }
  return std::max(kl, 0.0);
}

}  // namespace vbmix
