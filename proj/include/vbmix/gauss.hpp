#pragma once

#include <utility>

#include <Eigen/Dense>

#include "vbmix/volume.hpp"

namespace vbmix {

/// Parameters of a Gauss-Wishart distribution over a Gaussian's mean and
/// precision. Used both for priors and for variational posteriors.
struct GaussWishartParams {
  Eigen::VectorXd mu;   // mean location
  double b = 1.0;       // mean-precision scaling, > 0
  Eigen::MatrixXd V;    // Wishart scale, SPD
  double nu = 1.0;      // degrees of freedom, > dim - 1

  int dim() const { return static_cast<int>(mu.size()); }
  void validate() const;
};

/// Conditional Gaussian over the missing channels of one voxel.
struct ConditionalGaussian {
  Eigen::VectorXd h_mean;
  Eigen::MatrixXd S;
};

/// Cholesky factorization with the SPD repair policy: if the factorization
/// fails or the reciprocal condition estimate drops below 1e-12, a jitter of
/// 1e-8 * trace/M is added to the diagonal once; a second failure throws
/// NumericalError.
struct CholSpd {
  Eigen::MatrixXd L;
  double log_det = 0.0;  // log determinant of the factored matrix

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
  Eigen::MatrixXd inverse() const;
};

CholSpd chol_spd(const Eigen::MatrixXd& A, const char* what = "matrix");

// --- special functions -----------------------------------------------------

/// psi_M(x) = sum_{i=1}^{M} psi(x + (1-i)/2), defined for x > (M-1)/2.
double multivariate_digamma(double x, int M);
/// Same sum with the trigamma function.
double multivariate_trigamma(double x, int M);
/// ln Gamma_M(x) = M(M-1)/4 ln pi + sum_{i=1}^{M} ln Gamma(x + (1-i)/2).
double multivariate_lgamma(double x, int M);

// --- partitioned Gaussians -------------------------------------------------

/// Sub-vector and principal submatrix selected by the observed channels.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> marginal_observed(
    const Eigen::VectorXd& mu, const Eigen::MatrixXd& Sigma,
    const MissingPattern& pattern);

/// Conditional of the missing channels given observed values g, from the
/// precision matrix: mean = mu_m - Lambda_mm^{-1} Lambda_mo (g - mu_o),
/// covariance = Lambda_mm^{-1}.
ConditionalGaussian conditional_missing(const Eigen::VectorXd& mu,
                                        const Eigen::MatrixXd& Lambda,
                                        const MissingPattern& pattern,
                                        const Eigen::VectorXd& g);

// --- expected densities and divergences ------------------------------------

/// Precomputed per-(pattern, class) pieces of the expected log-density of
/// the observed channels under a Gauss-Wishart posterior. The quadratic
/// form uses the Schur complement of the posterior scale over the missing
/// block; the constant carries the digamma and normalization terms plus the
/// imputation-entropy correction, so that summing scores over voxels gives
/// exactly the variational bound's data term (see elbo()).
struct ObservedScore {
  Eigen::MatrixXd omega;     // Schur complement of V over the missing block
  Eigen::VectorXd mu_o;
  double constant = 0.0;
  double nu = 0.0;

  double operator()(const Eigen::VectorXd& g) const {
    const Eigen::VectorXd d = g - mu_o;
    return constant - 0.5 * nu * d.dot(omega * d);
  }
};

ObservedScore observed_score(const GaussWishartParams& q,
                             const MissingPattern& pattern);

/// E[ln N(g | mu_o, Sigma_oo)]-style score of one voxel's observed channels
/// under posterior q. Reduces to the standard variational Gaussian-mixture
/// expected log-density when nothing is missing.
double expected_log_marginal_density(const GaussWishartParams& q,
                                     const Eigen::VectorXd& g,
                                     const MissingPattern& pattern);

/// KL(NW(q) || NW(p)) in closed form; nonnegative, zero iff q == p.
double kl_gauss_wishart(const GaussWishartParams& q,
                        const GaussWishartParams& p);

/// KL between two points on the K-simplex, with 0 ln 0 := 0. Returns
/// +infinity when p has a zero where q has mass.
double kl_categorical(const Eigen::VectorXd& q, const Eigen::VectorXd& p);

}  // namespace vbmix
