#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "vbmix/errors.hpp"
#include "vbmix/gauss.hpp"

using namespace vbmix;

namespace {

MissingPattern pattern_from_observed(const std::vector<int>& observed,
                                     int channels) {
  std::uint32_t mask = 0;
  for (int c : observed) mask |= 1u << c;
  return MissingPattern::from_mask(mask, channels);
}

}  // namespace

TEST_CASE("multivariate digamma definition and known values") {
  CHECK(multivariate_digamma(2.7, 1) ==
        doctest::Approx(testutil::digamma_oracle(2.7)).epsilon(1e-10));
  CHECK(multivariate_digamma(3.0, 2) ==
        doctest::Approx(testutil::digamma_oracle(3.0) +
                        testutil::digamma_oracle(2.5))
            .epsilon(1e-8));
  CHECK(multivariate_digamma(1.0, 1) ==
        doctest::Approx(-0.57721566).epsilon(1e-8));
}

TEST_CASE("digamma recurrence psi(x+1) = psi(x) + 1/x") {
  std::mt19937 rng(21);
  std::uniform_real_distribution<double> unif(0.3, 20.0);
  for (int i = 0; i < 200; ++i) {
    const double x = unif(rng);
    CHECK(multivariate_digamma(x + 1.0, 1) ==
          doctest::Approx(multivariate_digamma(x, 1) + 1.0 / x)
              .epsilon(1e-10));
    CHECK(multivariate_trigamma(x + 1.0, 1) ==
          doctest::Approx(multivariate_trigamma(x, 1) - 1.0 / (x * x))
              .epsilon(1e-10));
  }
}

TEST_CASE("marginal of the identity pattern is a no-op") {
  std::mt19937 rng(1);
  const Eigen::VectorXd mu = testutil::random_vector(rng, 3);
  const Eigen::MatrixXd S = testutil::random_spd(rng, 3);
  const auto [m, C] = marginal_observed(mu, S, pattern_from_observed({0, 1, 2}, 3));
  CHECK((m - mu).cwiseAbs().maxCoeff() == 0.0);
  CHECK((C - S).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("marginal of a diagonal covariance selects the diagonal entry") {
  Eigen::VectorXd mu(2);
  mu << 1.0, 2.0;
  Eigen::MatrixXd S = Eigen::Vector2d(4.0, 9.0).asDiagonal();
  const auto [m0, C0] = marginal_observed(mu, S, pattern_from_observed({0}, 2));
  CHECK(m0.size() == 1);
  CHECK(m0[0] == 1.0);
  CHECK(C0(0, 0) == 4.0);
  const auto [m1, C1] = marginal_observed(mu, S, pattern_from_observed({1}, 2));
  CHECK(m1[0] == 2.0);
  CHECK(C1(0, 0) == 9.0);
}

TEST_CASE("marginal matches brute-force index extraction") {
  std::mt19937 rng(2);
  const Eigen::VectorXd mu = testutil::random_vector(rng, 3);
  const Eigen::MatrixXd S = testutil::random_spd(rng, 3);
  const std::vector<int> o = {0, 2};
  const auto [m, C] = marginal_observed(mu, S, pattern_from_observed(o, 3));
  for (std::size_t i = 0; i < o.size(); ++i) {
    CHECK(m[static_cast<int>(i)] == mu[o[i]]);
    for (std::size_t j = 0; j < o.size(); ++j)
      CHECK(C(static_cast<int>(i), static_cast<int>(j)) == S(o[i], o[j]));
  }
}

TEST_CASE("conditional with a diagonal precision ignores the evidence") {
  Eigen::VectorXd mu(3);
  mu << 1.0, -1.0, 0.5;
  Eigen::MatrixXd Lambda = Eigen::Vector3d(2.0, 3.0, 4.0).asDiagonal();
  Eigen::VectorXd g(1);
  g << 10.0;
  const auto cond =
      conditional_missing(mu, Lambda, pattern_from_observed({1}, 3), g);
  CHECK(cond.h_mean[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cond.h_mean[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(cond.S(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(cond.S(1, 1) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(std::abs(cond.S(0, 1)) < 1e-14);
}

TEST_CASE("bivariate conditional matches the dense-inversion oracle") {
  // mu = 0, Sigma = [[1, .5], [.5, 1]], observe g = 2 in channel 0.
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd Sigma(2, 2);
  Sigma << 1.0, 0.5, 0.5, 1.0;
  // oracle: textbook covariance-form conditional computed densely
  const double oracle_mean = 0.0 + Sigma(1, 0) / Sigma(0, 0) * (2.0 - 0.0);
  const double oracle_var =
      Sigma(1, 1) - Sigma(1, 0) * Sigma(0, 1) / Sigma(0, 0);
  CHECK(oracle_mean == doctest::Approx(1.0));
  CHECK(oracle_var == doctest::Approx(0.75));

  const Eigen::MatrixXd Lambda = Sigma.inverse();
  Eigen::VectorXd g(1);
  g << 2.0;
  const auto cond =
      conditional_missing(mu, Lambda, pattern_from_observed({0}, 2), g);
  CHECK(cond.h_mean[0] == doctest::Approx(oracle_mean).epsilon(1e-12));
  CHECK(cond.S(0, 0) == doctest::Approx(oracle_var).epsilon(1e-12));
}

TEST_CASE("precision-route conditional equals covariance-route conditional") {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> dim(2, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const int M = dim(rng);
    const Eigen::MatrixXd Sigma = testutil::random_spd(rng, M);
    const Eigen::VectorXd mu = testutil::random_vector(rng, M, 2.0);
    std::uniform_int_distribution<std::uint32_t> masks(1, (1u << M) - 2);
    const MissingPattern pattern =
        MissingPattern::from_mask(masks(rng), M);
    if (pattern.missing.empty()) continue;
    Eigen::VectorXd g(pattern.observed.size());
    for (std::size_t i = 0; i < pattern.observed.size(); ++i)
      g[static_cast<int>(i)] = mu[pattern.observed[i]] + 0.3 * i;

    const auto cond =
        conditional_missing(mu, Sigma.inverse(), pattern, g);

    // covariance-partition oracle: mu_m + S_mo S_oo^{-1} (g - mu_o),
    // S_mm - S_mo S_oo^{-1} S_om, all via dense inversion.
    const auto no = static_cast<int>(pattern.observed.size());
    const auto nm = static_cast<int>(pattern.missing.size());
    Eigen::MatrixXd S_oo(no, no), S_mo(nm, no), S_mm(nm, nm);
    Eigen::VectorXd mu_o(no), mu_m(nm);
    for (int i = 0; i < no; ++i) {
      mu_o[i] = mu[pattern.observed[i]];
      for (int j = 0; j < no; ++j)
        S_oo(i, j) = Sigma(pattern.observed[i], pattern.observed[j]);
    }
    for (int i = 0; i < nm; ++i) {
      mu_m[i] = mu[pattern.missing[i]];
      for (int j = 0; j < no; ++j)
        S_mo(i, j) = Sigma(pattern.missing[i], pattern.observed[j]);
      for (int j = 0; j < nm; ++j)
        S_mm(i, j) = Sigma(pattern.missing[i], pattern.missing[j]);
    }
    const Eigen::MatrixXd gain = S_mo * S_oo.inverse();
    const Eigen::VectorXd mean = mu_m + gain * (g - mu_o);
    const Eigen::MatrixXd cov = S_mm - gain * S_mo.transpose();

    worst = std::max(worst, (cond.h_mean - mean).cwiseAbs().maxCoeff());
    worst = std::max(worst, (cond.S - cov).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("all-missing conditional returns the unconditional Gaussian") {
  std::mt19937 rng(4);
  const Eigen::MatrixXd Sigma = testutil::random_spd(rng, 3);
  const Eigen::VectorXd mu = testutil::random_vector(rng, 3);
  const auto cond = conditional_missing(
      mu, Sigma.inverse(), pattern_from_observed({}, 3), Eigen::VectorXd());
  CHECK((cond.h_mean - mu).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((cond.S - Sigma).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("expected log-density: plug-in oracle in the large-evidence limit") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int M = 3;
    GaussWishartParams q;
    q.mu = testutil::random_vector(rng, M, 2.0);
    q.b = 1e8;
    q.nu = 1e8;
    q.V = testutil::random_spd(rng, M) / q.nu;  // keeps Lambda = nu*V sane
    const MissingPattern pattern = pattern_from_observed({0, 2}, M);
    Eigen::VectorXd g(2);
    g << q.mu[0] + 0.4, q.mu[2] - 0.7;

    // plug-in oracle: exact log N(g | mu_o, Sigma_oo) with Sigma the dense
    // inverse of the expected precision nu*V.
    const Eigen::MatrixXd Sigma = (q.nu * q.V).inverse();
    Eigen::MatrixXd S_oo(2, 2);
    Eigen::VectorXd mu_o(2), d(2);
    const std::vector<int> o = {0, 2};
    for (int i = 0; i < 2; ++i) {
      mu_o[i] = q.mu[o[i]];
      for (int j = 0; j < 2; ++j) S_oo(i, j) = Sigma(o[i], o[j]);
    }
    d = g - mu_o;
    const double plug_in = -0.5 * (2.0 * std::log(2.0 * M_PI) +
                                   std::log(S_oo.determinant()) +
                                   d.dot(S_oo.inverse() * d));
    CHECK(expected_log_marginal_density(q, g, pattern) ==
          doctest::Approx(plug_in).epsilon(1e-4));
  }
}

TEST_CASE("expected log-density: fully observed scalar closed form") {
  std::mt19937 rng(6);
  std::uniform_real_distribution<double> unif(0.5, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    GaussWishartParams q;
    q.mu = Eigen::VectorXd::Constant(1, unif(rng));
    q.b = unif(rng);
    q.V = Eigen::MatrixXd::Constant(1, 1, unif(rng));
    q.nu = unif(rng);
    Eigen::VectorXd g(1);
    g << unif(rng);
    // standard variational mixture expected log-density, M = 1:
    // 0.5 E[ln lambda] - 1/(2b) - (nu V / 2)(g - mu)^2 - 0.5 ln 2 pi
    const double elog_lambda = testutil::digamma_oracle(q.nu / 2.0) +
                               std::log(2.0) + std::log(q.V(0, 0));
    const double oracle = 0.5 * elog_lambda - 1.0 / (2.0 * q.b) -
                          0.5 * q.nu * q.V(0, 0) * (g[0] - q.mu[0]) *
                              (g[0] - q.mu[0]) -
                          0.5 * std::log(2.0 * M_PI);
    CHECK(expected_log_marginal_density(q, g,
                                        pattern_from_observed({0}, 1)) ==
          doctest::Approx(oracle).epsilon(1e-10));
  }
}

TEST_CASE("expected log-density is shift invariant") {
  std::mt19937 rng(7);
  GaussWishartParams q = testutil::random_gw(rng, 3);
  const MissingPattern pattern = pattern_from_observed({0, 1}, 3);
  Eigen::VectorXd g(2);
  g << 0.3, -0.8;
  const double base = expected_log_marginal_density(q, g, pattern);
  GaussWishartParams shifted = q;
  Eigen::VectorXd t = testutil::random_vector(rng, 3);
  shifted.mu += t;
  Eigen::VectorXd gs = g;
  gs[0] += t[0];
  gs[1] += t[1];
  CHECK(expected_log_marginal_density(shifted, gs, pattern) ==
        doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("observed_score agrees with expected_log_marginal_density") {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    GaussWishartParams q = testutil::random_gw(rng, 4);
    std::uniform_int_distribution<std::uint32_t> masks(1, (1u << 4) - 1);
    const MissingPattern pattern = MissingPattern::from_mask(masks(rng), 4);
    Eigen::VectorXd g(pattern.observed.size());
    for (int i = 0; i < g.size(); ++i) g[i] = 0.1 * trial - 0.5 * i;
    const ObservedScore score = observed_score(q, pattern);
    CHECK(score(g) ==
          doctest::Approx(expected_log_marginal_density(q, g, pattern))
              .epsilon(1e-12));
  }
}

TEST_CASE("Gauss-Wishart KL: zero at equality, monotone in mean distance") {
  std::mt19937 rng(9);
  const GaussWishartParams q = testutil::random_gw(rng, 2);
  CHECK(kl_gauss_wishart(q, q) == doctest::Approx(0.0).epsilon(1e-12));
  GaussWishartParams p = q;
  double prev = 0.0;
  for (int step = 1; step <= 5; ++step) {
    p.mu = q.mu + Eigen::VectorXd::Constant(2, 0.5 * step);
    const double kl = kl_gauss_wishart(q, p);
    CHECK(kl > prev);
    prev = kl;
  }
}

TEST_CASE("Gauss-Wishart KL is nonnegative on random pairs") {
  std::mt19937 rng(10);
  std::uniform_int_distribution<int> dim(1, 4);
  double min_kl = 1.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int M = dim(rng);
    const GaussWishartParams q = testutil::random_gw(rng, M);
    const GaussWishartParams p = testutil::random_gw(rng, M);
    const double kl = kl_gauss_wishart(q, p);
    min_kl = std::min(min_kl, kl);
  }
  CHECK(min_kl >= -1e-10);
}

TEST_CASE("scalar Gauss-Wishart KL matches numerical quadrature") {
  // Oracle: integrate over the precision lambda numerically; for each
  // lambda the Gaussian mean-KL is the textbook closed form, and the
  // Wishart (Gamma) log-ratio is evaluated directly from densities.
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> unif(0.8, 4.0);
  for (int trial = 0; trial < 5; ++trial) {
    GaussWishartParams q, p;
    q.mu = Eigen::VectorXd::Constant(1, unif(rng));
    q.b = unif(rng);
    q.V = Eigen::MatrixXd::Constant(1, 1, unif(rng));
    q.nu = 2.0 + unif(rng);
    p.mu = Eigen::VectorXd::Constant(1, unif(rng));
    p.b = unif(rng);
    p.V = Eigen::MatrixXd::Constant(1, 1, unif(rng));
    p.nu = 2.0 + unif(rng);

    // lambda ~ Gamma(shape nu/2, scale 2V) under q
    const double shape_q = q.nu / 2.0, scale_q = 2.0 * q.V(0, 0);
    const double shape_p = p.nu / 2.0, scale_p = 2.0 * p.V(0, 0);
    auto log_gamma_pdf = [](double x, double shape, double scale) {
      return (shape - 1.0) * std::log(x) - x / scale -
             std::lgamma(shape) - shape * std::log(scale);
    };
    const double hi = scale_q * (shape_q + 14.0 * std::sqrt(shape_q));
    const int n = 200001;
    const double h = hi / (n - 1);
    double integral = 0.0;
    for (int i = 1; i < n; ++i) {  // skip the (zero-density) origin
      const double lam = i * h;
      const double qd = std::exp(log_gamma_pdf(lam, shape_q, scale_q));
      const double wish_ratio = log_gamma_pdf(lam, shape_q, scale_q) -
                                log_gamma_pdf(lam, shape_p, scale_p);
      const double vq = 1.0 / (q.b * lam), vp = 1.0 / (p.b * lam);
      const double dm = q.mu[0] - p.mu[0];
      const double gauss_kl =
          0.5 * (std::log(vp / vq) + vq / vp + dm * dm / vp - 1.0);
      // Simpson weights; the integrand vanishes at lambda = 0
      const double w = (i == n - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
      integral += w * qd * (wish_ratio + gauss_kl);
    }
    integral *= h / 3.0;
    CHECK(kl_gauss_wishart(q, p) ==
          doctest::Approx(integral).epsilon(1e-6));
  }
}

TEST_CASE("categorical KL basics") {
  Eigen::VectorXd q(2), p(2);
  q << 0.5, 0.5;
  CHECK(kl_categorical(q, q) == doctest::Approx(0.0));
  q << 1.0, 0.0;
  p << 0.5, 0.5;
  CHECK(kl_categorical(q, p) == doctest::Approx(std::log(2.0)));
  p << 0.0, 1.0;
  CHECK(std::isinf(kl_categorical(q, p)));
}

TEST_CASE("categorical KL matches the naive summation oracle") {
  std::mt19937 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::VectorXd q = testutil::random_simplex(rng, 5);
    const Eigen::VectorXd p = testutil::random_simplex(rng, 5);
    double naive = 0.0;
    for (int k = 0; k < 5; ++k)
      if (q[k] > 0.0) naive += q[k] * std::log(q[k] / p[k]);
    const double kl = kl_categorical(q, p);
    CHECK(kl == doctest::Approx(naive).epsilon(1e-14));
    CHECK(kl >= -1e-15);
  }
}

TEST_CASE("SPD repair: one jitter pass, then a numerical error") {
  Eigen::MatrixXd near_singular(2, 2);
  near_singular << 1.0, 1.0, 1.0, 1.0 + 1e-15;
  CHECK_NOTHROW(chol_spd(near_singular, "test"));

  Eigen::MatrixXd negative(2, 2);
  negative << -1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(chol_spd(negative, "test"), NumericalError);
}
