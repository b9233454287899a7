#pragma once

// Shared generators for the test suites. Deliberately independent of the
// library's own RNG so tests do not inherit its bugs.

#include <random>
#include <vector>

#include <Eigen/Dense>

#include "vbmix/gauss.hpp"
#include "vbmix/volume.hpp"

namespace testutil {

inline Eigen::MatrixXd random_spd(std::mt19937& rng, int m,
                                  double ridge = 0.5) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd A(m, m);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < m; ++c) A(r, c) = normal(rng);
  return A * A.transpose() + ridge * Eigen::MatrixXd::Identity(m, m);
}

inline Eigen::VectorXd random_vector(std::mt19937& rng, int m,
                                     double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::VectorXd v(m);
  for (int i = 0; i < m; ++i) v[i] = normal(rng);
  return v;
}

inline vbmix::GaussWishartParams random_gw(std::mt19937& rng, int m) {
  std::uniform_real_distribution<double> unif(0.5, 5.0);
  vbmix::GaussWishartParams q;
  q.mu = random_vector(rng, m, 2.0);
  q.b = unif(rng);
  q.V = random_spd(rng, m);
  q.nu = m + unif(rng);
  return q;
}

inline Eigen::VectorXd random_simplex(std::mt19937& rng, int k) {
  std::uniform_real_distribution<double> unif(1e-3, 1.0);
  Eigen::VectorXd p(k);
  for (int i = 0; i < k; ++i) p[i] = unif(rng);
  return p / p.sum();
}

/// Random volume with independent per-entry missingness.
inline vbmix::MultiChannelVolume random_volume(std::mt19937& rng,
                                              std::array<int, 3> dims,
                                              int channels,
                                              double missing_prob) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  vbmix::MultiChannelVolume vol;
  vol.dims = dims;
  vol.channels = channels;
  vol.data.resize(static_cast<std::size_t>(vol.voxel_count()) * channels);
  bool any_finite = false;
  for (auto& x : vol.data) {
    if (unif(rng) < missing_prob) {
      x = std::numeric_limits<float>::quiet_NaN();
    } else {
      x = static_cast<float>(normal(rng));
      any_finite = true;
    }
  }
  if (!any_finite) vol.data[0] = 0.0f;
  return vol;
}

/// Scalar digamma via recurrence + asymptotic series; oracle for the
/// library's special functions.
inline double digamma_oracle(double x) {
  double result = 0.0;
  while (x < 8.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x, inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return result;
}

}  // namespace testutil
