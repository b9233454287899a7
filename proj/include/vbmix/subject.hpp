#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vbmix/gauss.hpp"
#include "vbmix/volume.hpp"

namespace vbmix {

/// Fixed class-probability logits plus global log-proportions. The logits
/// are either one row (stationary) or one row per voxel. Per-voxel class
/// probabilities are softmax(omega + logits_row).
struct TemplatePrior {
  Eigen::MatrixXd logits;  // 1 x K or D x K
  Eigen::VectorXd omega;   // K

  int num_classes() const { return static_cast<int>(omega.size()); }
  bool stationary() const { return logits.rows() == 1; }
  void validate(std::int64_t voxels) const;

  /// log softmax(omega + logits row) for one voxel.
  Eigen::VectorXd log_pi(std::int64_t voxel) const;
  Eigen::VectorXd pi(std::int64_t voxel) const;

  static TemplatePrior stationary_uniform(int K);
};

enum class Eq16Variant { Standard, AsWritten };

Eq16Variant eq16_variant_from_string(const std::string& s);

struct FitOptions {
  int max_iters = 30;
  double elbo_rel_tol = 1e-6;
  Eq16Variant eq16 = Eq16Variant::Standard;
  bool update_omega = false;
  std::uint64_t seed = 0;
};

enum class ElboForm { ObservedData, FullData };

struct ElboTerms {
  double expected_loglik = 0.0;
  double kl_z = 0.0;
  double kl_missing = 0.0;       // zero in the observed-data form
  double kl_gauss_wishart = 0.0;
  double total() const {
    return expected_loglik - kl_z - kl_missing - kl_gauss_wishart;
  }
};

struct ElboTrace {
  std::vector<ElboTerms> iterations;
  std::vector<double> totals() const;
};

/// Voxels sharing a missingness pattern, so per-(pattern, class) factors
/// are computed once.
struct PatternGroup {
  MissingPattern pattern;
  std::vector<std::int64_t> voxels;
};

std::vector<PatternGroup> group_by_pattern(const MultiChannelVolume& vol);

/// Per-class accumulated sufficient statistics with missing entries
/// replaced by their conditional moments.
struct SuffStats {
  Eigen::VectorXd counts;                // K
  std::vector<Eigen::VectorXd> first;    // K entries of sum E[z x]
  std::vector<Eigen::MatrixXd> second;   // K entries of sum E[z x x^T]
};

struct SubjectPosterior {
  Eigen::MatrixXd resp;  // D x K
  std::vector<GaussWishartParams> gw;
  Eigen::VectorXd omega;  // template omega in effect at convergence
};

/// Responsibility update: softmax over classes of expected log-density of
/// the observed channels plus log template probability. Voxels with no
/// observed channel receive their template row.
Eigen::MatrixXd update_responsibilities(
    const MultiChannelVolume& vol, const TemplatePrior& tmpl,
    const std::vector<GaussWishartParams>& gw,
    const std::vector<PatternGroup>& groups);

/// Accumulate per-class moments, imputing missing blocks from the posterior
/// conditional. When `include_all_missing` is false, voxels with every
/// channel missing are skipped (the fitting path).
SuffStats impute_moments(const MultiChannelVolume& vol,
                         const std::vector<GaussWishartParams>& gw,
                         const Eigen::MatrixXd& resp,
                         const std::vector<PatternGroup>& groups,
                         bool include_all_missing = true);

std::vector<GaussWishartParams> update_gauss_wishart(
    const SuffStats& stats, const std::vector<GaussWishartParams>& hyper,
    Eq16Variant variant);

/// Point-estimate update of the global log-proportions. With a spatial
/// template this is a single accepted-or-rejected fixed-point step.
Eigen::VectorXd update_omega(const Eigen::MatrixXd& resp,
                             const TemplatePrior& tmpl);

/// Evidence lower bound; the two forms agree (that identity is under test).
/// Voxels with every channel missing are excluded from all sums.
ElboTerms elbo(const MultiChannelVolume& vol, const TemplatePrior& tmpl,
               const std::vector<GaussWishartParams>& gw,
               const Eigen::MatrixXd& resp,
               const std::vector<GaussWishartParams>& hyper, ElboForm form,
               const std::vector<PatternGroup>& groups);

ElboTerms elbo(const MultiChannelVolume& vol, const TemplatePrior& tmpl,
               const std::vector<GaussWishartParams>& gw,
               const Eigen::MatrixXd& resp,
               const std::vector<GaussWishartParams>& hyper, ElboForm form);

std::pair<SubjectPosterior, ElboTrace> fit_subject(
    const MultiChannelVolume& vol,
    const std::vector<GaussWishartParams>& hyper, const TemplatePrior& tmpl,
    const FitOptions& options);

}  // namespace vbmix
