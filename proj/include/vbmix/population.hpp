#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vbmix/subject.hpp"

namespace vbmix {

/// Population-level model: learned Gauss-Wishart hyperpriors, the fixed
/// template logits, and the learned global proportions.
struct TrainedModel {
  int num_classes = 0;
  int channels = 0;
  std::vector<GaussWishartParams> hyper;  // K entries
  TemplatePrior tmpl;
  struct Metadata {
    int outer_iterations = 0;
    double final_elbo = 0.0;
  } metadata;

  void validate() const;
};

struct TrainOptions {
  int outer_iters = 10;
  FitOptions inner;          // inner.max_iters bounds sweeps per outer pass
  int nu0_newton_iters = 20;
  double nu0_tol = 1e-9;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Hyperprior updates from N subjects' K posteriors (posteriors[n][k]).

/// Precision-weighted mean across subjects.
std::vector<Eigen::VectorXd> update_mu0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors);

/// Scatter-based update; result clamped to [1e-6, 1e8] because the printed
/// formula degenerates when all subject means coincide.
std::vector<double> update_b0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::VectorXd>& mu0);

/// Exact coordinate maximizer of the combined bound in b0: adds the M/b
/// mean-uncertainty term to the scatter, so it stays finite when all
/// subject means coincide. Used by train_population.
std::vector<double> update_b0_exact(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::VectorXd>& mu0);

std::vector<Eigen::MatrixXd> update_V0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<double>& nu0);

/// Newton ascent on the reparameterized degrees of freedom,
/// theta = ln(nu0 - (M-1)); converges to |gradient| < tol.
std::vector<double> update_nu0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::MatrixXd>& V0, const std::vector<double>& nu0_init,
    int max_newton_iters = 20, double tol = 1e-9);

/// The nu0-dependent terms of the combined bound for one class, and their
/// analytic derivative; exposed so finite-difference checks can probe them.
double nu0_objective(const std::vector<GaussWishartParams>& class_posteriors,
                     const Eigen::MatrixXd& V0, double nu0);
double nu0_gradient(const std::vector<GaussWishartParams>& class_posteriors,
                    const Eigen::MatrixXd& V0, double nu0);

/// Deterministic hyperprior initialization from the first subject's pooled
/// observed intensities (quantile-spaced class means, diagonal scales).
std::vector<GaussWishartParams> init_hyper(const MultiChannelVolume& first,
                                           int K);

struct TrainResult {
  TrainedModel model;
  std::vector<double> combined_elbo;  // one entry per outer iteration
};

TrainResult train_population(const std::vector<MultiChannelVolume>& volumes,
                             const TemplatePrior& tmpl, int K,
                             const TrainOptions& options);

// Model (de)serialization: single JSON document.
std::string model_to_json(const TrainedModel& model);
TrainedModel model_from_json(const std::string& text);
void save_model(const TrainedModel& model, const std::string& path);
TrainedModel load_model(const std::string& path);

}  // namespace vbmix
