#include "vbmix/subject.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <boost/math/special_functions/digamma.hpp>

#include "vbmix/errors.hpp"

namespace vbmix {

namespace {
constexpr double kLn2Pi = 1.8378770664093454836;
constexpr double kLn2 = 0.69314718055994530942;
constexpr double kOmegaFloor = -13.815510557964274;  // ln(1e-6)

Eigen::VectorXd log_softmax(const Eigen::VectorXd& x) {
  const double m = x.maxCoeff();
  const double lse = m + std::log((x.array() - m).exp().sum());
  return x.array() - lse;
}

Eigen::VectorXd gather_observed(const MultiChannelVolume& vol,
                                std::int64_t voxel,
                                const std::vector<int>& observed) {
  Eigen::VectorXd g(observed.size());
  for (std::size_t i = 0; i < observed.size(); ++i)
    g[i] = vol.at(voxel, observed[i]);
  return g;
}

double elogdet_precision(const GaussWishartParams& q, double logdet_V) {
  double s = 0.0;
  for (int i = 1; i <= q.dim(); ++i)
    s += boost::math::digamma(0.5 * (q.nu + 1 - i));
  return s + q.dim() * kLn2 + logdet_V;
}

}  // namespace

void TemplatePrior::validate(std::int64_t voxels) const {
  const int K = num_classes();
  if (K < 1) throw ValidationError("template needs at least one class");
  if (logits.cols() != K)
    throw ValidationError("template logits/omega class count mismatch");
  if (logits.rows() != 1 && logits.rows() != voxels)
    throw ValidationError("template logits must be 1 x K or D x K");
  if (!omega.allFinite() || !logits.allFinite())
    throw ValidationError("template parameters must be finite");
}

Eigen::VectorXd TemplatePrior::log_pi(std::int64_t voxel) const {
  const Eigen::Index row = stationary() ? 0 : voxel;
  return log_softmax(omega + logits.row(row).transpose());
}

Eigen::VectorXd TemplatePrior::pi(std::int64_t voxel) const {
  return log_pi(voxel).array().exp();
}

TemplatePrior TemplatePrior::stationary_uniform(int K) {
  TemplatePrior t;
  t.logits = Eigen::MatrixXd::Zero(1, K);
  t.omega = Eigen::VectorXd::Zero(K);
  return t;
}

Eq16Variant eq16_variant_from_string(const std::string& s) {
  if (s == "standard") return Eq16Variant::Standard;
  if (s == "as-written") return Eq16Variant::AsWritten;
  throw ValidationError("unknown eq16 variant: " + s);
}

std::vector<double> ElboTrace::totals() const {
  std::vector<double> out;
  out.reserve(iterations.size());
  for (const auto& t : iterations) out.push_back(t.total());
  return out;
}

std::vector<PatternGroup> group_by_pattern(const MultiChannelVolume& vol) {
  std::map<std::uint32_t, std::vector<std::int64_t>> buckets;
  const std::int64_t D = vol.voxel_count();
  for (std::int64_t d = 0; d < D; ++d) {
    std::uint32_t mask = 0;
    for (int c = 0; c < vol.channels; ++c)
      if (!vol.is_missing(d, c)) mask |= (1u << c);
    buckets[mask].push_back(d);
  }
  std::vector<PatternGroup> groups;
  groups.reserve(buckets.size());
  for (auto& [mask, voxels] : buckets) {
    PatternGroup g;
    g.pattern = MissingPattern::from_mask(mask, vol.channels);
    g.voxels = std::move(voxels);
    groups.push_back(std::move(g));
  }
  return groups;
}

Eigen::MatrixXd update_responsibilities(
    const MultiChannelVolume& vol, const TemplatePrior& tmpl,
    const std::vector<GaussWishartParams>& gw,
    const std::vector<PatternGroup>& groups) {
  const int K = static_cast<int>(gw.size());
  const std::int64_t D = vol.voxel_count();
  tmpl.validate(D);
  if (tmpl.num_classes() != K)
    throw ValidationError("template classes do not match posterior count");

  Eigen::MatrixXd resp(D, K);
  const Eigen::VectorXd stationary_logpi =
      tmpl.stationary() ? tmpl.log_pi(0) : Eigen::VectorXd();

  Eigen::VectorXd logp(K);
  for (const auto& grp : groups) {
    if (grp.pattern.observed.empty()) {
      for (const auto d : grp.voxels)
        resp.row(d) = tmpl.pi(d).transpose();
      continue;
    }
    std::vector<ObservedScore> scores;
    scores.reserve(K);
    for (int k = 0; k < K; ++k)
      scores.push_back(observed_score(gw[k], grp.pattern));
    for (const auto d : grp.voxels) {
      const Eigen::VectorXd g = gather_observed(vol, d, grp.pattern.observed);
      const Eigen::VectorXd& logpi =
          tmpl.stationary() ? stationary_logpi : tmpl.log_pi(d);
      for (int k = 0; k < K; ++k) logp[k] = scores[k](g) + logpi[k];
      resp.row(d) = log_softmax(logp).array().exp().transpose();
    }
  }
  return resp;
}

namespace {

/// Per-(pattern, class) conditional factors for imputation.
struct ConditionalFactors {
  Eigen::MatrixXd gain;  // Lambda_mm^{-1} Lambda_mo
  Eigen::MatrixXd S;     // Lambda_mm^{-1}
  Eigen::VectorXd mu_o;
  Eigen::VectorXd mu_m;
};

ConditionalFactors conditional_factors(const GaussWishartParams& q,
                                       const MissingPattern& pattern,
                                       int class_index) {
  const auto& o = pattern.observed;
  const auto& m = pattern.missing;
  const auto Mm = static_cast<Eigen::Index>(m.size());
  const auto Mo = static_cast<Eigen::Index>(o.size());
  const Eigen::MatrixXd Lambda = q.nu * q.V;

  ConditionalFactors f;
  f.mu_o.resize(Mo);
  f.mu_m.resize(Mm);
  Eigen::MatrixXd L_mm(Mm, Mm), L_mo(Mm, Mo);
  for (Eigen::Index i = 0; i < Mm; ++i) {
    f.mu_m[i] = q.mu[m[i]];
    for (Eigen::Index j = 0; j < Mm; ++j) L_mm(i, j) = Lambda(m[i], m[j]);
    for (Eigen::Index j = 0; j < Mo; ++j) L_mo(i, j) = Lambda(m[i], o[j]);
  }
  for (Eigen::Index j = 0; j < Mo; ++j) f.mu_o[j] = q.mu[o[j]];
  try {
    const CholSpd chol = chol_spd(L_mm, "Lambda_mm");
    f.gain = chol.solve(L_mo);
    f.S = chol.inverse();
    f.S = 0.5 * (f.S + f.S.transpose()).eval();
  } catch (const NumericalError&) {
    throw NumericalError("singular missing-block precision for pattern mask " +
                         std::to_string(pattern.mask) + ", class " +
                         std::to_string(class_index));
  }
  return f;
}

}  // namespace

SuffStats impute_moments(const MultiChannelVolume& vol,
                         const std::vector<GaussWishartParams>& gw,
                         const Eigen::MatrixXd& resp,
                         const std::vector<PatternGroup>& groups,
                         bool include_all_missing) {
  const int K = static_cast<int>(gw.size());
  const int M = vol.channels;
  if (resp.rows() != vol.voxel_count() || resp.cols() != K)
    throw ValidationError("responsibility matrix shape mismatch");

  SuffStats stats;
  stats.counts = Eigen::VectorXd::Zero(K);
  stats.first.assign(K, Eigen::VectorXd::Zero(M));
  stats.second.assign(K, Eigen::MatrixXd::Zero(M, M));

  Eigen::VectorXd xhat(M);
  Eigen::MatrixXd xxhat(M, M);
  for (const auto& grp : groups) {
    const auto& o = grp.pattern.observed;
    const auto& m = grp.pattern.missing;
    if (o.empty() && !include_all_missing) continue;
    if (m.empty()) {
      // fully observed: plain weighted moments
      for (const auto d : grp.voxels) {
        const Eigen::VectorXd g = gather_observed(vol, d, o);
        for (int k = 0; k < K; ++k) {
          const double z = resp(d, k);
          stats.counts[k] += z;
          stats.first[k] += z * g;
          stats.second[k] += z * (g * g.transpose());
        }
      }
      continue;
    }
    for (int k = 0; k < K; ++k) {
      const ConditionalFactors f = conditional_factors(gw[k], grp.pattern, k);
      for (const auto d : grp.voxels) {
        const double z = resp(d, k);
        const Eigen::VectorXd g = gather_observed(vol, d, o);
        const Eigen::VectorXd h =
            f.mu_m - f.gain * (g - f.mu_o);
        for (std::size_t i = 0; i < o.size(); ++i) xhat[o[i]] = g[i];
        for (std::size_t i = 0; i < m.size(); ++i) xhat[m[i]] = h[i];
        xxhat.noalias() = xhat * xhat.transpose();
        for (std::size_t i = 0; i < m.size(); ++i)
          for (std::size_t j = 0; j < m.size(); ++j)
            xxhat(m[i], m[j]) += f.S(i, j);
        stats.counts[k] += z;
        stats.first[k] += z * xhat;
        stats.second[k] += z * xxhat;
      }
    }
  }
  for (int k = 0; k < K; ++k)
    stats.second[k] = 0.5 * (stats.second[k] + stats.second[k].transpose());
  return stats;
}

std::vector<GaussWishartParams> update_gauss_wishart(
    const SuffStats& stats, const std::vector<GaussWishartParams>& hyper,
    Eq16Variant variant) {
  const int K = static_cast<int>(hyper.size());
  std::vector<GaussWishartParams> out(K);
  for (int k = 0; k < K; ++k) {
    const auto& p = hyper[k];
    const double n = stats.counts[k];
    if (n <= 0.0 && variant == Eq16Variant::Standard) {
      out[k] = p;  // conjugate no-data limit
      continue;
    }
    GaussWishartParams q;
    q.b = p.b + n;
    q.nu = p.nu + n;
    q.mu = (p.b * p.mu + stats.first[k]) / q.b;
    const Eigen::MatrixXd prior_inv = chol_spd(p.V, "V0").inverse();
    Eigen::MatrixXd Vinv =
        (variant == Eq16Variant::AsWritten ? p.nu * prior_inv : prior_inv) +
        stats.second[k] + p.b * (p.mu * p.mu.transpose()) -
        q.b * (q.mu * q.mu.transpose());
    Vinv = 0.5 * (Vinv + Vinv.transpose()).eval();
    q.V = chol_spd(Vinv, "posterior scale inverse").inverse();
    q.V = 0.5 * (q.V + q.V.transpose()).eval();
    out[k] = std::move(q);
  }
  return out;
}

Eigen::VectorXd update_omega(const Eigen::MatrixXd& resp,
                             const TemplatePrior& tmpl) {
  const int K = tmpl.num_classes();
  const std::int64_t D = resp.rows();
  const Eigen::VectorXd mass = resp.colwise().sum();

  Eigen::VectorXd omega(K);
  if (tmpl.stationary()) {
    // Closed form: softmax(omega + a) must match the responsibility means.
    for (int k = 0; k < K; ++k) {
      const double mean = mass[k] / static_cast<double>(D);
      omega[k] = std::log(std::max(mean, 1e-6)) - tmpl.logits(0, k);
    }
    omega.array() -= omega.maxCoeff();
    omega = omega.cwiseMax(kOmegaFloor);
    return omega;
  }

  // Spatial template: one fixed-point step, kept only if it does not
  // decrease the categorical ELBO term.
  Eigen::VectorXd pi_mass = Eigen::VectorXd::Zero(K);
  for (std::int64_t d = 0; d < D; ++d) pi_mass += tmpl.pi(d);
  Eigen::VectorXd proposal = tmpl.omega;
  for (int k = 0; k < K; ++k)
    proposal[k] += std::log(std::max(mass[k], 1e-12)) -
                   std::log(std::max(pi_mass[k], 1e-12));
  proposal.array() -= proposal.maxCoeff();
  proposal = proposal.cwiseMax(kOmegaFloor);

  TemplatePrior trial = tmpl;
  trial.omega = proposal;
  double before = 0.0, after = 0.0;
  for (std::int64_t d = 0; d < D; ++d) {
    before += resp.row(d).dot(tmpl.log_pi(d).transpose());
    after += resp.row(d).dot(trial.log_pi(d).transpose());
  }
  return after >= before ? proposal : tmpl.omega;
}

ElboTerms elbo(const MultiChannelVolume& vol, const TemplatePrior& tmpl,
               const std::vector<GaussWishartParams>& gw,
               const Eigen::MatrixXd& resp,
               const std::vector<GaussWishartParams>& hyper, ElboForm form,
               const std::vector<PatternGroup>& groups) {
  const int K = static_cast<int>(gw.size());
  const int M = vol.channels;
  ElboTerms t;
  for (int k = 0; k < K; ++k)
    t.kl_gauss_wishart += kl_gauss_wishart(gw[k], hyper[k]);

  const Eigen::VectorXd stationary_logpi =
      tmpl.stationary() ? tmpl.log_pi(0) : Eigen::VectorXd();
  for (const auto& grp : groups) {
    if (grp.pattern.observed.empty()) continue;
    for (const auto d : grp.voxels) {
      const Eigen::VectorXd& logpi =
          tmpl.stationary() ? stationary_logpi : tmpl.log_pi(d);
      for (int k = 0; k < K; ++k) {
        const double z = resp(d, k);
        if (z > 0.0) t.kl_z += z * (std::log(z) - logpi[k]);
      }
    }
  }

  if (form == ElboForm::ObservedData) {
    for (const auto& grp : groups) {
      if (grp.pattern.observed.empty()) continue;
      for (int k = 0; k < K; ++k) {
        const ObservedScore score = observed_score(gw[k], grp.pattern);
        for (const auto d : grp.voxels)
          t.expected_loglik +=
              resp(d, k) *
              score(gather_observed(vol, d, grp.pattern.observed));
      }
    }
    return t;
  }

  // Full-data form: sufficient-statistics route plus the imputation KL.
  const SuffStats stats =
      impute_moments(vol, gw, resp, groups, /*include_all_missing=*/false);
  for (int k = 0; k < K; ++k) {
    const double n = stats.counts[k];
    const auto& q = gw[k];
    const double logdet_V = chol_spd(q.V, "V").log_det;
    const Eigen::MatrixXd Lambda = q.nu * q.V;
    const Eigen::MatrixXd centered =
        stats.second[k] - stats.first[k] * q.mu.transpose() -
        q.mu * stats.first[k].transpose() + n * (q.mu * q.mu.transpose());
    t.expected_loglik += 0.5 * n * elogdet_precision(q, logdet_V) -
                         n * M / (2.0 * q.b) - 0.5 * n * M * kLn2Pi -
                         0.5 * (Lambda.cwiseProduct(centered)).sum();
  }
  for (const auto& grp : groups) {
    const auto& m = grp.pattern.missing;
    if (grp.pattern.observed.empty() || m.empty()) continue;
    const auto Mm = static_cast<int>(m.size());
    double grp_mass_k;
    for (int k = 0; k < K; ++k) {
      grp_mass_k = 0.0;
      for (const auto d : grp.voxels) grp_mass_k += resp(d, k);
      Eigen::MatrixXd V_mm(Mm, Mm);
      for (int i = 0; i < Mm; ++i)
        for (int j = 0; j < Mm; ++j) V_mm(i, j) = gw[k].V(m[i], m[j]);
      const double logdet_mm = chol_spd(V_mm, "V_mm").log_det;
      // negative entropy of the per-voxel imputation Gaussian
      const double per_unit =
          0.5 * (Mm * std::log(gw[k].nu) + logdet_mm) -
          0.5 * Mm * (1.0 + kLn2Pi);
      t.kl_missing += grp_mass_k * per_unit;
    }
  }
  return t;
}

ElboTerms elbo(const MultiChannelVolume& vol, const TemplatePrior& tmpl,
               const std::vector<GaussWishartParams>& gw,
               const Eigen::MatrixXd& resp,
               const std::vector<GaussWishartParams>& hyper, ElboForm form) {
  return elbo(vol, tmpl, gw, resp, hyper, form, group_by_pattern(vol));
}

std::pair<SubjectPosterior, ElboTrace> fit_subject(
    const MultiChannelVolume& vol,
    const std::vector<GaussWishartParams>& hyper, const TemplatePrior& tmpl,
    const FitOptions& options) {
  if (options.max_iters < 1)
    throw ValidationError("fit requires max_iters >= 1");
  if (!(options.elbo_rel_tol > 0.0))
    throw ValidationError("fit requires a positive tolerance");
  vol.validate();
  const std::int64_t D = vol.voxel_count();
  tmpl.validate(D);
  const int K = static_cast<int>(hyper.size());
  if (tmpl.num_classes() != K)
    throw ValidationError("template classes do not match hyperprior count");
  for (const auto& h : hyper) {
    h.validate();
    if (h.dim() != vol.channels)
      throw ValidationError("hyperprior dimension does not match channels");
  }

  const auto groups = group_by_pattern(vol);
  TemplatePrior local = tmpl;

  SubjectPosterior post;
  post.gw = hyper;
  post.resp.resize(D, K);
  for (std::int64_t d = 0; d < D; ++d)
    post.resp.row(d) = local.pi(d).transpose();

  ElboTrace trace;
  for (int it = 0; it < options.max_iters; ++it) {
    post.resp = update_responsibilities(vol, local, post.gw, groups);
    const SuffStats stats = impute_moments(vol, post.gw, post.resp, groups,
                                           /*include_all_missing=*/false);
    post.gw = update_gauss_wishart(stats, hyper, options.eq16);
    if (options.update_omega) local.omega = update_omega(post.resp, local);

    trace.iterations.push_back(
        elbo(vol, local, post.gw, post.resp, hyper, ElboForm::ObservedData,
             groups));
    const auto n = trace.iterations.size();
    if (n >= 2) {
      const double cur = trace.iterations[n - 1].total();
      const double prev = trace.iterations[n - 2].total();
      if (std::abs(cur - prev) <=
          options.elbo_rel_tol * std::max(1.0, std::abs(cur)))
        break;
    }
  }
  post.omega = local.omega;
  return {std::move(post), std::move(trace)};
}

}  // namespace vbmix
