#include "vbmix/population.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <thread>

#include <nlohmann/json.hpp>

#include "vbmix/errors.hpp"

namespace vbmix {

using json = nlohmann::json;

namespace {
constexpr double kB0Min = 1e-6;
constexpr double kB0Max = 1e8;

void check_posteriors(
    const std::vector<std::vector<GaussWishartParams>>& posteriors) {
  if (posteriors.empty())
    throw ValidationError("hyper update needs at least one subject");
  const std::size_t K = posteriors.front().size();
  for (const auto& subj : posteriors)
    if (subj.size() != K)
      throw ValidationError("subjects disagree on class count");
}

}  // namespace

void TrainedModel::validate() const {
  if (num_classes < 1) throw ValidationError("model needs K >= 1");
  if (channels < 1) throw ValidationError("model needs M >= 1");
  if (static_cast<int>(hyper.size()) != num_classes)
    throw ValidationError("model hyper count does not match K");
  for (const auto& h : hyper) {
    h.validate();
    if (h.dim() != channels)
      throw ValidationError("model hyper dimension does not match M");
  }
  if (tmpl.num_classes() != num_classes)
    throw ValidationError("model template classes do not match K");
}

std::vector<Eigen::VectorXd> update_mu0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors) {
  check_posteriors(posteriors);
  const int K = static_cast<int>(posteriors.front().size());
  const int M = posteriors.front().front().dim();
  std::vector<Eigen::VectorXd> mu0(K);
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(M, M);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(M);
    for (const auto& subj : posteriors) {
      const auto& q = subj[k];
      const Eigen::MatrixXd w = q.nu * q.V;
      prec += w;
      rhs += w * q.mu;
    }
    mu0[k] = chol_spd(prec, "accumulated precision").solve(rhs);
  }
  return mu0;
}

std::vector<double> update_b0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::VectorXd>& mu0) {
  check_posteriors(posteriors);
  const int K = static_cast<int>(posteriors.front().size());
  const int M = posteriors.front().front().dim();
  const auto N = static_cast<double>(posteriors.size());
  std::vector<double> b0(K);
  for (int k = 0; k < K; ++k) {
    double inv = 0.0;
    for (const auto& subj : posteriors) {
      const auto& q = subj[k];
      const Eigen::VectorXd d = mu0[k] - q.mu;
      inv += q.nu * d.dot(q.V * d);
    }
    inv /= N * M;
    b0[k] = std::clamp(inv > 0.0 ? 1.0 / inv : kB0Max, kB0Min, kB0Max);
  }
  return b0;
}

std::vector<double> update_b0_exact(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::VectorXd>& mu0) {
  check_posteriors(posteriors);
  const int K = static_cast<int>(posteriors.front().size());
  const int M = posteriors.front().front().dim();
  const auto N = static_cast<double>(posteriors.size());
  std::vector<double> b0(K);
  for (int k = 0; k < K; ++k) {
    double inv = 0.0;
    for (const auto& subj : posteriors) {
      const auto& q = subj[k];
      const Eigen::VectorXd d = mu0[k] - q.mu;
      // E_q[(mu0 - mu)^T Lambda (mu0 - mu)] under the Gauss-Wishart
      // posterior: the scatter quadratic plus the M/b mean-uncertainty term
      // that keeps b0 finite when all subject means coincide.
      inv += q.nu * d.dot(q.V * d) + M / q.b;
    }
    inv /= N * M;
    b0[k] = std::clamp(1.0 / inv, kB0Min, kB0Max);
  }
  return b0;
}

std::vector<Eigen::MatrixXd> update_V0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<double>& nu0) {
  check_posteriors(posteriors);
  const int K = static_cast<int>(posteriors.front().size());
  const int M = posteriors.front().front().dim();
  const auto N = static_cast<double>(posteriors.size());
  std::vector<Eigen::MatrixXd> V0(K);
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(M, M);
    for (const auto& subj : posteriors) acc += subj[k].nu * subj[k].V;
    acc /= N * nu0[k];
    V0[k] = 0.5 * (acc + acc.transpose());
  }
  return V0;
}

double nu0_objective(const std::vector<GaussWishartParams>& class_posteriors,
                     const Eigen::MatrixXd& V0, double nu0) {
  const int M = static_cast<int>(V0.rows());
  const double logdet_V0 = chol_spd(V0, "V0").log_det;
  double L = 0.0;
  for (const auto& q : class_posteriors) {
    const double logdet = chol_spd(q.V, "posterior scale").log_det;
    L += 0.5 * nu0 * (logdet - logdet_V0) +
         0.5 * nu0 * multivariate_digamma(0.5 * q.nu, M);
  }
  L -= class_posteriors.size() * multivariate_lgamma(0.5 * nu0, M);
  return L;
}

double nu0_gradient(const std::vector<GaussWishartParams>& class_posteriors,
                    const Eigen::MatrixXd& V0, double nu0) {
  const int M = static_cast<int>(V0.rows());
  const double logdet_V0 = chol_spd(V0, "V0").log_det;
  double g = 0.0;
  for (const auto& q : class_posteriors) {
    const double logdet = chol_spd(q.V, "posterior scale").log_det;
    g += 0.5 * (logdet - logdet_V0 + multivariate_digamma(0.5 * q.nu, M));
  }
  g -= 0.5 * class_posteriors.size() * multivariate_digamma(0.5 * nu0, M);
  if (!std::isfinite(g))
    throw NumericalError("non-finite gradient in nu0 update");
  return g;
}

std::vector<double> update_nu0(
    const std::vector<std::vector<GaussWishartParams>>& posteriors,
    const std::vector<Eigen::MatrixXd>& V0, const std::vector<double>& nu0_init,
    int max_newton_iters, double tol) {
  check_posteriors(posteriors);
  const int K = static_cast<int>(posteriors.front().size());
  const int M = posteriors.front().front().dim();
  const auto N = static_cast<double>(posteriors.size());
  std::vector<double> nu0(K);
  for (int k = 0; k < K; ++k) {
    std::vector<GaussWishartParams> slice;
    slice.reserve(posteriors.size());
    for (const auto& subj : posteriors) slice.push_back(subj[k]);

    if (!(nu0_init[k] > M - 1))
      throw ValidationError("nu0 initial value must exceed M - 1");
    double theta = std::log(nu0_init[k] - (M - 1));
    double nu = nu0_init[k];
    for (int it = 0; it < max_newton_iters; ++it) {
      const double g = nu0_gradient(slice, V0[k], nu);
      if (std::abs(g) < tol) break;
      const double h = -0.25 * N * multivariate_trigamma(0.5 * nu, M);
      const double e = std::exp(theta);
      const double g_theta = g * e;
      const double h_theta = h * e * e + g * e;
      double step = h_theta < 0.0 ? -g_theta / h_theta
                                  : (g_theta > 0.0 ? 0.5 : -0.5);
      // backtrack onto ascent
      const double f0 = nu0_objective(slice, V0[k], nu);
      for (int bt = 0; bt < 40; ++bt) {
        const double cand_nu = (M - 1) + std::exp(theta + step);
        if (std::isfinite(cand_nu) &&
            nu0_objective(slice, V0[k], cand_nu) >= f0) {
          theta += step;
          nu = cand_nu;
          break;
        }
        step *= 0.5;
      }
    }
    nu0[k] = nu;
  }
  return nu0;
}

std::vector<GaussWishartParams> init_hyper(const MultiChannelVolume& first,
                                           int K) {
  const int M = first.channels;
  const std::int64_t D = first.voxel_count();
  std::vector<GaussWishartParams> hyper(K);

  std::vector<std::vector<float>> observed(M);
  for (int c = 0; c < M; ++c) {
    observed[c].reserve(D);
    for (std::int64_t d = 0; d < D; ++d) {
      const float v = first.at(d, c);
      if (std::isfinite(v)) observed[c].push_back(v);
    }
    if (observed[c].empty())
      throw ValidationError("channel " + std::to_string(c) +
                            " has no observed intensities in the first "
                            "training subject");
    std::sort(observed[c].begin(), observed[c].end());
  }

  Eigen::VectorXd var(M);
  for (int c = 0; c < M; ++c) {
    double mean = 0.0;
    for (float v : observed[c]) mean += v;
    mean /= observed[c].size();
    double ss = 0.0;
    for (float v : observed[c]) ss += (v - mean) * (v - mean);
    var[c] = std::max(ss / observed[c].size(), 1e-6);
  }

  const double nu0 = M + 1;
  const double spread = std::pow(static_cast<double>(K), 2.0 / M);
  for (int k = 0; k < K; ++k) {
    GaussWishartParams h;
    h.mu.resize(M);
    for (int c = 0; c < M; ++c) {
      // quantile-spaced seeds over the pooled observed intensities
      const double q = (k + 0.5) / K;
      const auto idx = static_cast<std::size_t>(
          q * static_cast<double>(observed[c].size() - 1));
      h.mu[c] = observed[c][idx];
    }
    h.b = 1.0;
    h.nu = nu0;
    h.V = Eigen::MatrixXd::Zero(M, M);
    for (int c = 0; c < M; ++c) h.V(c, c) = spread / (var[c] * nu0);
    hyper[k] = std::move(h);
  }
  return hyper;
}

namespace {

struct SubjectState {
  Eigen::MatrixXd resp;
  std::vector<GaussWishartParams> gw;
  std::vector<PatternGroup> groups;
  bool initialized = false;
};

void vem_sweeps(const MultiChannelVolume& vol,
                const std::vector<GaussWishartParams>& hyper,
                const TemplatePrior& tmpl, SubjectState& state, int sweeps,
                Eq16Variant variant) {
  const std::int64_t D = vol.voxel_count();
  if (!state.initialized) {
    state.groups = group_by_pattern(vol);
    state.resp.resize(D, tmpl.num_classes());
    for (std::int64_t d = 0; d < D; ++d)
      state.resp.row(d) = tmpl.pi(d).transpose();
    state.gw = hyper;
    state.initialized = true;
  }
  for (int it = 0; it < sweeps; ++it) {
    state.resp = update_responsibilities(vol, tmpl, state.gw, state.groups);
    const SuffStats stats =
        impute_moments(vol, state.gw, state.resp, state.groups,
                       /*include_all_missing=*/false);
    state.gw = update_gauss_wishart(stats, hyper, variant);
  }
}

void parallel_over_subjects(std::size_t n, int jobs,
                            const std::function<void(std::size_t)>& fn) {
  const int workers =
      std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1))
          fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Eigen::VectorXd pooled_omega_update(
    const std::vector<MultiChannelVolume>& volumes,
    const std::vector<SubjectState>& states, const TemplatePrior& tmpl) {
  const int K = tmpl.num_classes();
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(K);
  std::int64_t total = 0;
  for (const auto& st : states) {
    mass += st.resp.colwise().sum().transpose();
    total += st.resp.rows();
  }
  if (tmpl.stationary()) {
    Eigen::VectorXd omega(K);
    for (int k = 0; k < K; ++k)
      omega[k] = std::log(std::max(mass[k] / total, 1e-6)) - tmpl.logits(0, k);
    omega.array() -= omega.maxCoeff();
    return omega.cwiseMax(std::log(1e-6));
  }
  // Spatial template: accepted-or-rejected fixed-point step on pooled counts.
  Eigen::VectorXd pi_mass = Eigen::VectorXd::Zero(K);
  for (const auto& vol : volumes) {
    const std::int64_t D = vol.voxel_count();
    for (std::int64_t d = 0; d < D; ++d) pi_mass += tmpl.pi(d);
  }
  Eigen::VectorXd proposal = tmpl.omega;
  for (int k = 0; k < K; ++k)
    proposal[k] += std::log(std::max(mass[k], 1e-12)) -
                   std::log(std::max(pi_mass[k], 1e-12));
  proposal.array() -= proposal.maxCoeff();
  proposal = proposal.cwiseMax(std::log(1e-6));

  TemplatePrior trial = tmpl;
  trial.omega = proposal;
  double before = 0.0, after = 0.0;
  for (std::size_t n = 0; n < volumes.size(); ++n) {
    const std::int64_t D = volumes[n].voxel_count();
    for (std::int64_t d = 0; d < D; ++d) {
      before += states[n].resp.row(d).dot(tmpl.log_pi(d).transpose());
      after += states[n].resp.row(d).dot(trial.log_pi(d).transpose());
    }
  }
  return after >= before ? proposal : tmpl.omega;
}

}  // namespace

TrainResult train_population(const std::vector<MultiChannelVolume>& volumes,
                             const TemplatePrior& tmpl, int K,
                             const TrainOptions& options) {
  if (volumes.empty()) throw ValidationError("training needs >= 1 volume");
  const int M = volumes.front().channels;
  for (const auto& v : volumes) {
    v.validate();
    if (v.channels != M)
      throw ValidationError("training volumes disagree on channel count");
  }
  if (options.outer_iters < 1)
    throw ValidationError("training needs outer_iters >= 1");

  TemplatePrior local = tmpl;
  local.validate(volumes.front().voxel_count());
  if (local.num_classes() != K)
    throw ValidationError("template classes do not match K");

  std::vector<GaussWishartParams> hyper = init_hyper(volumes.front(), K);
  std::vector<SubjectState> states(volumes.size());

  TrainResult result;
  for (int outer = 0; outer < options.outer_iters; ++outer) {
    parallel_over_subjects(volumes.size(), options.jobs, [&](std::size_t n) {
      vem_sweeps(volumes[n], hyper, local, states[n],
                 options.inner.max_iters, options.inner.eq16);
    });

    std::vector<std::vector<GaussWishartParams>> posteriors;
    posteriors.reserve(volumes.size());
    for (const auto& st : states) posteriors.push_back(st.gw);

    const auto mu0 = update_mu0(posteriors);
    // The exact coordinate maximizer (with the M/b term) keeps the combined
    // bound non-decreasing; the scatter-only variant stays available as the
    // standalone update_b0 op.
    const auto b0 = update_b0_exact(posteriors, mu0);
    std::vector<double> nu0(K);
    std::vector<Eigen::MatrixXd> V0(K);
    for (int k = 0; k < K; ++k) {
      nu0[k] = hyper[k].nu;
      V0[k] = hyper[k].V;
    }
    // nu0 and V0 are coupled; alternate the pair twice
    for (int round = 0; round < 2; ++round) {
      nu0 = update_nu0(posteriors, V0, nu0, options.nu0_newton_iters,
                       options.nu0_tol);
      V0 = update_V0(posteriors, nu0);
    }
    for (int k = 0; k < K; ++k) {
      hyper[k].mu = mu0[k];
      hyper[k].b = b0[k];
      hyper[k].nu = nu0[k];
      hyper[k].V = V0[k];
    }

    local.omega = pooled_omega_update(volumes, states, local);

    double combined = 0.0;
    for (std::size_t n = 0; n < volumes.size(); ++n)
      combined += elbo(volumes[n], local, states[n].gw, states[n].resp, hyper,
                       ElboForm::ObservedData, states[n].groups)
                      .total();
    result.combined_elbo.push_back(combined);
  }

  result.model.num_classes = K;
  result.model.channels = M;
  result.model.hyper = std::move(hyper);
  result.model.tmpl = std::move(local);
  result.model.metadata.outer_iterations = options.outer_iters;
  result.model.metadata.final_elbo = result.combined_elbo.back();
  return result;
}

// --- serialization ---------------------------------------------------------

std::string model_to_json(const TrainedModel& model) {
  model.validate();
  json j;
  j["version"] = 1;
  j["K"] = model.num_classes;
  j["M"] = model.channels;
  j["omega"] = std::vector<double>(
      model.tmpl.omega.data(), model.tmpl.omega.data() + model.tmpl.omega.size());
  json hyper = json::array();
  for (const auto& h : model.hyper) {
    json e;
    e["mu0"] = std::vector<double>(h.mu.data(), h.mu.data() + h.mu.size());
    e["b0"] = h.b;
    e["nu0"] = h.nu;
    json V = json::array();
    for (int r = 0; r < h.V.rows(); ++r) {
      json row = json::array();
      for (int c = 0; c < h.V.cols(); ++c) row.push_back(h.V(r, c));
      V.push_back(row);
    }
    e["V0"] = V;
    hyper.push_back(e);
  }
  j["hyper"] = hyper;
  json tj;
  if (model.tmpl.stationary()) {
    tj["type"] = "stationary";
    tj["logits"] = std::vector<double>(
        model.tmpl.logits.data(),
        model.tmpl.logits.data() + model.tmpl.logits.size());
  } else {
    throw ValidationError(
        "spatial templates are serialized by reference; save the logits "
        "volume separately and use type=map");
  }
  j["template"] = tj;
  j["metadata"] = {{"outer_iterations", model.metadata.outer_iterations},
                   {"final_elbo", model.metadata.final_elbo}};
  return j.dump(2) + "\n";
}

TrainedModel model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed model JSON: ") + e.what());
  }
  TrainedModel model;
  try {
    if (j.at("version").get<int>() != 1)
      throw ValidationError("unsupported model version");
    model.num_classes = j.at("K").get<int>();
    model.channels = j.at("M").get<int>();
    const auto omega = j.at("omega").get<std::vector<double>>();
    model.tmpl.omega =
        Eigen::Map<const Eigen::VectorXd>(omega.data(), omega.size());
    model.hyper.clear();
    for (const auto& e : j.at("hyper")) {
      GaussWishartParams h;
      const auto mu = e.at("mu0").get<std::vector<double>>();
      h.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), mu.size());
      h.b = e.at("b0").get<double>();
      h.nu = e.at("nu0").get<double>();
      const auto& V = e.at("V0");
      h.V.resize(V.size(), V.size());
      for (std::size_t r = 0; r < V.size(); ++r)
        for (std::size_t c = 0; c < V[r].size(); ++c)
          h.V(r, c) = V[r][c].get<double>();
      model.hyper.push_back(std::move(h));
    }
    const auto& tj = j.at("template");
    const auto type = tj.at("type").get<std::string>();
    if (type == "stationary") {
      if (tj.contains("logits")) {
        const auto logits = tj.at("logits").get<std::vector<double>>();
        model.tmpl.logits = Eigen::Map<const Eigen::RowVectorXd>(
            logits.data(), logits.size());
      } else {
        model.tmpl.logits = Eigen::MatrixXd::Zero(1, model.num_classes);
      }
    } else {
      throw ValidationError("unsupported template type: " + type);
    }
    if (j.contains("metadata")) {
      const auto& mj = j.at("metadata");
      model.metadata.outer_iterations =
          mj.value("outer_iterations", 0);
      model.metadata.final_elbo = mj.value("final_elbo", 0.0);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed model JSON: ") + e.what());
  }
  model.validate();
  return model;
}

void save_model(const TrainedModel& model, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write model to " + path);
  f << model_to_json(model);
}

TrainedModel load_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open model " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return model_from_json(text);
}

}  // namespace vbmix
