#include "vbmix/translate.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <thread>

#include "vbmix/rng.hpp"

#include "vbmix/errors.hpp"

namespace vbmix {

namespace {

double elapsed_seconds(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

void run_parallel(std::size_t n, int jobs,
                  const std::function<void(std::size_t)>& fn) {
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
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

}  // namespace

PredictionResult predict_missing(const MultiChannelVolume& vol,
                                 const SubjectPosterior& posterior) {
  const std::int64_t D = vol.voxel_count();
  const int K = static_cast<int>(posterior.gw.size());
  if (posterior.resp.rows() != D || posterior.resp.cols() != K)
    throw ValidationError("posterior does not match volume");
  for (const auto& q : posterior.gw)
    if (q.dim() != vol.channels)
      throw ValidationError("posterior dimension does not match channels");

  PredictionResult out;
  out.completed = vol;
  out.variance = vol;
  std::fill(out.variance.data.begin(), out.variance.data.end(), 0.0f);

  const auto groups = group_by_pattern(vol);
  for (const auto& grp : groups) {
    const auto& o = grp.pattern.observed;
    const auto& m = grp.pattern.missing;
    if (m.empty()) continue;
    const auto Mm = static_cast<int>(m.size());

    // per-class conditional factors, computed once per pattern
    struct Factors {
      Eigen::MatrixXd gain;   // Lambda_mm^{-1} Lambda_mo
      Eigen::VectorXd s_diag; // diagonal of Lambda_mm^{-1}
      Eigen::VectorXd mu_o, mu_m;
    };
    std::vector<Factors> factors(K);
    for (int k = 0; k < K; ++k) {
      const auto& q = posterior.gw[k];
      const Eigen::MatrixXd Lambda = q.nu * q.V;
      Factors f;
      f.mu_o.resize(o.size());
      f.mu_m.resize(Mm);
      for (std::size_t i = 0; i < o.size(); ++i) f.mu_o[i] = q.mu[o[i]];
      for (int i = 0; i < Mm; ++i) f.mu_m[i] = q.mu[m[i]];
      Eigen::MatrixXd L_mm(Mm, Mm), L_mo(Mm, o.size());
      for (int i = 0; i < Mm; ++i) {
        for (int j = 0; j < Mm; ++j) L_mm(i, j) = Lambda(m[i], m[j]);
        for (std::size_t j = 0; j < o.size(); ++j)
          L_mo(i, j) = Lambda(m[i], o[j]);
      }
      const CholSpd chol = chol_spd(L_mm, "Lambda_mm");
      f.gain = chol.solve(L_mo);
      f.s_diag = chol.inverse().diagonal();
      factors[k] = std::move(f);
    }

    Eigen::VectorXd g(o.size()), mean(Mm), second(Mm), h(Mm);
    for (const auto d : grp.voxels) {
      for (std::size_t i = 0; i < o.size(); ++i) g[i] = vol.at(d, o[i]);
      mean.setZero();
      second.setZero();
      for (int k = 0; k < K; ++k) {
        const double z = posterior.resp(d, k);
        if (z == 0.0) continue;
        const auto& f = factors[k];
        h = f.mu_m - f.gain * (g - f.mu_o);
        mean += z * h;
        second += z * (f.s_diag + h.cwiseProduct(h));
      }
      for (int i = 0; i < Mm; ++i) {
        out.completed.at(d, m[i]) = static_cast<float>(mean[i]);
        out.variance.at(d, m[i]) =
            static_cast<float>(second[i] - mean[i] * mean[i]);
      }
    }
  }
  return out;
}

PsnrResult psnr(const MultiChannelVolume& reference,
                const MultiChannelVolume& predicted, int channel) {
  if (reference.dims != predicted.dims ||
      reference.channels != predicted.channels)
    throw ValidationError("psnr: volumes have different shapes");
  if (channel < 0 || channel >= reference.channels)
    throw ValidationError("psnr: channel out of range");
  const std::int64_t D = reference.voxel_count();
  PsnrResult r;
  double maxval = -std::numeric_limits<double>::infinity();
  double sse = 0.0;
  for (std::int64_t d = 0; d < D; ++d) {
    const double ref = reference.at(d, channel);
    const double pred = predicted.at(d, channel);
    if (!std::isfinite(ref))
      throw ValidationError("psnr: reference channel has missing entries");
    if (!std::isfinite(pred))
      throw ValidationError("psnr: prediction has missing entries");
    maxval = std::max(maxval, ref);
    const double e = pred - ref;
    sse += e * e;
  }
  r.maxval = maxval;
  r.mse = sse / static_cast<double>(D);
  if (r.mse == 0.0) {
    r.infinite = true;
    r.db = std::numeric_limits<double>::infinity();
  } else {
    r.db = 10.0 * std::log10(maxval * maxval / r.mse);
  }
  return r;
}

namespace {

EvalRow score_channel(const std::string& experiment,
                      const std::string& subject, int channel,
                      const std::string& condition,
                      const MultiChannelVolume& reference,
                      const MultiChannelVolume& completed, double seconds) {
  EvalRow row;
  row.experiment = experiment;
  row.subject = subject;
  row.channel = channel;
  row.condition = condition;
  row.score = psnr(reference, completed, channel);
  row.seconds = seconds;
  return row;
}

std::string subject_name(std::size_t n) {
  std::ostringstream os;
  os << "subject_" << n;
  return os.str();
}

}  // namespace

EvalReport run_fov_experiment(const TrainedModel& model,
                              const std::vector<MultiChannelVolume>& volumes,
                              const std::vector<int>& channels,
                              const std::vector<double>& fractions,
                              const ExperimentOptions& options) {
  model.validate();
  if (volumes.empty())
    throw ValidationError("fov experiment needs >= 1 volume");
  for (int c : channels)
    if (c < 0 || c >= model.channels)
      throw ValidationError("fov experiment channel out of range");

  // rows in deterministic (fraction, subject, channel) order
  std::vector<std::vector<EvalRow>> per_subject(volumes.size() *
                                                fractions.size());
  run_parallel(
      volumes.size() * fractions.size(), options.jobs, [&](std::size_t idx) {
        const std::size_t fi = idx / volumes.size();
        const std::size_t n = idx % volumes.size();
        const double fraction = fractions[fi];
        const auto start = std::chrono::steady_clock::now();

        MultiChannelVolume masked = volumes[n];
        for (int c : channels)
          masked = apply_fov_mask(masked, c, fraction, options.scheme,
                                  mix_seed(options.seed, idx));
        auto [post, trace] =
            fit_subject(masked, model.hyper, model.tmpl, options.fit);
        const PredictionResult pred = predict_missing(masked, post);
        const double secs = elapsed_seconds(start);

        std::ostringstream cond;
        cond << fraction;
        for (int c : channels)
          per_subject[idx].push_back(score_channel(
              "fov", subject_name(n), c, cond.str(), volumes[n],
              pred.completed, secs));
      });

  EvalReport report;
  for (const auto& rows : per_subject)
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  return report;
}

EvalReport run_dropout_experiment(
    const TrainedModel& model, const std::vector<MultiChannelVolume>& volumes,
    const std::vector<std::vector<int>>& observed_sets,
    const ExperimentOptions& options) {
  model.validate();
  if (volumes.empty())
    throw ValidationError("dropout experiment needs >= 1 volume");
  const int M = model.channels;

  std::vector<std::vector<int>> sets = observed_sets;
  if (sets.empty()) {
    // every nonempty proper subset of channels
    for (std::uint32_t mask = 1; mask + 1 < (1u << M); ++mask) {
      std::vector<int> s;
      for (int c = 0; c < M; ++c)
        if (mask & (1u << c)) s.push_back(c);
      sets.push_back(std::move(s));
    }
  }
  for (auto& s : sets) {
    if (s.empty() || static_cast<int>(s.size()) >= M) {
      if (static_cast<int>(s.size()) == M) continue;  // no missing, no rows
      throw ValidationError("dropout observed set must be nonempty");
    }
    for (int c : s)
      if (c < 0 || c >= M)
        throw ValidationError("dropout observed channel out of range");
  }

  std::vector<std::vector<EvalRow>> buckets(volumes.size() * sets.size());
  run_parallel(
      volumes.size() * sets.size(), options.jobs, [&](std::size_t idx) {
        const std::size_t si = idx / volumes.size();
        const std::size_t n = idx % volumes.size();
        const auto& observed = sets[si];
        if (static_cast<int>(observed.size()) == M) return;

        const auto start = std::chrono::steady_clock::now();
        MultiChannelVolume masked = volumes[n];
        std::vector<bool> keep(M, false);
        for (int c : observed) keep[c] = true;
        const float nan = std::numeric_limits<float>::quiet_NaN();
        for (int c = 0; c < M; ++c) {
          if (keep[c]) continue;
          for (std::int64_t d = 0; d < masked.voxel_count(); ++d)
            masked.at(d, c) = nan;
        }
        auto [post, trace] =
            fit_subject(masked, model.hyper, model.tmpl, options.fit);
        const PredictionResult pred = predict_missing(masked, post);
        const double secs = elapsed_seconds(start);

        std::ostringstream cond;
        cond << "obs:";
        for (std::size_t i = 0; i < observed.size(); ++i)
          cond << (i ? "+" : "") << observed[i];
        for (int c = 0; c < M; ++c)
          if (!keep[c])
            buckets[idx].push_back(score_channel("dropout", subject_name(n),
                                                 c, cond.str(), volumes[n],
                                                 pred.completed, secs));
      });

  EvalReport report;
  for (const auto& rows : buckets)
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  return report;
}

void write_report_csv(const EvalReport& report, std::ostream& out) {
  out << "experiment,subject,channel,fraction_or_set,psnr_db,mse,maxval,"
         "seconds\n";
  for (const auto& row : report.rows) {
    out << row.experiment << ',' << row.subject << ',' << row.channel << ','
        << row.condition << ',';
    if (row.score.infinite)
      out << "inf";
    else
      out << row.score.db;
    out << ',' << row.score.mse << ',' << row.score.maxval << ','
        << row.seconds << '\n';
  }
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::binary);  // keep LF endings everywhere
  if (!f) throw ValidationError("cannot write report to " + path);
  write_report_csv(report, f);
}

}  // namespace vbmix
