#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "vbmix/population.hpp"
#include "vbmix/subject.hpp"

namespace vbmix {

/// Completed volume plus a per-voxel predictive-variance map for the
/// imputed entries (zero at observed entries).
struct PredictionResult {
  MultiChannelVolume completed;
  MultiChannelVolume variance;
};

/// Replace each missing entry by the responsibility-weighted conditional
/// mean; observed entries are copied bit-for-bit.
PredictionResult predict_missing(const MultiChannelVolume& vol,
                                 const SubjectPosterior& posterior);

struct PsnrResult {
  double db = 0.0;
  bool infinite = false;  // exact match (zero MSE)
  double mse = 0.0;
  double maxval = 0.0;
};

/// Peak signal-to-noise ratio over every voxel of one channel; maxval is
/// the reference channel's maximum intensity.
PsnrResult psnr(const MultiChannelVolume& reference,
                const MultiChannelVolume& predicted, int channel);

struct EvalRow {
  std::string experiment;
  std::string subject;
  int channel = 0;
  std::string condition;  // fraction or observed-set descriptor
  PsnrResult score;
  double seconds = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
};

struct ExperimentOptions {
  FitOptions fit;
  MaskScheme scheme = MaskScheme::SlabInferior;
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// Field-of-view experiment: mask a growing fraction of the listed
/// channels, refit, predict, and score against the unmasked originals.
EvalReport run_fov_experiment(const TrainedModel& model,
                              const std::vector<MultiChannelVolume>& volumes,
                              const std::vector<int>& channels,
                              const std::vector<double>& fractions,
                              const ExperimentOptions& options);

/// Contrast-dropout experiment: for each observed-channel subset, drop the
/// complementary channels entirely, refit, predict, and score them.
/// An empty `observed_sets` enumerates every nonempty proper subset.
EvalReport run_dropout_experiment(
    const TrainedModel& model, const std::vector<MultiChannelVolume>& volumes,
    const std::vector<std::vector<int>>& observed_sets,
    const ExperimentOptions& options);

/// CSV schema: experiment,subject,channel,fraction_or_set,psnr_db,mse,
/// maxval,seconds with LF endings and the literal `inf` for exact matches.
void write_report_csv(const EvalReport& report, std::ostream& out);
void write_report_csv(const EvalReport& report, const std::string& path);

}  // namespace vbmix
