#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace vbmix {

/// Multi-channel voxel volume. Data is channel-major (all of channel 0,
/// then channel 1, ...) with voxels in row-major order of (d1,d2,d3).
/// Missingness is encoded in-band: a quiet NaN marks a missing
/// (voxel, channel) entry.
struct MultiChannelVolume {
  std::array<int, 3> dims{0, 0, 0};
  int channels = 0;
  std::vector<float> data;  // size D * channels

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }

  float at(std::int64_t voxel, int channel) const {
    return data[static_cast<std::size_t>(channel) * voxel_count() + voxel];
  }
  float& at(std::int64_t voxel, int channel) {
    return data[static_cast<std::size_t>(channel) * voxel_count() + voxel];
  }
  bool is_missing(std::int64_t voxel, int channel) const {
    return std::isnan(at(voxel, channel));
  }

  /// Throws ValidationError on shape mismatch, infinities, or a volume
  /// with zero finite entries.
  void validate() const;
};

/// Per-voxel partition of channels into observed (o) and missing (m) sets.
struct MissingPattern {
  std::uint32_t mask = 0;          // bit c set == channel c observed
  std::vector<int> observed;
  std::vector<int> missing;

  static MissingPattern from_mask(std::uint32_t mask, int channels);
  bool fully_observed(int channels) const {
    return static_cast<int>(observed.size()) == channels;
  }
};

MissingPattern pattern_of(const MultiChannelVolume& vol, std::int64_t voxel);

/// Volume on disk = <name>.json header + <name>.raw payload of D*M
/// little-endian float32. `path` is the header path or its stem.
MultiChannelVolume read_volume(const std::string& path);
void write_volume(const MultiChannelVolume& vol, const std::string& path);

enum class MaskScheme { SlabInferior, SlabSuperior, Random };

MaskScheme mask_scheme_from_string(const std::string& s);

/// Returns a copy with `fraction` of one channel set missing. Slab schemes
/// remove ceil(fraction * d3) contiguous slices along the third axis;
/// the random scheme removes ceil(fraction * D) uniformly sampled voxels.
MultiChannelVolume apply_fov_mask(const MultiChannelVolume& vol, int channel,
                                  double fraction, MaskScheme scheme,
                                  std::uint64_t seed);

/// Ground-truth generator for synthetic experiments.
struct PhantomSpec {
  std::array<int, 3> dims{0, 0, 0};
  int channels = 0;
  int num_classes = 0;
  std::vector<Eigen::VectorXd> means;        // K x M
  std::vector<Eigen::MatrixXd> covariances;  // K x (M x M), SPD
  // Row-major D x K, or a single row for stationary proportions.
  Eigen::MatrixXd class_probs;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Phantom {
  MultiChannelVolume volume;
  std::vector<int> labels;  // D true class indices
};

Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace vbmix
