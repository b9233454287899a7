#include "vbmix/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "vbmix/errors.hpp"
#include "vbmix/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw payload is little-endian float32");

namespace vbmix {

namespace fs = std::filesystem;
using json = nlohmann::json;

void MultiChannelVolume::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw ValidationError("volume dims must be positive");
  if (channels < 1) throw ValidationError("volume needs at least one channel");
  const auto expect = static_cast<std::size_t>(voxel_count()) * channels;
  if (data.size() != expect)
    throw ValidationError("volume data length " + std::to_string(data.size()) +
                          " does not match dims*channels " +
                          std::to_string(expect));
  bool any_finite = false;
  for (float v : data) {
    if (std::isinf(v))
      throw ValidationError("volume contains an infinite intensity");
    if (std::isfinite(v)) any_finite = true;
  }
  if (!any_finite) throw ValidationError("volume has no finite entries");
}

MissingPattern MissingPattern::from_mask(std::uint32_t mask, int channels) {
  MissingPattern p;
  p.mask = mask;
  for (int c = 0; c < channels; ++c) {
    if (mask & (1u << c))
      p.observed.push_back(c);
    else
      p.missing.push_back(c);
  }
  return p;
}

MissingPattern pattern_of(const MultiChannelVolume& vol, std::int64_t voxel) {
  std::uint32_t mask = 0;
  for (int c = 0; c < vol.channels; ++c)
    if (!vol.is_missing(voxel, c)) mask |= (1u << c);
  return MissingPattern::from_mask(mask, vol.channels);
}

namespace {

std::pair<fs::path, fs::path> volume_paths(const std::string& path) {
  fs::path header(path);
  if (header.extension() == ".raw") header.replace_extension(".json");
  if (header.extension() != ".json") header += ".json";
  fs::path raw = header;
  raw.replace_extension(".raw");
  return {header, raw};
}

}  // namespace

MultiChannelVolume read_volume(const std::string& path) {
  const auto [header_path, raw_path] = volume_paths(path);
  std::ifstream hf(header_path);
  if (!hf) throw ValidationError("cannot open header " + header_path.string());
  json h;
  try {
    hf >> h;
  } catch (const json::exception& e) {
    throw ValidationError("malformed header " + header_path.string() + ": " +
                          e.what());
  }
  MultiChannelVolume vol;
  try {
    auto d = h.at("dims");
    if (!d.is_array() || d.size() != 3)
      throw ValidationError("header dims must be 3 integers");
    for (int i = 0; i < 3; ++i) vol.dims[i] = d[i].get<int>();
    vol.channels = h.at("channels").get<int>();
    if (h.at("dtype").get<std::string>() != "f32le")
      throw ValidationError("unsupported dtype in " + header_path.string());
    if (h.at("order").get<std::string>() != "channel-major")
      throw ValidationError("unsupported order in " + header_path.string());
    if (h.at("version").get<int>() != 1)
      throw ValidationError("unsupported version in " + header_path.string());
  } catch (const json::exception& e) {
    throw ValidationError("malformed header " + header_path.string() + ": " +
                          e.what());
  }
  if (vol.dims[0] <= 0 || vol.dims[1] <= 0 || vol.dims[2] <= 0 ||
      vol.channels < 1)
    throw ValidationError("header declares non-positive dims or channels");

  std::ifstream rf(raw_path, std::ios::binary);
  if (!rf) throw ValidationError("cannot open data " + raw_path.string());
  const auto n = static_cast<std::size_t>(vol.voxel_count()) * vol.channels;
  vol.data.resize(n);
  rf.read(reinterpret_cast<char*>(vol.data.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  const auto got = rf.gcount();
  rf.peek();
  if (static_cast<std::size_t>(got) != n * sizeof(float) || !rf.eof())
    throw ValidationError("data size mismatch for " + raw_path.string() +
                          ": expected " + std::to_string(n * sizeof(float)) +
                          " bytes");
  vol.validate();
  return vol;
}

void write_volume(const MultiChannelVolume& vol, const std::string& path) {
  vol.validate();
  const auto [header_path, raw_path] = volume_paths(path);
  json h;
  h["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
  h["channels"] = vol.channels;
  h["dtype"] = "f32le";
  h["order"] = "channel-major";
  h["version"] = 1;
  std::ofstream hf(header_path);
  if (!hf) throw ValidationError("cannot write " + header_path.string());
  hf << h.dump(2) << "\n";
  std::ofstream rf(raw_path, std::ios::binary);
  if (!rf) throw ValidationError("cannot write " + raw_path.string());
  rf.write(reinterpret_cast<const char*>(vol.data.data()),
           static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
  if (!rf) throw ValidationError("short write to " + raw_path.string());
}

MaskScheme mask_scheme_from_string(const std::string& s) {
  if (s == "slab-inferior") return MaskScheme::SlabInferior;
  if (s == "slab-superior") return MaskScheme::SlabSuperior;
  if (s == "random") return MaskScheme::Random;
  throw ValidationError("unknown mask scheme: " + s);
}

MultiChannelVolume apply_fov_mask(const MultiChannelVolume& vol, int channel,
                                  double fraction, MaskScheme scheme,
                                  std::uint64_t seed) {
  if (channel < 0 || channel >= vol.channels)
    throw ValidationError("mask channel out of range");
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ValidationError("mask fraction must lie in [0,1]");
  MultiChannelVolume out = vol;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const std::int64_t d1 = vol.dims[0], d2 = vol.dims[1], d3 = vol.dims[2];
  if (scheme == MaskScheme::Random) {
    const std::int64_t total =
        static_cast<std::int64_t>(std::ceil(fraction * vol.voxel_count()));
    std::vector<std::int64_t> idx(vol.voxel_count());
    std::iota(idx.begin(), idx.end(), 0);
    // Fisher-Yates prefix with the deterministic stream
    Rng rng(mix_seed(seed, 0));
    for (std::int64_t i = 0; i < total; ++i) {
      const auto j =
          i + static_cast<std::int64_t>(rng.uniform() * (idx.size() - i));
      std::swap(idx[i], idx[std::min<std::int64_t>(
                            j, static_cast<std::int64_t>(idx.size()) - 1)]);
      out.at(idx[i], channel) = nan;
    }
    return out;
  }
  const auto slices = static_cast<std::int64_t>(std::ceil(fraction * d3));
  const std::int64_t lo =
      scheme == MaskScheme::SlabInferior ? 0 : d3 - slices;
  const std::int64_t hi = lo + slices;
  for (std::int64_t i1 = 0; i1 < d1; ++i1)
    for (std::int64_t i2 = 0; i2 < d2; ++i2)
      for (std::int64_t i3 = lo; i3 < hi; ++i3)
        out.at((i1 * d2 + i2) * d3 + i3, channel) = nan;
  return out;
}

void PhantomSpec::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw ValidationError("phantom dims must be positive");
  if (channels < 1 || num_classes < 1)
    throw ValidationError("phantom needs channels >= 1 and classes >= 1");
  if (static_cast<int>(means.size()) != num_classes ||
      static_cast<int>(covariances.size()) != num_classes)
    throw ValidationError("phantom means/covariances must have K entries");
  const std::int64_t D =
      static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  if (class_probs.cols() != num_classes ||
      (class_probs.rows() != 1 && class_probs.rows() != D))
    throw ValidationError("class_probs must be 1xK or DxK");
  for (int k = 0; k < num_classes; ++k) {
    if (means[k].size() != channels)
      throw ValidationError("phantom mean has wrong dimension");
    const auto& C = covariances[k];
    if (C.rows() != channels || C.cols() != channels)
      throw ValidationError("phantom covariance has wrong shape");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw ValidationError("phantom covariance for class " +
                            std::to_string(k) + " is not SPD");
  }
  for (Eigen::Index r = 0; r < class_probs.rows(); ++r) {
    if (std::abs(class_probs.row(r).sum() - 1.0) > 1e-12)
      throw ValidationError("class probabilities must sum to 1 per voxel");
    if (class_probs.row(r).minCoeff() < 0.0)
      throw ValidationError("class probabilities must be nonnegative");
  }
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const std::int64_t D =
      static_cast<std::int64_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2];
  Phantom out;
  out.volume.dims = spec.dims;
  out.volume.channels = spec.channels;
  out.volume.data.resize(static_cast<std::size_t>(D) * spec.channels);
  out.labels.resize(D);

  std::vector<Eigen::MatrixXd> chol(spec.num_classes);
  for (int k = 0; k < spec.num_classes; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(spec.covariances[k]);
    if (llt.info() != Eigen::Success)
      throw ValidationError("phantom covariance Cholesky failed");
    chol[k] = llt.matrixL();
  }

  Rng rng(mix_seed(spec.seed, 0));
  Eigen::VectorXd z(spec.channels);
  for (std::int64_t d = 0; d < D; ++d) {
    const Eigen::Index row = spec.class_probs.rows() == 1 ? 0 : d;
    const double u = rng.uniform();
    int k = spec.num_classes - 1;
    double acc = 0.0;
    for (int j = 0; j < spec.num_classes; ++j) {
      acc += spec.class_probs(row, j);
      if (u <= acc) {
        k = j;
        break;
      }
    }
    out.labels[d] = k;
    for (int c = 0; c < spec.channels; ++c) z[c] = rng.normal();
    const Eigen::VectorXd x = spec.means[k] + chol[k] * z;
    for (int c = 0; c < spec.channels; ++c)
      out.volume.at(d, c) = static_cast<float>(x[c]);
  }
  return out;
}

}  // namespace vbmix
