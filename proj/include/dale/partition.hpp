#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dale/dataio.hpp"
#include "dale/tensor.hpp"

namespace dale {

struct PartitionConfig {
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  int bins = 32;
  double tau = 0.9;
};

/// Average entropy of a patch, in nats. Intensities are quantized into
/// `bins` equal-width bins over [0, 1]; each pixel's probability is the
/// within-patch frequency of its bin, and the score is
/// -1/(h*w) * sum_k p_k ln p_k over pixels k.
double avg_entropy(std::span<const double> patch, int bins);

/// Fraction of pixels inside the patch [y0, y0+h) x [x0, x0+w) that are
/// boundary pixels of the full label map (a 4-neighbor of another class;
/// neighbors outside the map are ignored).
double edge_ratio(const LabelMap &full_label, std::size_t y0, std::size_t x0,
                  std::size_t h, std::size_t w);
/// Fraction of set pixels of a precomputed boundary mask inside the patch.
double boundary_fraction(const Mask &boundary, std::size_t y0, std::size_t x0,
                  std::size_t h, std::size_t w);

/// (v - min) / (max - min); all zeros when max == min.
std::vector<double> minmax_norm(std::span<const double> values);

/// Per-patch scores in row-major patch-grid order.
struct PatchScores {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> r; // average entropy
  std::vector<double> e; // edge ratio
  std::vector<double> r_std;
  std::vector<double> e_std;
  std::vector<double> m; // max(r_std, e_std)

  std::size_t count() const noexcept { return m.size(); }
};

struct SoftMasks {
  WeightMap fuzzy;    // M^f
  WeightMap nonfuzzy; // M^n
  double tau = 0.0;
};

/// Mask values (M^f, M^n) of one patch score:
///   M^f = 1 if m > tau, else m
///   M^n = 1 if m < tau, else tau - m clamped to [0, 1]
std::pair<double, double> mask_values(double m, double tau);

/// Broadcasts per-patch mask values onto an H x W grid (cropping the patch
/// grid when it was computed on a padded image).
SoftMasks soft_masks(const PatchScores &scores, double tau,
                     std::size_t patch_h, std::size_t patch_w,
                     std::size_t height, std::size_t width);

struct RegionSample {
  Sample base;
  PatchScores scores;
  SoftMasks masks;
};

/// Scores a sample patch by patch, normalizes per image, fuses and masks.
/// Images not divisible by the patch size are reflect-padded for scoring.
/// Throws Errc::BadPatchSize for empty or oversized patches and
/// Errc::BadRange for tau outside (0, 1).
RegionSample split(const Sample &sample, const PartitionConfig &config);

PatchScores score_patches(const Sample &sample, const PartitionConfig &config);

} // namespace dale
