#include "dale/partition.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dale/error.hpp"

namespace dale {

double avg_entropy(std::span<const double> patch, int bins) {
  if (patch.empty())
    throw Error(Errc::EmptyPatch, "entropy of an empty patch");
  if (bins < 2)
    throw Error(Errc::BadRange, "need at least 2 bins");
  std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
  std::vector<std::size_t> bin_of(patch.size());
  for (std::size_t k = 0; k < patch.size(); ++k) {
    const double v = std::clamp(patch[k], 0.0, 1.0);
    const auto b = std::min(bins - 1, static_cast<int>(v * bins));
    bin_of[k] = static_cast<std::size_t>(b);
    ++counts[bin_of[k]];
  }
  const auto n = static_cast<double>(patch.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < patch.size(); ++k) {
    const double p = static_cast<double>(counts[bin_of[k]]) / n;
    acc += p * std::log(p);
  }
  return -acc / n;
}

double boundary_fraction(const Mask &boundary, std::size_t y0, std::size_t x0,
                  std::size_t h, std::size_t w) {
  if (h == 0 || w == 0)
    throw Error(Errc::EmptyPatch, "edge ratio of an empty patch");
  if (y0 + h > boundary.height || x0 + w > boundary.width)
    throw Error(Errc::BadPatchSize, "patch extends past the label map");
  std::size_t count = 0;
  for (std::size_t y = y0; y < y0 + h; ++y)
    for (std::size_t x = x0; x < x0 + w; ++x)
      count += boundary(y, x) != 0;
  return static_cast<double>(count) / static_cast<double>(h * w);
}

double edge_ratio(const LabelMap &full_label, std::size_t y0, std::size_t x0,
                  std::size_t h, std::size_t w) {
  return boundary_fraction(class_boundary(full_label), y0, x0, h, w);
}

std::vector<double> minmax_norm(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty())
    return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (range > 0.0)
    for (std::size_t i = 0; i < values.size(); ++i)
      out[i] = (values[i] - *lo) / range;
  return out;
}

std::pair<double, double> mask_values(double m, double tau) {
  const double fuzzy = m > tau ? 1.0 : m;
  const double nonfuzzy = m < tau ? 1.0 : std::clamp(tau - m, 0.0, 1.0);
  return {fuzzy, nonfuzzy};
}

namespace {

std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  if (len == 1)
    return 0;
  const std::ptrdiff_t period = 2 * (len - 1);
  i %= period;
  if (i < 0)
    i += period;
  return static_cast<std::size_t>(i < len ? i : period - i);
}

void validate(const PartitionConfig &cfg, std::size_t h, std::size_t w) {
  if (cfg.patch_h == 0 || cfg.patch_w == 0 || cfg.patch_h > h ||
      cfg.patch_w > w)
    throw Error(Errc::BadPatchSize,
                "patch " + std::to_string(cfg.patch_h) + "x" +
                    std::to_string(cfg.patch_w) + " for image " +
                    std::to_string(h) + "x" + std::to_string(w));
  if (!(cfg.tau > 0.0 && cfg.tau < 1.0))
    throw Error(Errc::BadRange, "tau must lie in (0, 1)");
}

} // namespace

PatchScores score_patches(const Sample &sample, const PartitionConfig &cfg) {
  const std::size_t h = sample.height(), w = sample.width();
  validate(cfg, h, w);
  const std::size_t rows = (h + cfg.patch_h - 1) / cfg.patch_h;
  const std::size_t cols = (w + cfg.patch_w - 1) / cfg.patch_w;
  const std::size_t ph = rows * cfg.patch_h, pw = cols * cfg.patch_w;

  // Reflect-pad intensity and label up to a whole number of patches.
  const WeightMap intensity = sample.intensity();
  WeightMap img(ph, pw);
  LabelMap lbl(ph, pw);
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x) {
      const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y), h);
      const std::size_t sx = reflect(static_cast<std::ptrdiff_t>(x), w);
      img(y, x) = intensity(sy, sx);
      lbl(y, x) = sample.label(sy, sx);
    }
  const Mask boundary = class_boundary(lbl);

  PatchScores s;
  s.rows = rows;
  s.cols = cols;
  std::vector<double> patch(cfg.patch_h * cfg.patch_w);
  for (std::size_t pr = 0; pr < rows; ++pr)
    for (std::size_t pc = 0; pc < cols; ++pc) {
      const std::size_t y0 = pr * cfg.patch_h, x0 = pc * cfg.patch_w;
      for (std::size_t y = 0; y < cfg.patch_h; ++y)
        for (std::size_t x = 0; x < cfg.patch_w; ++x)
          patch[y * cfg.patch_w + x] = img(y0 + y, x0 + x);
      s.r.push_back(avg_entropy(patch, cfg.bins));
      s.e.push_back(boundary_fraction(boundary, y0, x0, cfg.patch_h, cfg.patch_w));
    }
  s.r_std = minmax_norm(s.r);
  s.e_std = minmax_norm(s.e);
  s.m.resize(s.r.size());
  for (std::size_t j = 0; j < s.m.size(); ++j)
    s.m[j] = std::max(s.r_std[j], s.e_std[j]);
  return s;
}

SoftMasks soft_masks(const PatchScores &scores, double tau,
                     std::size_t patch_h, std::size_t patch_w,
                     std::size_t height, std::size_t width) {
  if (scores.rows * patch_h < height || scores.cols * patch_w < width)
    throw Error(Errc::BadPatchSize, "patch grid does not cover the image");
  SoftMasks out{WeightMap(height, width), WeightMap(height, width), tau};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t j = (y / patch_h) * scores.cols + x / patch_w;
      const auto [f, n] = mask_values(scores.m[j], tau);
      out.fuzzy(y, x) = f;
      out.nonfuzzy(y, x) = n;
    }
  return out;
}

RegionSample split(const Sample &sample, const PartitionConfig &cfg) {
  RegionSample rs;
  rs.base = sample;
  rs.scores = score_patches(sample, cfg);
  rs.masks = soft_masks(rs.scores, cfg.tau, cfg.patch_h, cfg.patch_w,
                        sample.height(), sample.width());
  return rs;
}

} // namespace dale
