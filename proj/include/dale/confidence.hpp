#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dale/dataio.hpp"
#include "dale/rng.hpp"
#include "dale/segmodel.hpp"

namespace dale {

struct MetaConfig {
  double inner_lr = 3e-4;  // plain SGD step of the shadow model
  double eta = 0.1;        // omega step size
  double omega_max = 2.0;
  double omega_init = 1.0;
  double support_threshold = 0.01; // fuzzy-mask weight needed to take part
  std::size_t pixel_cap = 256;     // per image per round, 0 = all
  std::size_t rounds = 1;          // K
};

/// Per-pixel label confidence of one training image.
struct ConfidenceMap {
  WeightMap omega;
  WeightMap grad_omega; // latest meta-gradient per pixel
  Mask evaluated;       // pixels whose grad_omega was ever computed
  double eta = 0.1;
  bool has_grad = false;

  static ConfidenceMap init(std::size_t height, std::size_t width,
                            double omega0, double eta);
  bool operator==(const ConfidenceMap &) const = default;
};

struct ShadowModel {
  ModelParams params;
  std::size_t iteration = 0;
};

/// One image of a fuzzy batch and the pixels that take part in the round.
struct FuzzyItem {
  const Sample *sample = nullptr;
  ConfidenceMap *conf = nullptr;
  std::vector<std::size_t> pixels;
};

/// One image of a non-fuzzy batch with its region weights.
struct NonFuzzyItem {
  const Sample *sample = nullptr;
  const WeightMap *weights = nullptr;
};

/// Pixels with fuzzy-mask weight above threshold, uniformly subsampled to at
/// most `cap` (0 = keep all), returned in ascending order.
std::vector<std::size_t> fuzzy_support(const WeightMap &fuzzy_mask,
                                       double threshold, std::size_t cap,
                                       Rng rng);

/// theta_p = theta_n - inner_lr * grad sum_items sum_{k in pixels} w_k l_k
/// with w_k the item's omega. A single plain gradient step, so the
/// derivative of theta_p with respect to omega_k is -inner_lr * grad l_k.
ShadowModel pseudo_update(const ModelParams &theta_n,
                          std::span<const FuzzyItem> batch, double inner_lr);

/// Gradient of the single-pixel cross entropy at each listed pixel, as flat
/// vectors in ModelParams order. Each is one reverse pass over the pixel's
/// receptive field, which reproduces the full-image gradient exactly.
std::vector<std::vector<double>>
per_pixel_grads(const ModelParams &theta, const Sample &sample,
                std::span<const std::size_t> pixels);

struct NonFuzzyGradient {
  std::vector<double> flat;
  double loss = 0.0;
};

/// Region-weighted, normalized cross entropy over a non-fuzzy batch and its
/// gradient.
NonFuzzyGradient nonfuzzy_gradient(const ModelParams &theta,
                                   std::span<const NonFuzzyItem> batch);

/// grad_omega_k = <g_n, g_k>; omega_k += eta * grad_omega_k, clamped to
/// [0, omega_max]. Only the listed pixels change.
void apply_meta_gradient(ConfidenceMap &conf,
                         std::span<const std::size_t> pixels,
                         std::span<const std::vector<double>> pixel_grads,
                         std::span<const double> g_n, double omega_max);

/// One confidence update of a fuzzy image: g_n from the non-fuzzy batch at
/// theta_p, pixel gradients at theta_n.
void omega_update(const ShadowModel &theta_p, const ModelParams &theta_n,
                  std::span<const NonFuzzyItem> nonfuzzy, FuzzyItem &item,
                  double omega_max);

struct OmegaLoopReport {
  double nonfuzzy_loss = 0.0; // at theta_p of the last round
  std::size_t pixels = 0;
};

/// K rounds of pseudo_update followed by omega updates for every item of the
/// fuzzy batch, re-deriving theta_p from the current omega each round.
OmegaLoopReport omega_loop(const ModelParams &theta_n,
                           std::span<FuzzyItem> fuzzy,
                           std::span<const NonFuzzyItem> nonfuzzy,
                           const MetaConfig &config);

/// 1 where the latest meta-gradient is strictly positive, 0 elsewhere
/// (including never-evaluated pixels). Throws Errc::UninitializedGradient
/// before the first update.
Mask noise_indicator(const ConfidenceMap &conf);

} // namespace dale
