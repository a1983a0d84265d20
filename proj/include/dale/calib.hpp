#pragma once

#include <cstdint>
#include <vector>

#include "dale/rng.hpp"
#include "dale/tensor.hpp"

namespace dale {

struct CalibConfig {
  double alpha = 0.05;   // weight of the alignment loss
  double eps_max = 0.01; // covariance perturbation drawn from U(0, eps_max)
  double ridge = 1e-6;   // added to every empirical covariance
  std::size_t min_count = 0; // 0 means d + 1
  double support_threshold = 0.01;

  std::size_t min_count_for(std::size_t d) const noexcept {
    return min_count ? min_count : d + 1;
  }
};

struct ClassGaussian {
  std::uint8_t cls = 0;
  std::vector<double> mean;
  Tensor cov;
  double weight = 0.0;   // sum of pixel weights
  std::size_t count = 0; // pixels with positive weight
  bool usable = false;   // count >= min_count
};

/// Feature vectors as columns of a [d, N] matrix, with the label and weight
/// of each column.
struct FeatureColumns {
  Tensor values;
  std::vector<std::uint8_t> labels;
  std::vector<double> weights;
  std::vector<std::size_t> pixel; // source pixel index within its image

  std::size_t dim() const { return values.empty() ? 0 : values.dim(0); }
  std::size_t size() const noexcept { return labels.size(); }
};

/// Collects the columns of a [d, H, W] feature map whose indicator is set
/// and whose weight is positive. Excluded pixels are dropped, not zeroed.
FeatureColumns denoise_features(const Tensor &features, const LabelMap &labels,
                                const WeightMap &weights, const Mask &indicator);

/// Appends b's columns to a.
void append_columns(FeatureColumns &a, const FeatureColumns &b);

/// Weighted mean and covariance (normalized by the weight sum) per class,
/// plus ridge * I.
std::vector<ClassGaussian> class_stats(const FeatureColumns &cols,
                                       std::size_t classes,
                                       const CalibConfig &config);

/// Streams weighted first and second moments so per-class statistics can be
/// collected across a whole training phase.
class GaussianAccumulator {
public:
  GaussianAccumulator(std::size_t dim, std::size_t classes);

  /// features is [d, H, W]; pixels with zero weight are skipped.
  void add(const Tensor &features, const LabelMap &labels,
           const WeightMap &weights);
  std::vector<ClassGaussian> finalize(const CalibConfig &config) const;

private:
  std::size_t dim_;
  std::vector<double> weight_;
  std::vector<std::size_t> count_;
  std::vector<std::vector<double>> sum_;   // per class, d
  std::vector<std::vector<double>> outer_; // per class, d*d
};

/// cov + eps * ones(d, d) with eps ~ U(0, eps_max) drawn from rng (no draw
/// when eps_max == 0). Returns the perturbed matrix; `eps_out` receives eps.
Tensor perturb_cov(const Tensor &cov, Rng &rng, double eps_max,
                   double *eps_out = nullptr);

/// Squared 2-Wasserstein distance between Gaussians:
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (sqrt(S1) S2 sqrt(S1))^{1/2}).
double bures_w2(const std::vector<double> &mean1, const Tensor &cov1,
                const std::vector<double> &mean2, const Tensor &cov2);
/// Throws Errc::DegenerateClass if either side is not usable.
double bures_w2(const ClassGaussian &a, const ClassGaussian &b);

struct AlignmentResult {
  double loss = 0.0;
  Tensor grad; // [d, N], d loss / d column
  std::vector<double> per_class;
  std::size_t classes_used = 0;
};

/// Sum over classes of bures_w2(frozen target, fuzzy-side Gaussian) and its
/// gradient with respect to the fuzzy feature columns. Classes unusable on
/// either side contribute nothing. Throws Errc::DegenerateClass when no
/// class is usable on both sides.
AlignmentResult lw_loss_and_grad(const FeatureColumns &fuzzy,
                                 const std::vector<ClassGaussian> &target,
                                 std::size_t classes, const CalibConfig &config);

/// sum(omega*M*ce)/sum(omega*M) + mean(omega over M > threshold) * alpha * lw.
double fuzzy_loss(const WeightMap &ce, const WeightMap &omega,
                  const WeightMap &fuzzy_mask, double lw, double alpha,
                  double support_threshold = 0.01);

} // namespace dale
