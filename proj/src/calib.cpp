#include "dale/calib.hpp"

#include <cmath>
#include <string>

#include "dale/error.hpp"
#include "dale/linalg.hpp"

namespace dale {

FeatureColumns denoise_features(const Tensor &features, const LabelMap &labels,
                                const WeightMap &weights, const Mask &indicator) {
  if (features.rank() != 3 || !labels.same_shape(features.dim(1), features.dim(2)) ||
      !weights.same_shape(labels) || !indicator.same_shape(labels))
    throw Error(Errc::ShapeMismatch, "denoise_features: shapes disagree");
  const std::size_t d = features.dim(0), plane = labels.size();
  std::vector<std::size_t> keep;
  for (std::size_t p = 0; p < plane; ++p)
    if (indicator.data[p] && weights.data[p] > 0.0)
      keep.push_back(p);
  FeatureColumns out;
  out.values = Tensor({d, keep.size()});
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const std::size_t p = keep[j];
    for (std::size_t k = 0; k < d; ++k)
      out.values.at(k, j) = features[k * plane + p];
    out.labels.push_back(labels.data[p]);
    out.weights.push_back(weights.data[p]);
    out.pixel.push_back(p);
  }
  return out;
}

void append_columns(FeatureColumns &a, const FeatureColumns &b) {
  if (b.size() == 0)
    return;
  if (a.size() == 0) {
    a = b;
    return;
  }
  const std::size_t d = a.dim();
  if (b.dim() != d)
    throw Error(Errc::ShapeMismatch, "append_columns: feature dims differ");
  const std::size_t n = a.size() + b.size();
  Tensor merged({d, n});
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t j = 0; j < a.size(); ++j)
      merged.at(k, j) = a.values.at(k, j);
    for (std::size_t j = 0; j < b.size(); ++j)
      merged.at(k, a.size() + j) = b.values.at(k, j);
  }
  a.values = std::move(merged);
  a.labels.insert(a.labels.end(), b.labels.begin(), b.labels.end());
  a.weights.insert(a.weights.end(), b.weights.begin(), b.weights.end());
  a.pixel.insert(a.pixel.end(), b.pixel.begin(), b.pixel.end());
}

std::vector<ClassGaussian> class_stats(const FeatureColumns &cols,
                                       std::size_t classes,
                                       const CalibConfig &config) {
  const std::size_t d = cols.dim();
  std::vector<ClassGaussian> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto &g = out[c];
    g.cls = static_cast<std::uint8_t>(c);
    g.mean.assign(d, 0.0);
    g.cov = Tensor({d, d});
  }
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const double w = cols.weights[j];
    if (w < 0.0)
      throw Error(Errc::BadRange, "negative feature weight");
    if (w == 0.0)
      continue;
    auto &g = out.at(cols.labels[j]);
    g.weight += w;
    ++g.count;
    for (std::size_t k = 0; k < d; ++k)
      g.mean[k] += w * cols.values.at(k, j);
  }
  for (auto &g : out)
    if (g.weight > 0.0)
      for (auto &v : g.mean)
        v /= g.weight;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const double w = cols.weights[j];
    if (w == 0.0)
      continue;
    auto &g = out[cols.labels[j]];
    for (std::size_t a = 0; a < d; ++a) {
      const double da = cols.values.at(a, j) - g.mean[a];
      for (std::size_t b = 0; b < d; ++b)
        g.cov.at(a, b) += w * da * (cols.values.at(b, j) - g.mean[b]);
    }
  }
  const std::size_t min_count = config.min_count_for(d);
  for (auto &g : out) {
    if (g.weight > 0.0)
      for (auto &v : g.cov.data())
        v /= g.weight;
    for (std::size_t a = 0; a < d; ++a)
      g.cov.at(a, a) += config.ridge;
    g.usable = g.count >= min_count;
  }
  return out;
}

GaussianAccumulator::GaussianAccumulator(std::size_t dim, std::size_t classes)
    : dim_(dim), weight_(classes, 0.0), count_(classes, 0),
      sum_(classes, std::vector<double>(dim, 0.0)),
      outer_(classes, std::vector<double>(dim * dim, 0.0)) {}

void GaussianAccumulator::add(const Tensor &features, const LabelMap &labels,
                              const WeightMap &weights) {
  if (features.rank() != 3 || features.dim(0) != dim_ ||
      !labels.same_shape(features.dim(1), features.dim(2)) ||
      !weights.same_shape(labels))
    throw Error(Errc::ShapeMismatch, "GaussianAccumulator::add");
  const std::size_t plane = labels.size();
  std::vector<double> f(dim_);
  for (std::size_t p = 0; p < plane; ++p) {
    const double w = weights.data[p];
    if (w <= 0.0)
      continue;
    const auto c = labels.data[p];
    for (std::size_t k = 0; k < dim_; ++k)
      f[k] = features[k * plane + p];
    weight_.at(c) += w;
    ++count_[c];
    for (std::size_t a = 0; a < dim_; ++a) {
      sum_[c][a] += w * f[a];
      for (std::size_t b = 0; b < dim_; ++b)
        outer_[c][a * dim_ + b] += w * f[a] * f[b];
    }
  }
}

std::vector<ClassGaussian>
GaussianAccumulator::finalize(const CalibConfig &config) const {
  std::vector<ClassGaussian> out(weight_.size());
  const std::size_t min_count = config.min_count_for(dim_);
  for (std::size_t c = 0; c < out.size(); ++c) {
    auto &g = out[c];
    g.cls = static_cast<std::uint8_t>(c);
    g.weight = weight_[c];
    g.count = count_[c];
    g.mean.assign(dim_, 0.0);
    g.cov = Tensor({dim_, dim_});
    if (g.weight > 0.0) {
      for (std::size_t a = 0; a < dim_; ++a)
        g.mean[a] = sum_[c][a] / g.weight;
      for (std::size_t a = 0; a < dim_; ++a)
        for (std::size_t b = 0; b < dim_; ++b)
          g.cov.at(a, b) =
              outer_[c][a * dim_ + b] / g.weight - g.mean[a] * g.mean[b];
      // Symmetrize away the rounding of E[ff^T] - mu mu^T.
      for (std::size_t a = 0; a < dim_; ++a)
        for (std::size_t b = a + 1; b < dim_; ++b) {
          const double s = 0.5 * (g.cov.at(a, b) + g.cov.at(b, a));
          g.cov.at(a, b) = g.cov.at(b, a) = s;
        }
    }
    for (std::size_t a = 0; a < dim_; ++a)
      g.cov.at(a, a) += config.ridge;
    g.usable = g.count >= min_count;
  }
  return out;
}

Tensor perturb_cov(const Tensor &cov, Rng &rng, double eps_max,
                   double *eps_out) {
  if (eps_max < 0.0)
    throw Error(Errc::BadRange, "eps_max must be >= 0");
  const double eps = eps_max > 0.0 ? rng.uniform(0.0, eps_max) : 0.0;
  if (eps_out)
    *eps_out = eps;
  Tensor out = cov;
  for (auto &v : out.data())
    v += eps;
  return out;
}

double bures_w2(const std::vector<double> &mean1, const Tensor &cov1,
                const std::vector<double> &mean2, const Tensor &cov2) {
  if (mean1.size() != mean2.size() || cov1.shape() != cov2.shape() ||
      cov1.rank() != 2 || cov1.dim(0) != mean1.size())
    throw Error(Errc::ShapeMismatch, "bures_w2: dimensions disagree");
  double mean_term = 0.0;
  for (std::size_t k = 0; k < mean1.size(); ++k)
    mean_term += (mean1[k] - mean2[k]) * (mean1[k] - mean2[k]);
  const Tensor root1 = sqrtm_spd(cov1);
  const Tensor cross = sqrtm_spd(matmul(matmul(root1, cov2), root1));
  const double value = mean_term + trace(cov1) + trace(cov2) - 2.0 * trace(cross);
  // The trace term is a squared distance; only rounding makes it negative.
  return std::max(value, 0.0);
}

double bures_w2(const ClassGaussian &a, const ClassGaussian &b) {
  if (!a.usable || !b.usable)
    throw Error(Errc::DegenerateClass,
                "class " + std::to_string(a.usable ? b.cls : a.cls) +
                    " has too few pixels");
  return bures_w2(a.mean, a.cov, b.mean, b.cov);
}

AlignmentResult lw_loss_and_grad(const FeatureColumns &fuzzy,
                                 const std::vector<ClassGaussian> &target,
                                 std::size_t classes, const CalibConfig &config) {
  const std::size_t d = fuzzy.dim();
  const auto stats = class_stats(fuzzy, classes, config);
  AlignmentResult res;
  res.grad = Tensor({d, fuzzy.size()});
  res.per_class.assign(classes, 0.0);

  for (std::size_t c = 0; c < classes && c < target.size(); ++c) {
    const auto &tg = target[c];
    const auto &fz = stats[c];
    if (!tg.usable || !fz.usable)
      continue;
    const double lw = bures_w2(tg.mean, tg.cov, fz.mean, fz.cov);
    res.per_class[c] = lw;
    res.loss += lw;
    ++res.classes_used;

    // d/dSigma_f of tr(Sigma_f - 2 (sqrt(A) Sigma_f sqrt(A))^{1/2}) with
    // A the target covariance is I - sqrt(A) M^{-1/2} sqrt(A).
    const Tensor root = sqrtm_spd(tg.cov);
    const Tensor m = matmul(matmul(root, fz.cov), root);
    Tensor gsig = Tensor::identity(d) -
                  matmul(matmul(root, inv_sqrtm_spd(m, 1e-15)), root);
    std::vector<double> gmu(d);
    for (std::size_t k = 0; k < d; ++k)
      gmu[k] = -2.0 * (tg.mean[k] - fz.mean[k]);

    // Chain rule through the weighted mean and covariance: for column i of
    // class c, dL/df_i = (w_i / W) (g_mu + 2 G (f_i - mu)). The covariance's
    // own dependence on mu cancels because sum_i w_i (f_i - mu) = 0.
    std::vector<double> centered(d);
    for (std::size_t j = 0; j < fuzzy.size(); ++j) {
      if (fuzzy.labels[j] != c || fuzzy.weights[j] <= 0.0)
        continue;
      const double scale = fuzzy.weights[j] / fz.weight;
      for (std::size_t k = 0; k < d; ++k)
        centered[k] = fuzzy.values.at(k, j) - fz.mean[k];
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b)
          s += (gsig.at(a, b) + gsig.at(b, a)) * centered[b];
        res.grad.at(a, j) += scale * (gmu[a] + s);
      }
    }
  }
  if (res.classes_used == 0)
    throw Error(Errc::DegenerateClass, "no class usable on both sides");
  return res;
}

double fuzzy_loss(const WeightMap &ce, const WeightMap &omega,
                  const WeightMap &fuzzy_mask, double lw, double alpha,
                  double support_threshold) {
  if (!ce.same_shape(omega) || !ce.same_shape(fuzzy_mask))
    throw Error(Errc::ShapeMismatch, "fuzzy_loss: shapes disagree");
  if (alpha < 0.0)
    throw Error(Errc::BadRange, "alpha must be >= 0");
  double num = 0.0, den = 0.0, omega_sum = 0.0;
  std::size_t support = 0;
  for (std::size_t p = 0; p < ce.size(); ++p) {
    const double w = omega.data[p] * fuzzy_mask.data[p];
    num += w * ce.data[p];
    den += w;
    if (fuzzy_mask.data[p] > support_threshold) {
      omega_sum += omega.data[p];
      ++support;
    }
  }
  const double ce_term = den > 0.0 ? num / den : 0.0;
  const double mean_omega =
      support ? omega_sum / static_cast<double>(support) : 0.0;
  return ce_term + mean_omega * alpha * lw;
}

} // namespace dale
