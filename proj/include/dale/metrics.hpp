#pragma once

#include <vector>

#include "dale/tensor.hpp"

namespace dale {

/// 2|P and G| / (|P| + |G|); 1 when both masks are empty.
double dice(const Mask &pred, const Mask &gt);

/// Mean IoU over classes present in either map; classes absent from both
/// are left out of the mean.
double miou(const LabelMap &pred, const LabelMap &gt, std::size_t classes);

struct Pixel {
  int y;
  int x;
  bool operator==(const Pixel &) const = default;
};

/// Mask pixels with at least one in-image 4-neighbor outside the mask.
std::vector<Pixel> surface(const Mask &mask);

struct SurfaceDistances {
  std::vector<double> pred_to_gt; // each pred-surface pixel to nearest gt
  std::vector<double> gt_to_pred;
  bool pred_empty = false;
  bool gt_empty = false;
};

/// Brute-force all-pairs Euclidean nearest distances between surfaces.
SurfaceDistances surface_distances(const Mask &pred, const Mask &gt);

/// q-th percentile (q in [0, 100]) with linear interpolation between order
/// statistics: position q/100 * (n - 1).
double percentile(std::vector<double> values, double q);

/// 95th percentile of the concatenated directed distances. If exactly one
/// surface is empty the image diagonal is returned; both empty gives 0.
double hd95(const Mask &pred, const Mask &gt);

/// Mean of the concatenated directed distances, same empty-surface rule.
double asd(const Mask &pred, const Mask &gt);

Mask class_mask(const LabelMap &labels, std::uint8_t cls);

struct MetricRow {
  double dice = 0.0;
  double miou = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
};

/// Dice, HD95 and ASD on `lesion_class`, mIoU over all classes.
MetricRow score_prediction(const LabelMap &pred, const LabelMap &gt,
                           std::size_t classes, std::uint8_t lesion_class = 1);

} // namespace dale
