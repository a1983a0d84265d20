#include "dale/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dale/error.hpp"

namespace dale {

namespace {
template <typename A, typename B>
void require_same(const Grid<A> &a, const Grid<B> &b, const char *where) {
  if (!a.same_shape(b))
    throw Error(Errc::ShapeMismatch, std::string(where) + ": shapes differ");
}
} // namespace

double dice(const Mask &pred, const Mask &gt) {
  require_same(pred, gt, "dice");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0)
    return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double miou(const LabelMap &pred, const LabelMap &gt, std::size_t classes) {
  require_same(pred, gt, "miou");
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto a = pred.data[i], b = gt.data[i];
    if (a >= classes || b >= classes)
      throw Error(Errc::BadRange, "class index >= classes");
    if (a == b) {
      ++inter[a];
      ++uni[a];
    } else {
      ++uni[a];
      ++uni[b];
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c)
    if (uni[c] > 0) {
      total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      ++present;
    }
  return present ? total / static_cast<double>(present) : 1.0;
}

std::vector<Pixel> surface(const Mask &mask) {
  std::vector<Pixel> out;
  const auto h = static_cast<int>(mask.height), w = static_cast<int>(mask.width);
  auto off = [&](int y, int x) {
    return y >= 0 && y < h && x >= 0 && x < w && mask(y, x) == 0;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask(y, x) && (off(y - 1, x) || off(y + 1, x) || off(y, x - 1) ||
                         off(y, x + 1)))
        out.push_back({y, x});
  return out;
}

namespace {
std::vector<double> nearest(const std::vector<Pixel> &from,
                            const std::vector<Pixel> &to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto &a : from) {
    int best = std::numeric_limits<int>::max();
    for (const auto &b : to) {
      const int dy = a.y - b.y, dx = a.x - b.x;
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
  return out;
}

double diagonal(const Mask &m) {
  return std::hypot(static_cast<double>(m.height), static_cast<double>(m.width));
}
} // namespace

SurfaceDistances surface_distances(const Mask &pred, const Mask &gt) {
  require_same(pred, gt, "surface_distances");
  const auto sp = surface(pred), sg = surface(gt);
  SurfaceDistances d;
  d.pred_empty = sp.empty();
  d.gt_empty = sg.empty();
  if (!d.pred_empty && !d.gt_empty) {
    d.pred_to_gt = nearest(sp, sg);
    d.gt_to_pred = nearest(sg, sp);
  }
  return d;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty())
    throw Error(Errc::BadRange, "percentile of an empty list");
  if (!(q >= 0.0 && q <= 100.0))
    throw Error(Errc::BadRange, "percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {
template <typename Reduce>
double surface_metric(const Mask &pred, const Mask &gt, Reduce reduce) {
  const auto d = surface_distances(pred, gt);
  if (d.pred_empty && d.gt_empty)
    return 0.0;
  if (d.pred_empty || d.gt_empty)
    return diagonal(pred);
  std::vector<double> all = d.pred_to_gt;
  all.insert(all.end(), d.gt_to_pred.begin(), d.gt_to_pred.end());
  return reduce(std::move(all));
}
} // namespace

double hd95(const Mask &pred, const Mask &gt) {
  return surface_metric(pred, gt,
                        [](std::vector<double> v) { return percentile(std::move(v), 95.0); });
}

double asd(const Mask &pred, const Mask &gt) {
  return surface_metric(pred, gt, [](std::vector<double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  });
}

Mask class_mask(const LabelMap &labels, std::uint8_t cls) {
  Mask m(labels.height, labels.width, 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    m.data[i] = labels.data[i] == cls;
  return m;
}

MetricRow score_prediction(const LabelMap &pred, const LabelMap &gt,
                           std::size_t classes, std::uint8_t lesion_class) {
  const Mask p = class_mask(pred, lesion_class), g = class_mask(gt, lesion_class);
  return {dice(p, g), miou(pred, gt, classes), hd95(p, g), asd(p, g)};
}

} // namespace dale
