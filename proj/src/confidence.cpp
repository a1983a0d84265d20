#include "dale/confidence.hpp"

#include <algorithm>
#include <string>

#include "dale/error.hpp"

namespace dale {

ConfidenceMap ConfidenceMap::init(std::size_t height, std::size_t width,
                                  double omega0, double eta) {
  ConfidenceMap c;
  c.omega = WeightMap(height, width, omega0);
  c.grad_omega = WeightMap(height, width, 0.0);
  c.evaluated = Mask(height, width, 0);
  c.eta = eta;
  return c;
}

std::vector<std::size_t> fuzzy_support(const WeightMap &fuzzy_mask,
                                       double threshold, std::size_t cap,
                                       Rng rng) {
  std::vector<std::size_t> idx;
  for (std::size_t p = 0; p < fuzzy_mask.size(); ++p)
    if (fuzzy_mask.data[p] > threshold)
      idx.push_back(p);
  if (cap > 0 && idx.size() > cap) {
    for (std::size_t i = 0; i < cap; ++i)
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

namespace {

void add_into(std::vector<Tensor> &acc, std::vector<Tensor> g) {
  if (acc.empty()) {
    acc = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t k = 0; k < acc[i].size(); ++k)
      acc[i][k] += g[i][k];
}

std::vector<Tensor> zero_grads(const ModelParams &p) {
  std::vector<Tensor> z;
  for (const auto &t : p.tensors)
    z.emplace_back(t.shape());
  return z;
}

std::vector<double> flatten(const std::vector<Tensor> &grads) {
  std::vector<double> flat;
  for (const auto &t : grads)
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void check_item(const FuzzyItem &item) {
  if (!item.sample || !item.conf)
    throw Error(Errc::BadConfig, "fuzzy item without sample or confidence map");
  if (!item.conf->omega.same_shape(item.sample->label))
    throw Error(Errc::ShapeMismatch, "omega shape differs from its image");
  for (auto p : item.pixels)
    if (p >= item.sample->label.size())
      throw Error(Errc::ShapeMismatch, "pixel index outside the image");
}

} // namespace

ShadowModel pseudo_update(const ModelParams &theta_n,
                          std::span<const FuzzyItem> batch, double inner_lr) {
  std::vector<Tensor> total;
  for (const auto &item : batch) {
    check_item(item);
    if (item.pixels.empty())
      continue;
    WeightMap w(item.sample->height(), item.sample->width(), 0.0);
    for (auto p : item.pixels)
      w.data[p] = item.conf->omega.data[p];
    Graph g;
    const auto vars = bind_params(g, theta_n);
    const auto out = forward(g, vars, item.sample->image);
    const Var loss = seg_loss(g, out.logits, item.sample->label, w, LossNorm::Sum);
    add_into(total, g.grad(loss, vars));
  }
  if (total.empty())
    total = zero_grads(theta_n);
  return {sgd_step(theta_n, total, inner_lr), 0};
}

std::vector<std::vector<double>>
per_pixel_grads(const ModelParams &theta, const Sample &sample,
                std::span<const std::size_t> pixels) {
  const std::size_t h = sample.height(), w = sample.width();
  const std::size_t ch = sample.image.dim(0);
  const std::size_t r = kReceptiveRadius;
  std::vector<std::vector<double>> out;
  out.reserve(pixels.size());
  for (auto p : pixels) {
    if (p >= h * w)
      throw Error(Errc::ShapeMismatch, "pixel index outside the image");
    const std::size_t y = p / w, x = p % w;
    // The window is clipped to the image, so zero padding at the image
    // border is reproduced exactly and the centre's logits match the
    // full-image forward pass.
    const std::size_t y0 = y >= r ? y - r : 0, y1 = std::min(h, y + r + 1);
    const std::size_t x0 = x >= r ? x - r : 0, x1 = std::min(w, x + r + 1);
    const std::size_t wh = y1 - y0, ww = x1 - x0;
    Tensor crop({ch, wh, ww});
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t yy = 0; yy < wh; ++yy)
        for (std::size_t xx = 0; xx < ww; ++xx)
          crop.at(c, yy, xx) = sample.image.at(c, y0 + yy, x0 + xx);
    LabelMap lbl(wh, ww, 0);
    WeightMap wt(wh, ww, 0.0);
    lbl(y - y0, x - x0) = sample.label(y, x);
    wt(y - y0, x - x0) = 1.0;

    Graph g;
    const auto vars = bind_params(g, theta);
    const auto fo = forward(g, vars, crop);
    const Var loss = seg_loss(g, fo.logits, lbl, wt, LossNorm::Sum);
    out.push_back(flatten(g.grad(loss, vars)));
  }
  return out;
}

NonFuzzyGradient nonfuzzy_gradient(const ModelParams &theta,
                                   std::span<const NonFuzzyItem> batch) {
  double total = 0.0;
  for (const auto &item : batch) {
    if (!item.sample || !item.weights ||
        !item.weights->same_shape(item.sample->label))
      throw Error(Errc::ShapeMismatch, "non-fuzzy item weights");
    for (double v : item.weights->data)
      total += v;
  }
  NonFuzzyGradient res;
  if (total <= 0.0) {
    res.flat.assign(theta.scalar_count(), 0.0);
    return res;
  }
  std::vector<Tensor> acc;
  for (const auto &item : batch) {
    Graph g;
    const auto vars = bind_params(g, theta);
    const auto out = forward(g, vars, item.sample->image);
    const Var loss =
        weighted_ce(g, out.logits, item.sample->label, *item.weights, 1.0 / total);
    res.loss += g.value(loss).item();
    add_into(acc, g.grad(loss, vars));
  }
  res.flat = flatten(acc);
  return res;
}

void apply_meta_gradient(ConfidenceMap &conf,
                         std::span<const std::size_t> pixels,
                         std::span<const std::vector<double>> pixel_grads,
                         std::span<const double> g_n, double omega_max) {
  if (pixels.size() != pixel_grads.size())
    throw Error(Errc::ShapeMismatch, "one gradient per pixel expected");
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const std::size_t p = pixels[i];
    const double gw = dot(g_n, pixel_grads[i]);
    conf.grad_omega.data[p] = gw;
    conf.evaluated.data[p] = 1;
    conf.omega.data[p] =
        std::clamp(conf.omega.data[p] + conf.eta * gw, 0.0, omega_max);
  }
  conf.has_grad = true;
}

void omega_update(const ShadowModel &theta_p, const ModelParams &theta_n,
                  std::span<const NonFuzzyItem> nonfuzzy, FuzzyItem &item,
                  double omega_max) {
  check_item(item);
  const auto g_n = nonfuzzy_gradient(theta_p.params, nonfuzzy);
  const auto grads = per_pixel_grads(theta_n, *item.sample, item.pixels);
  apply_meta_gradient(*item.conf, item.pixels, grads, g_n.flat, omega_max);
}

OmegaLoopReport omega_loop(const ModelParams &theta_n,
                           std::span<FuzzyItem> fuzzy,
                           std::span<const NonFuzzyItem> nonfuzzy,
                           const MetaConfig &config) {
  if (config.rounds < 1)
    throw Error(Errc::BadConfig, "omega loop needs K >= 1");
  // Pixel gradients are taken at theta_n, which the loop never changes.
  std::vector<std::vector<std::vector<double>>> cached;
  cached.reserve(fuzzy.size());
  OmegaLoopReport report;
  for (auto &item : fuzzy) {
    check_item(item);
    cached.push_back(per_pixel_grads(theta_n, *item.sample, item.pixels));
    report.pixels += item.pixels.size();
  }
  for (std::size_t k = 0; k < config.rounds; ++k) {
    ShadowModel shadow = pseudo_update(theta_n, fuzzy, config.inner_lr);
    shadow.iteration = k;
    const auto g_n = nonfuzzy_gradient(shadow.params, nonfuzzy);
    report.nonfuzzy_loss = g_n.loss;
    for (std::size_t i = 0; i < fuzzy.size(); ++i)
      apply_meta_gradient(*fuzzy[i].conf, fuzzy[i].pixels, cached[i], g_n.flat,
                          config.omega_max);
  }
  return report;
}

Mask noise_indicator(const ConfidenceMap &conf) {
  if (!conf.has_grad)
    throw Error(Errc::UninitializedGradient,
                "confidence map has no meta-gradient yet");
  Mask out(conf.omega.height, conf.omega.width, 0);
  for (std::size_t p = 0; p < out.size(); ++p)
    out.data[p] = conf.evaluated.data[p] && conf.grad_omega.data[p] > 0.0;
  return out;
}

} // namespace dale
