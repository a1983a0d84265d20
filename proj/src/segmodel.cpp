#include "dale/segmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "dale/error.hpp"
#include "dale/rng.hpp"

namespace dale {

std::size_t ModelParams::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto &t : tensors)
    n += t.size();
  return n;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(scalar_count());
  for (const auto &t : tensors)
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void ModelParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != scalar_count())
    throw Error(Errc::ShapeMismatch, "flat parameter vector has " +
                                         std::to_string(flat.size()) +
                                         " entries, expected " +
                                         std::to_string(scalar_count()));
  std::size_t off = 0;
  for (auto &t : tensors) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(),
                t.data().begin());
    off += t.size();
  }
}

std::uint64_t ModelParams::checksum() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto &t : tensors)
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

ModelParams init_params(const ModelConfig &cfg, std::uint64_t seed) {
  if (cfg.feature_dim < 2 || cfg.classes < 2 || cfg.hidden < 1 ||
      cfg.in_channels < 1)
    throw Error(Errc::BadConfig, "model needs d >= 2 and C >= 2");
  ModelParams p;
  p.config = cfg;
  auto add = [&](std::string name, Shape shape, std::size_t fan_in,
                 std::uint64_t tag) {
    Tensor t(std::move(shape));
    if (fan_in > 0) {
      Rng rng = Rng(seed).split(tag);
      const double s = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (auto &v : t.data())
        v = rng.uniform(-s, s);
    }
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  };
  add("conv1.w", {cfg.hidden, cfg.in_channels, 3, 3}, cfg.in_channels * 9, 1);
  add("conv1.b", {cfg.hidden}, 0, 0);
  add("conv2.w", {cfg.feature_dim, cfg.hidden, 3, 3}, cfg.hidden * 9, 2);
  add("conv2.b", {cfg.feature_dim}, 0, 0);
  add("head.w", {cfg.classes, cfg.feature_dim, 1, 1}, cfg.feature_dim, 3);
  add("head.b", {cfg.classes}, 0, 0);
  return p;
}

std::vector<Var> bind_params(Graph &g, const ModelParams &params) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto &t : params.tensors)
    vars.push_back(g.parameter(t));
  return vars;
}

ForwardOut forward(Graph &g, std::span<const Var> p, const Tensor &image) {
  if (p.size() != 6)
    throw Error(Errc::ShapeMismatch, "forward expects 6 parameter tensors");
  if (image.rank() != 3 || image.dim(0) != g.value(p[0]).dim(1))
    throw Error(Errc::ShapeMismatch,
                "image " + shape_string(image.shape()) +
                    " does not match conv1 weight " +
                    shape_string(g.value(p[0]).shape()));
  const Var x = g.constant(image);
  const Var h1 = g.relu(g.conv2d(x, p[0], p[1]));
  const Var feats = g.relu(g.conv2d(h1, p[2], p[3]));
  const Var logits = g.conv2d(feats, p[4], p[5]);
  return {logits, feats};
}

ForwardValues forward_values(const ModelParams &params, const Tensor &image) {
  Graph g;
  const auto vars = bind_params(g, params);
  const auto out = forward(g, vars, image);
  return {g.value(out.logits), g.value(out.features)};
}

namespace {

void check_label_shape(const Tensor &logits, const LabelMap &label,
                       const WeightMap *weights) {
  if (logits.rank() != 3 || !label.same_shape(logits.dim(1), logits.dim(2)) ||
      (weights && !weights->same_shape(label)))
    throw Error(Errc::ShapeMismatch, "logits " + shape_string(logits.shape()) +
                                         " vs label " +
                                         std::to_string(label.height) + "x" +
                                         std::to_string(label.width));
  for (auto c : label.data)
    if (c >= logits.dim(0))
      throw Error(Errc::ShapeMismatch,
                  "label class " + std::to_string(c) + " >= C");
}

} // namespace

Var weighted_ce(Graph &g, Var logits, const LabelMap &label,
                const WeightMap &weights, double scale) {
  const Tensor &z = g.value(logits);
  check_label_shape(z, label, &weights);
  const std::size_t plane = label.size();
  // CE_k = -log softmax(z_k)[y_k]; the one-hot selection and the pixel
  // weight fold into one constant weighting of log-probabilities.
  Tensor sel(z.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    if (weights.data[p] < 0.0)
      throw Error(Errc::BadRange, "negative pixel weight");
    sel[label.data[p] * plane + p] = -scale * weights.data[p];
  }
  return g.sum(g.weight(g.log(g.softmax_channels(logits)), std::move(sel)));
}

Var seg_loss(Graph &g, Var logits, const LabelMap &label,
             const WeightMap &weights, LossNorm norm) {
  double scale = 1.0;
  if (norm == LossNorm::Normalized) {
    double total = 0.0;
    for (double w : weights.data)
      total += w;
    scale = total > 0.0 ? 1.0 / total : 0.0;
  }
  return weighted_ce(g, logits, label, weights, scale);
}

WeightMap ce_per_pixel(const Tensor &logits, const LabelMap &label) {
  check_label_shape(logits, label, nullptr);
  const std::size_t c = logits.dim(0), plane = label.size();
  WeightMap out(label.height, label.width);
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = logits[p];
    for (std::size_t k = 1; k < c; ++k)
      mx = std::max(mx, logits[k * plane + p]);
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k)
      total += std::exp(logits[k * plane + p] - mx);
    out.data[p] = std::log(total) + mx - logits[label.data[p] * plane + p];
  }
  return out;
}

LabelMap predict(const Tensor &logits) {
  if (logits.rank() != 3)
    throw Error(Errc::ShapeMismatch, "predict expects [C,H,W]");
  const std::size_t c = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  LabelMap out(logits.dim(1), logits.dim(2));
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (logits[k * plane + p] > logits[best * plane + p])
        best = k;
    out.data[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

AdamState AdamState::zeros_like(const ModelParams &params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto &t : params.tensors) {
    s.m.emplace_back(t.shape());
    s.v.emplace_back(t.shape());
  }
  return s;
}

namespace {
void check_grads(const ModelParams &params, std::span<const Tensor> grads) {
  if (grads.size() != params.tensors.size())
    throw Error(Errc::ShapeMismatch, "gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (grads[i].shape() != params.tensors[i].shape())
      throw Error(Errc::ShapeMismatch, "gradient for " + params.names[i] +
                                           " has shape " +
                                           shape_string(grads[i].shape()));
}
} // namespace

void adam_step(ModelParams &params, std::span<const Tensor> grads,
               AdamState &state) {
  check_grads(params, grads);
  if (state.m.size() != grads.size() || state.v.size() != grads.size())
    throw Error(Errc::ShapeMismatch, "Adam moments do not match parameters");
  const auto &c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto theta = params.tensors[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i].data();
    if (m.size() != g.size() || v.size() != g.size())
      throw Error(Errc::ShapeMismatch, "Adam moment shape mismatch");
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      theta[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

ModelParams sgd_step(const ModelParams &params, std::span<const Tensor> grads,
                     double lr) {
  check_grads(params, grads);
  ModelParams out = params;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto theta = out.tensors[i].data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < g.size(); ++k)
      theta[k] -= lr * g[k];
  }
  return out;
}

} // namespace dale
