#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dale/autodiff.hpp"
#include "dale/tensor.hpp"

namespace dale {

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t hidden = 8;      // conv1 output channels
  std::size_t feature_dim = 8; // d, conv2 output channels
  std::size_t classes = 2;     // C
  bool operator==(const ModelConfig &) const = default;
};

/// Ordered named parameters: conv1.w, conv1.b, conv2.w, conv2.b, head.w,
/// head.b.
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t scalar_count() const noexcept;
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);
  /// FNV-1a over the raw bytes of every value; used to log which parameter
  /// state a phase started from.
  std::uint64_t checksum() const noexcept;
  bool operator==(const ModelParams &) const = default;
};

/// Weights ~ U(-s, s) with s = sqrt(1 / fan_in), biases 0.
ModelParams init_params(const ModelConfig &config, std::uint64_t seed);

/// Receptive-field radius of one output pixel (sum of k/2 over the convs).
constexpr std::size_t kReceptiveRadius = 2;

struct ForwardOut {
  Var logits;   // [C, H, W]
  Var features; // [d, H, W], the input of the 1x1 head
};

/// Records every parameter as a graph leaf, in ModelParams order.
std::vector<Var> bind_params(Graph &g, const ModelParams &params);

/// conv3x3 -> relu -> conv3x3 -> relu (= features) -> conv1x1 (= logits).
/// `image` is [Cin, H, W].
ForwardOut forward(Graph &g, std::span<const Var> params, const Tensor &image);

struct ForwardValues {
  Tensor logits;
  Tensor features;
};
ForwardValues forward_values(const ModelParams &params, const Tensor &image);

enum class LossNorm { Normalized, Sum };

/// scale * sum_k w_k * CE(softmax(logits_k), label_k). Recording the scale
/// lets a minibatch share one normalizer across images.
Var weighted_ce(Graph &g, Var logits, const LabelMap &label,
                const WeightMap &weights, double scale);

/// Pixel-weighted cross entropy. Normalized divides by sum(w) (0 if the total
/// weight is 0); Sum is the plain weighted sum.
Var seg_loss(Graph &g, Var logits, const LabelMap &label,
             const WeightMap &weights, LossNorm norm = LossNorm::Normalized);

/// Per-pixel cross entropy of plain logits.
WeightMap ce_per_pixel(const Tensor &logits, const LabelMap &label);

/// Argmax class per pixel.
LabelMap predict(const Tensor &logits);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamConfig &) const = default;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState zeros_like(const ModelParams &params, AdamConfig config);
  bool operator==(const AdamState &) const = default;
};

/// Bias-corrected Adam update. Throws Errc::ShapeMismatch if grads or
/// moments disagree with the parameters.
void adam_step(ModelParams &params, std::span<const Tensor> grads,
               AdamState &state);

/// Plain gradient step theta - lr * g (no moments).
ModelParams sgd_step(const ModelParams &params, std::span<const Tensor> grads,
                     double lr);

} // namespace dale
