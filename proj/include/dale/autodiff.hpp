#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dale/tensor.hpp"

namespace dale {

/// Handle to a node recorded in a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
};

/// Tape for reverse-mode differentiation.
///
/// Forward values are computed eagerly as ops are recorded, so recording
/// order is a valid evaluation order and the tape is acyclic by
/// construction. The op set is deliberately small: what the segmentation
/// model, its losses and the calibration term need.
///
/// Tensor layout conventions: images and feature maps are [C, H, W];
/// convolution weights are [Cout, Cin, k, k] with odd k; biases are [Cout].
class Graph {
public:
  Var constant(Tensor value);
  Var parameter(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var matmul(Var a, Var b);
  /// Stride 1, zero padding k/2 so spatial size is preserved.
  Var conv2d(Var input, Var weight, Var bias);
  Var relu(Var a);
  Var sigmoid(Var a);
  /// Softmax over axis 0 of a [C, H, W] tensor.
  Var softmax_channels(Var a);
  /// Natural log; inputs are floored at 1e-300 so a zero probability paired
  /// with a zero weight stays finite.
  Var log(Var a);
  Var sum(Var a);
  Var mean(Var a);
  /// Elementwise product with a constant of the same shape or a single value.
  Var weight(Var a, Tensor w);

  const Tensor &value(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Gradients of a one-element `loss` with respect to parameter leaves.
  /// Throws Errc::NotScalarLoss or Errc::DetachedNode (wrt is not a
  /// parameter of this graph). Parameters the loss does not depend on get
  /// zero gradients.
  std::vector<Tensor> grad(Var loss, std::span<const Var> wrt) const;

private:
  enum class Op : std::uint8_t {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    Relu,
    Sigmoid,
    SoftmaxChannels,
    Log,
    Sum,
    Mean,
    Weight,
  };

  struct Node {
    Op op;
    std::array<std::size_t, 3> inputs{Var::npos, Var::npos, Var::npos};
    Tensor value;
    Tensor aux;
    bool needs_grad = false;
  };

  const Node &node(Var v) const;
  Var push(Op op, std::array<std::size_t, 3> inputs, Tensor value,
           Tensor aux = {});
  void backward_node(const Node &n, const Tensor &g,
                     std::vector<Tensor> &adj) const;

  std::vector<Node> nodes_;
};

/// Forward-only 2-D convolution with the same conventions as Graph::conv2d.
Tensor conv2d_forward(const Tensor &input, const Tensor &weight,
                      const Tensor &bias);

} // namespace dale
