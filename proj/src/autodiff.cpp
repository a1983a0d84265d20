#include "dale/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dale/error.hpp"

namespace dale {

namespace {

constexpr double kLogFloor = 1e-300;

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
  if (a.shape() != b.shape())
    throw Error(Errc::ShapeMismatch, std::string(op) + ": " +
                                         shape_string(a.shape()) + " vs " +
                                         shape_string(b.shape()));
}

void accumulate(std::vector<Tensor> &adj, std::size_t id, const Tensor &g) {
  if (adj[id].empty()) {
    adj[id] = g;
    return;
  }
  auto dst = adj[id].data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] += src[i];
}

struct ConvDims {
  std::size_t cin, cout, h, w, k;
  std::ptrdiff_t pad;
};

ConvDims conv_dims(const Tensor &input, const Tensor &weight,
                   const Tensor &bias) {
  if (input.rank() != 3 || weight.rank() != 4 || bias.rank() != 1)
    throw Error(Errc::ShapeMismatch, "conv2d: input " +
                                         shape_string(input.shape()) +
                                         ", weight " +
                                         shape_string(weight.shape()) +
                                         ", bias " + shape_string(bias.shape()));
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != input.dim(0) || weight.dim(3) != k || k % 2 == 0 ||
      bias.dim(0) != weight.dim(0))
    throw Error(Errc::ShapeMismatch, "conv2d: incompatible weight " +
                                         shape_string(weight.shape()) +
                                         " for input " +
                                         shape_string(input.shape()));
  return {input.dim(0), weight.dim(0), input.dim(1), input.dim(2), k,
          static_cast<std::ptrdiff_t>(k / 2)};
}

// Visits every (co, ci, ky, kx) tap together with the valid output row and
// column ranges, i.e. those where the shifted input position is inside the
// image. fn(co, ci, tap_index, dy, dx, y0, y1, x0, x1).
template <typename Fn> void for_each_tap(const ConvDims &d, Fn &&fn) {
  const auto h = static_cast<std::ptrdiff_t>(d.h);
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  for (std::size_t co = 0; co < d.cout; ++co)
    for (std::size_t ci = 0; ci < d.cin; ++ci)
      for (std::size_t ky = 0; ky < d.k; ++ky) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - d.pad;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
        const std::ptrdiff_t y1 = std::min(h, h - dy);
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - d.pad;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t x1 = std::min(w, w - dx);
          const std::size_t tap = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
          fn(co, ci, tap, dy, dx, y0, y1, x0, x1);
        }
      }
}

} // namespace

Tensor conv2d_forward(const Tensor &input, const Tensor &weight,
                      const Tensor &bias) {
  const ConvDims d = conv_dims(input, weight, bias);
  Tensor out({d.cout, d.h, d.w});
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  const double *in = input.data().data();
  const double *wt = weight.data().data();
  double *o = out.data().data();
  for (std::size_t co = 0; co < d.cout; ++co)
    std::fill_n(o + co * d.h * d.w, d.h * d.w, bias[co]);
  for_each_tap(d, [&](std::size_t co, std::size_t ci, std::size_t tap,
                      std::ptrdiff_t dy, std::ptrdiff_t dx, std::ptrdiff_t y0,
                      std::ptrdiff_t y1, std::ptrdiff_t x0, std::ptrdiff_t x1) {
    const double wv = wt[tap];
    if (wv == 0.0)
      return;
    for (std::ptrdiff_t y = y0; y < y1; ++y) {
      const double *src =
          in + (static_cast<std::ptrdiff_t>(ci * d.h) + y + dy) * w + dx;
      double *dst = o + (static_cast<std::ptrdiff_t>(co * d.h) + y) * w;
      for (std::ptrdiff_t x = x0; x < x1; ++x)
        dst[x] += wv * src[x];
    }
  });
  return out;
}

const Graph::Node &Graph::node(Var v) const {
  if (v.id >= nodes_.size())
    throw Error(Errc::DetachedNode,
                "node id " + std::to_string(v.id) + " not in graph");
  return nodes_[v.id];
}

const Tensor &Graph::value(Var v) const { return node(v).value; }

Var Graph::push(Op op, std::array<std::size_t, 3> inputs, Tensor value,
                Tensor aux) {
  if (!value.all_finite())
    throw Error(Errc::NonFinite,
                "op " + std::to_string(static_cast<int>(op)) +
                    " produced NaN/Inf");
  bool needs = op == Op::Parameter;
  for (auto id : inputs)
    if (id != Var::npos)
      needs = needs || nodes_[id].needs_grad;
  nodes_.push_back(Node{op, inputs, std::move(value), std::move(aux), needs});
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  return push(Op::Constant, {Var::npos, Var::npos, Var::npos}, std::move(value));
}

Var Graph::parameter(Tensor value) {
  return push(Op::Parameter, {Var::npos, Var::npos, Var::npos}, std::move(value));
}

Var Graph::add(Var a, Var b) {
  const Tensor &x = node(a).value, &y = node(b).value;
  require_same_shape(x, y, "add");
  return push(Op::Add, {a.id, b.id, Var::npos}, x + y);
}

Var Graph::sub(Var a, Var b) {
  const Tensor &x = node(a).value, &y = node(b).value;
  require_same_shape(x, y, "sub");
  return push(Op::Sub, {a.id, b.id, Var::npos}, x - y);
}

Var Graph::mul(Var a, Var b) {
  const Tensor &x = node(a).value, &y = node(b).value;
  require_same_shape(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] *= y[i];
  return push(Op::Mul, {a.id, b.id, Var::npos}, std::move(out));
}

Var Graph::matmul(Var a, Var b) {
  return push(Op::MatMul, {a.id, b.id, Var::npos},
              dale::matmul(node(a).value, node(b).value));
}

Var Graph::conv2d(Var input, Var weight, Var bias) {
  return push(Op::Conv2d, {input.id, weight.id, bias.id},
              conv2d_forward(node(input).value, node(weight).value,
                             node(bias).value));
}

Var Graph::relu(Var a) {
  Tensor out = node(a).value;
  for (auto &v : out.data())
    v = v > 0.0 ? v : 0.0;
  return push(Op::Relu, {a.id, Var::npos, Var::npos}, std::move(out));
}

Var Graph::sigmoid(Var a) {
  Tensor out = node(a).value;
  for (auto &v : out.data())
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                 : std::exp(v) / (1.0 + std::exp(v));
  return push(Op::Sigmoid, {a.id, Var::npos, Var::npos}, std::move(out));
}

Var Graph::softmax_channels(Var a) {
  const Tensor &x = node(a).value;
  if (x.rank() != 3)
    throw Error(Errc::ShapeMismatch,
                "softmax_channels expects [C,H,W], got " +
                    shape_string(x.shape()));
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = x[p];
    for (std::size_t k = 1; k < c; ++k)
      mx = std::max(mx, x[k * plane + p]);
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double e = std::exp(x[k * plane + p] - mx);
      out[k * plane + p] = e;
      total += e;
    }
    for (std::size_t k = 0; k < c; ++k)
      out[k * plane + p] /= total;
  }
  return push(Op::SoftmaxChannels, {a.id, Var::npos, Var::npos},
              std::move(out));
}

Var Graph::log(Var a) {
  Tensor out = node(a).value;
  for (auto &v : out.data())
    v = std::log(std::max(v, kLogFloor));
  return push(Op::Log, {a.id, Var::npos, Var::npos}, std::move(out));
}

Var Graph::sum(Var a) {
  double s = 0.0;
  for (double v : node(a).value.data())
    s += v;
  return push(Op::Sum, {a.id, Var::npos, Var::npos}, Tensor::scalar(s));
}

Var Graph::mean(Var a) {
  const Tensor &x = node(a).value;
  if (x.empty())
    throw Error(Errc::ShapeMismatch, "mean of empty tensor");
  double s = 0.0;
  for (double v : x.data())
    s += v;
  return push(Op::Mean, {a.id, Var::npos, Var::npos},
              Tensor::scalar(s / static_cast<double>(x.size())));
}

Var Graph::weight(Var a, Tensor w) {
  const Tensor &x = node(a).value;
  if (w.size() != 1 && w.shape() != x.shape())
    throw Error(Errc::ShapeMismatch, "weight: " + shape_string(w.shape()) +
                                         " for value " +
                                         shape_string(x.shape()));
  Tensor out = x;
  if (w.size() == 1) {
    const double s = w[0];
    for (auto &v : out.data())
      v *= s;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] *= w[i];
  }
  return push(Op::Weight, {a.id, Var::npos, Var::npos}, std::move(out),
              std::move(w));
}

void Graph::backward_node(const Node &n, const Tensor &g,
                          std::vector<Tensor> &adj) const {
  auto wants = [&](std::size_t slot) {
    const std::size_t id = n.inputs[slot];
    return id != Var::npos && nodes_[id].needs_grad;
  };
  const auto in = [&](std::size_t slot) -> const Tensor & {
    return nodes_[n.inputs[slot]].value;
  };

  switch (n.op) {
  case Op::Constant:
  case Op::Parameter:
    return;
  case Op::Add:
    if (wants(0)) accumulate(adj, n.inputs[0], g);
    if (wants(1)) accumulate(adj, n.inputs[1], g);
    return;
  case Op::Sub:
    if (wants(0)) accumulate(adj, n.inputs[0], g);
    if (wants(1)) accumulate(adj, n.inputs[1], -1.0 * g);
    return;
  case Op::Mul: {
    for (std::size_t slot = 0; slot < 2; ++slot) {
      if (!wants(slot))
        continue;
      Tensor d = g;
      const Tensor &other = in(1 - slot);
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] *= other[i];
      accumulate(adj, n.inputs[slot], d);
    }
    return;
  }
  case Op::MatMul:
    if (wants(0)) accumulate(adj, n.inputs[0], dale::matmul(g, transpose(in(1))));
    if (wants(1)) accumulate(adj, n.inputs[1], dale::matmul(transpose(in(0)), g));
    return;
  case Op::Conv2d: {
    const Tensor &x = in(0), &wt = in(1), &b = in(2);
    const ConvDims d = conv_dims(x, wt, b);
    const auto w = static_cast<std::ptrdiff_t>(d.w);
    const bool want_x = wants(0), want_w = wants(1), want_b = wants(2);
    Tensor gx, gw, gb;
    if (want_x) gx = Tensor(x.shape());
    if (want_w) gw = Tensor(wt.shape());
    if (want_b) {
      gb = Tensor(b.shape());
      const std::size_t plane = d.h * d.w;
      for (std::size_t co = 0; co < d.cout; ++co) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p)
          s += g[co * plane + p];
        gb[co] = s;
      }
    }
    if (want_x || want_w) {
      const double *xs = x.data().data();
      const double *ws = wt.data().data();
      const double *gs = g.data().data();
      for_each_tap(d, [&](std::size_t co, std::size_t ci, std::size_t tap,
                          std::ptrdiff_t dy, std::ptrdiff_t dx,
                          std::ptrdiff_t y0, std::ptrdiff_t y1,
                          std::ptrdiff_t x0, std::ptrdiff_t x1) {
        const double wv = ws[tap];
        double acc = 0.0;
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          const std::ptrdiff_t src_off =
              (static_cast<std::ptrdiff_t>(ci * d.h) + y + dy) * w + dx;
          const double *grow =
              gs + (static_cast<std::ptrdiff_t>(co * d.h) + y) * w;
          if (want_w) {
            const double *xrow = xs + src_off;
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx)
              acc += grow[xx] * xrow[xx];
          }
          if (want_x && wv != 0.0) {
            double *gxrow = gx.data().data() + src_off;
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx)
              gxrow[xx] += wv * grow[xx];
          }
        }
        if (want_w)
          gw[tap] = acc;
      });
    }
    if (want_x) accumulate(adj, n.inputs[0], gx);
    if (want_w) accumulate(adj, n.inputs[1], gw);
    if (want_b) accumulate(adj, n.inputs[2], gb);
    return;
  }
  case Op::Relu: {
    Tensor d = g;
    const Tensor &x = in(0);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(x[i] > 0.0))
        d[i] = 0.0;
    accumulate(adj, n.inputs[0], d);
    return;
  }
  case Op::Sigmoid: {
    Tensor d = g;
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] *= n.value[i] * (1.0 - n.value[i]);
    accumulate(adj, n.inputs[0], d);
    return;
  }
  case Op::SoftmaxChannels: {
    const Tensor &y = n.value;
    const std::size_t c = y.dim(0), plane = y.dim(1) * y.dim(2);
    Tensor d(y.shape());
    for (std::size_t p = 0; p < plane; ++p) {
      double inner = 0.0;
      for (std::size_t k = 0; k < c; ++k)
        inner += y[k * plane + p] * g[k * plane + p];
      for (std::size_t k = 0; k < c; ++k)
        d[k * plane + p] = y[k * plane + p] * (g[k * plane + p] - inner);
    }
    accumulate(adj, n.inputs[0], d);
    return;
  }
  case Op::Log: {
    Tensor d = g;
    const Tensor &x = in(0);
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] /= std::max(x[i], kLogFloor);
    accumulate(adj, n.inputs[0], d);
    return;
  }
  case Op::Sum:
  case Op::Mean: {
    const Tensor &x = in(0);
    double s = g[0];
    if (n.op == Op::Mean)
      s /= static_cast<double>(x.size());
    accumulate(adj, n.inputs[0], Tensor(x.shape(), s));
    return;
  }
  case Op::Weight: {
    Tensor d = g;
    if (n.aux.size() == 1) {
      for (auto &v : d.data())
        v *= n.aux[0];
    } else {
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] *= n.aux[i];
    }
    accumulate(adj, n.inputs[0], d);
    return;
  }
  }
}

std::vector<Tensor> Graph::grad(Var loss, std::span<const Var> wrt) const {
  const Node &l = node(loss);
  if (l.value.size() != 1)
    throw Error(Errc::NotScalarLoss,
                "loss has shape " + shape_string(l.value.shape()));
  for (const Var &v : wrt)
    if (node(v).op != Op::Parameter)
      throw Error(Errc::DetachedNode,
                  "node " + std::to_string(v.id) + " is not a parameter");

  std::vector<Tensor> adj(loss.id + 1);
  if (l.needs_grad) {
    adj[loss.id] = Tensor(l.value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node &n = nodes_[i];
      if (adj[i].empty() || !n.needs_grad)
        continue;
      backward_node(n, adj[i], adj);
      if (n.op != Op::Parameter)
        adj[i] = Tensor(); // release intermediate adjoints early
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Var &v : wrt) {
    if (v.id <= loss.id && !adj[v.id].empty())
      out.push_back(adj[v.id]);
    else
      out.emplace_back(node(v).value.shape());
    require_finite(out.back(), "gradient");
  }
  return out;
}

} // namespace dale
