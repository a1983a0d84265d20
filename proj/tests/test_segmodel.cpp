#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "dale/dataio.hpp"
#include "dale/segmodel.hpp"
#include "support.hpp"

using namespace dale;
using testing_support::error_code;
using testing_support::numeric_grad;
using testing_support::random_tensor;
using testing_support::rel_err;

namespace {

// Direct 3x3 / 1x1 convolution with zero padding on [Cin, H, W].
Tensor conv_ref(const Tensor &x, const Tensor &w, const Tensor &b) {
  const std::size_t cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
  const std::size_t h = x.dim(1), wd = x.dim(2);
  const int r = static_cast<int>(k / 2);
  Tensor y({cout, h, wd});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const int yy = int(i) + dy, xx = int(j) + dx;
              if (yy < 0 || xx < 0 || yy >= int(h) || xx >= int(wd))
                continue;
              acc += w[((o * cin + c) * k + (dy + r)) * k + (dx + r)] *
                     x.at(c, std::size_t(yy), std::size_t(xx));
            }
        y.at(o, i, j) = acc;
      }
  return y;
}

Tensor relu_ref(Tensor t) {
  for (auto &v : t.data())
    v = std::max(0.0, v);
  return t;
}

double ce_ref(const Tensor &logits, std::size_t y, std::size_t x, int cls) {
  double mx = -1e300;
  for (std::size_t c = 0; c < logits.dim(0); ++c)
    mx = std::max(mx, logits.at(c, y, x));
  double z = 0.0;
  for (std::size_t c = 0; c < logits.dim(0); ++c)
    z += std::exp(logits.at(c, y, x) - mx);
  return -(logits.at(std::size_t(cls), y, x) - mx - std::log(z));
}

std::uint64_t fnv_bytes(const Tensor &t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : t.data()) {
    unsigned char b[8];
    std::memcpy(b, &v, 8);
    for (auto c : b) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

double loss_value(const ModelParams &p, const Tensor &image, const LabelMap &l,
                  const WeightMap &w, LossNorm norm) {
  Graph g;
  const auto vars = bind_params(g, p);
  const auto out = forward(g, vars, image);
  return g.value(seg_loss(g, out.logits, l, w, norm)).item();
}

ModelParams scalar_param(double v) {
  ModelParams p;
  p.names = {"x"};
  p.tensors = {Tensor({1}, v)};
  return p;
}

} // namespace

TEST(Init, ShapesAndBounds) {
  const auto p = init_params({1, 8, 8, 2}, 0);
  ASSERT_EQ(p.names.size(), 6u);
  EXPECT_EQ(p.names[4], "head.w");
  EXPECT_EQ(p.tensors[0].shape(), (Shape{8, 1, 3, 3}));
  EXPECT_EQ(p.tensors[2].shape(), (Shape{8, 8, 3, 3}));
  EXPECT_EQ(p.tensors[4].shape(), (Shape{2, 8, 1, 1}));
  EXPECT_EQ(p.tensors[5].shape(), (Shape{2}));
  const double fan[] = {9, 0, 72, 0, 8, 0};
  for (std::size_t i = 0; i < 6; ++i)
    for (double v : p.tensors[i].data()) {
      if (fan[i] == 0)
        EXPECT_EQ(v, 0.0);
      else
        EXPECT_LE(std::abs(v), std::sqrt(1.0 / fan[i]));
    }
  EXPECT_EQ(p.scalar_count(), 72u + 8 + 576 + 8 + 16 + 2);
}

TEST(Init, DeterministicPerSeed) {
  EXPECT_EQ(init_params({}, 5), init_params({}, 5));
  EXPECT_NE(init_params({}, 5), init_params({}, 6));
  EXPECT_NE(init_params({}, 5).checksum(), init_params({}, 6).checksum());
}

TEST(Init, RejectsTinyConfigs) {
  EXPECT_EQ(error_code([] { init_params({1, 8, 1, 2}, 0); }), Errc::BadConfig);
  EXPECT_EQ(error_code([] { init_params({1, 8, 8, 1}, 0); }), Errc::BadConfig);
}

TEST(Params, FlatRoundTrip) {
  auto p = init_params({}, 2);
  const auto flat = p.flatten();
  ASSERT_EQ(flat.size(), p.scalar_count());
  auto q = init_params({}, 3);
  q.assign_flat(flat);
  EXPECT_EQ(p, q);
  std::vector<double> short_flat(3);
  EXPECT_EQ(error_code([&] { q.assign_flat(short_flat); }), Errc::ShapeMismatch);
}

TEST(Forward, MatchesDirectConvolution) {
  Rng rng(1);
  const auto p = init_params({1, 8, 4, 3}, 9);
  const auto img = random_tensor({1, 7, 9}, rng, 0.0, 1.0);
  const auto out = forward_values(p, img);
  const auto h1 = relu_ref(conv_ref(img, p.tensors[0], p.tensors[1]));
  const auto f = relu_ref(conv_ref(h1, p.tensors[2], p.tensors[3]));
  const auto z = conv_ref(f, p.tensors[4], p.tensors[5]);
  ASSERT_EQ(out.features.shape(), (Shape{4, 7, 9}));
  ASSERT_EQ(out.logits.shape(), (Shape{3, 7, 9}));
  EXPECT_LT(rel_err(out.features.values(), f.values()), 1e-14);
  EXPECT_LT(rel_err(out.logits.values(), z.values()), 1e-14);
}

TEST(Forward, ZeroWeightsGiveUniformSoftmax) {
  auto p = init_params({}, 0);
  for (auto &t : p.tensors)
    t.fill(0.0);
  Rng rng(2);
  const auto logits = forward_values(p, random_tensor({1, 6, 6}, rng, 0, 1)).logits;
  for (double v : logits.data())
    EXPECT_EQ(v, 0.0);
  const auto ce = ce_per_pixel(logits, LabelMap(6, 6, 1));
  for (double v : ce.data)
    EXPECT_NEAR(v, std::log(2.0), 1e-15);
}

TEST(Forward, InteriorTranslationEquivariance) {
  Rng rng(3);
  const auto p = init_params({}, 4);
  const auto img = random_tensor({1, 20, 20}, rng, 0, 1);
  Tensor shifted({1, 20, 20});
  for (std::size_t y = 0; y < 20; ++y)
    for (std::size_t x = 0; x < 20; ++x)
      shifted.at(0, y, x) = img.at(0, (y + 20 - 3) % 20, (x + 20 - 2) % 20);
  const auto a = forward_values(p, img).features;
  const auto b = forward_values(p, shifted).features;
  for (std::size_t c = 0; c < a.dim(0); ++c)
    for (std::size_t y = 2; y < 15; ++y)
      for (std::size_t x = 2; x < 16; ++x)
        EXPECT_NEAR(a.at(c, y, x), b.at(c, y + 3, x + 2), 1e-14);
}

TEST(Forward, GoldenLogitsChecksum) {
  const auto s = gen_synthetic(1, 16, 16, 3.0, 42)[0];
  const auto logits = forward_values(init_params({}, 42), s.image).logits;
  EXPECT_EQ(fnv_bytes(logits), 0xd1658f96280874f9ULL) << std::hex << fnv_bytes(logits);
}

TEST(Forward, ShapeErrors) {
  const auto p = init_params({}, 0);
  EXPECT_EQ(error_code([&] { forward_values(p, Tensor({2, 4, 4})); }),
            Errc::ShapeMismatch);
  EXPECT_EQ(error_code([&] { forward_values(p, Tensor({4, 4})); }),
            Errc::ShapeMismatch);
}

TEST(SegLoss, MatchesDirectFormula) {
  Rng rng(6);
  const auto p = init_params({1, 8, 8, 3}, 6);
  const auto img = random_tensor({1, 6, 5}, rng, 0, 1);
  LabelMap l(6, 5);
  WeightMap w(6, 5);
  for (std::size_t k = 0; k < l.size(); ++k) {
    l.data[k] = static_cast<std::uint8_t>(rng.below(3));
    w.data[k] = rng.uniform01();
  }
  const auto z = forward_values(p, img).logits;
  double num = 0.0, den = 0.0;
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      num += w(y, x) * ce_ref(z, y, x, l(y, x));
      den += w(y, x);
    }
  EXPECT_NEAR(loss_value(p, img, l, w, LossNorm::Normalized), num / den, 1e-13);
  EXPECT_NEAR(loss_value(p, img, l, w, LossNorm::Sum), num, 1e-12);
  const auto ce = ce_per_pixel(z, l);
  EXPECT_NEAR(ce(2, 3), ce_ref(z, 2, 3, l(2, 3)), 1e-14);
}

TEST(SegLoss, SaturatedLogitsGiveZero) {
  Graph g;
  Tensor z({2, 2, 2});
  LabelMap l(2, 2);
  l.data = {0, 1, 1, 0};
  for (std::size_t k = 0; k < 4; ++k) {
    z[k] = l.data[k] == 0 ? 40.0 : -40.0;
    z[4 + k] = -z[k];
  }
  const Var loss = seg_loss(g, g.constant(z), l, WeightMap(2, 2, 1.0));
  EXPECT_LT(g.value(loss).item(), 1e-30);
}

TEST(SegLoss, UniformLogitsGiveLn2) {
  Graph g;
  Rng rng(1);
  LabelMap l(3, 3);
  for (auto &v : l.data)
    v = static_cast<std::uint8_t>(rng.below(2));
  WeightMap w(3, 3);
  for (auto &v : w.data)
    v = rng.uniform(0.1, 1.0);
  const Var loss = seg_loss(g, g.constant(Tensor({2, 3, 3}, 0.7)), l, w);
  EXPECT_NEAR(g.value(loss).item(), std::log(2.0), 1e-15);
}

TEST(SegLoss, ZeroWeightsSelectTheOtherHalf) {
  Rng rng(7);
  const auto p = init_params({}, 7);
  const auto img = random_tensor({1, 8, 8}, rng, 0, 1);
  LabelMap l(8, 8);
  for (auto &v : l.data)
    v = static_cast<std::uint8_t>(rng.below(2));
  WeightMap half(8, 8, 0.0);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      half(y, x) = 1.0;
  const auto z = forward_values(p, img).logits;
  double direct = 0.0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      direct += ce_ref(z, y, x, l(y, x));
  EXPECT_NEAR(loss_value(p, img, l, half, LossNorm::Normalized), direct / 32.0,
              1e-14);
  EXPECT_EQ(loss_value(p, img, l, WeightMap(8, 8, 0.0), LossNorm::Normalized), 0.0);
}

TEST(SegLoss, LinearInWeightsWhenUnnormalized) {
  Rng rng(8);
  const auto p = init_params({}, 8);
  const auto img = random_tensor({1, 6, 6}, rng, 0, 1);
  LabelMap l(6, 6);
  WeightMap w1(6, 6), w2(6, 6), sum(6, 6);
  for (std::size_t k = 0; k < 36; ++k) {
    l.data[k] = static_cast<std::uint8_t>(rng.below(2));
    w1.data[k] = rng.uniform01();
    w2.data[k] = rng.uniform01();
    sum.data[k] = 2.0 * w1.data[k] + 3.0 * w2.data[k];
  }
  EXPECT_NEAR(loss_value(p, img, l, sum, LossNorm::Sum),
              2.0 * loss_value(p, img, l, w1, LossNorm::Sum) +
                  3.0 * loss_value(p, img, l, w2, LossNorm::Sum),
              1e-12);
}

TEST(SegLoss, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = init_params({1, 3, 3, 2}, 100 + trial);
    for (auto &t : p.tensors)
      for (auto &v : t.data())
        v += rng.uniform(-0.1, 0.1);
    const auto img = random_tensor({1, 5, 5}, rng, 0, 1);
    LabelMap l(5, 5);
    WeightMap w(5, 5);
    for (std::size_t k = 0; k < 25; ++k) {
      l.data[k] = static_cast<std::uint8_t>(rng.below(2));
      w.data[k] = rng.uniform01();
    }
    Graph g;
    const auto vars = bind_params(g, p);
    const auto out = forward(g, vars, img);
    const auto grads = g.grad(seg_loss(g, out.logits, l, w), vars);
    std::vector<double> analytic;
    for (const auto &t : grads)
      analytic.insert(analytic.end(), t.data().begin(), t.data().end());
    const auto numeric = numeric_grad(
        [&](std::vector<double> &x) {
          auto q = p;
          q.assign_flat(x);
          return loss_value(q, img, l, w, LossNorm::Normalized);
        },
        p.flatten(), 1e-5);
    EXPECT_LE(rel_err(analytic, numeric), 1e-5) << "trial " << trial;
  }
}

TEST(SegLoss, ShapeErrors) {
  Graph g;
  const Var z = g.constant(Tensor({2, 3, 3}));
  EXPECT_EQ(error_code([&] { seg_loss(g, z, LabelMap(3, 4), WeightMap(3, 3)); }),
            Errc::ShapeMismatch);
  EXPECT_EQ(error_code([&] { seg_loss(g, z, LabelMap(3, 3), WeightMap(2, 3)); }),
            Errc::ShapeMismatch);
}

TEST(Predict, Argmax) {
  Tensor z({3, 1, 3});
  z.at(0, 0, 0) = 1.0;
  z.at(1, 0, 1) = 1.0;
  z.at(2, 0, 2) = 1.0;
  EXPECT_EQ(predict(z).data, (std::vector<std::uint8_t>{0, 1, 2}));
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  auto p = scalar_param(0.5);
  auto st = AdamState::zeros_like(p, {1e-3});
  const std::vector<Tensor> g{Tensor({1}, 1.0)};
  adam_step(p, g, st);
  EXPECT_NEAR(0.5 - p.tensors[0][0], 1e-3, 1e-10);
  double prev = p.tensors[0][0];
  for (int i = 0; i < 5; ++i) {
    adam_step(p, g, st);
    EXPECT_NEAR(prev - p.tensors[0][0], 1e-3, 1e-10);
    prev = p.tensors[0][0];
  }
  EXPECT_EQ(st.step, 6u);
}

TEST(Adam, HandRecurrence) {
  auto p = scalar_param(0.0);
  AdamConfig c{0.1, 0.9, 0.999, 1e-8};
  auto st = AdamState::zeros_like(p, c);
  double m = 0, v = 0, x = 0;
  const double gs[] = {1.0, -2.0, 0.5, 3.0};
  for (int t = 1; t <= 4; ++t) {
    const double g = gs[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) /
         (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    adam_step(p, std::vector<Tensor>{Tensor({1}, g)}, st);
    EXPECT_NEAR(p.tensors[0][0], x, 1e-15);
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = init_params({}, 1);
  const auto before = p;
  auto st = AdamState::zeros_like(p, {});
  std::vector<Tensor> zeros;
  for (const auto &t : p.tensors)
    zeros.emplace_back(t.shape());
  adam_step(p, zeros, st);
  EXPECT_EQ(p, before);
}

TEST(Adam, DeterministicTrajectories) {
  Rng rng(12);
  auto a = init_params({}, 1), b = a;
  auto sa = AdamState::zeros_like(a, {}), sb = sa;
  for (int i = 0; i < 10; ++i) {
    std::vector<Tensor> g;
    for (const auto &t : a.tensors)
      g.push_back(random_tensor(t.shape(), rng));
    adam_step(a, g, sa);
    adam_step(b, g, sb);
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa, sb);
}

TEST(Adam, ShapeMismatch) {
  auto p = init_params({}, 1);
  auto st = AdamState::zeros_like(p, {});
  std::vector<Tensor> g(p.tensors.size(), Tensor({1}));
  EXPECT_EQ(error_code([&] { adam_step(p, g, st); }), Errc::ShapeMismatch);
  std::vector<Tensor> few(2);
  EXPECT_EQ(error_code([&] { adam_step(p, few, st); }), Errc::ShapeMismatch);
}

TEST(Sgd, PlainStep) {
  const auto p = scalar_param(1.0);
  const auto q = sgd_step(p, std::vector<Tensor>{Tensor({1}, 4.0)}, 0.25);
  EXPECT_EQ(q.tensors[0][0], 0.0);
  EXPECT_EQ(p.tensors[0][0], 1.0);
}
