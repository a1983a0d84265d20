#include <gtest/gtest.h>

#include <cmath>

#include "dale/calib.hpp"
#include "dale/linalg.hpp"
#include "support.hpp"

using namespace dale;
using testing_support::error_code;
using testing_support::numeric_grad;
using testing_support::random_spd;
using testing_support::random_tensor;
using testing_support::rel_err;

namespace {

Tensor diag(std::vector<double> v) {
  Tensor t({v.size(), v.size()});
  for (std::size_t i = 0; i < v.size(); ++i)
    t.at(i, i) = v[i];
  return t;
}

ClassGaussian gaussian(std::uint8_t cls, std::vector<double> mean, Tensor cov) {
  ClassGaussian g;
  g.cls = cls;
  g.mean = std::move(mean);
  g.cov = std::move(cov);
  g.count = 100;
  g.weight = 100.0;
  g.usable = true;
  return g;
}

FeatureColumns random_columns(Rng &rng, std::size_t d, std::size_t n,
                              std::size_t classes, double shift = 0.0) {
  FeatureColumns c;
  c.values = random_tensor({d, n}, rng, -1.0, 1.0);
  for (std::size_t j = 0; j < n; ++j) {
    c.labels.push_back(static_cast<std::uint8_t>(j % classes));
    c.weights.push_back(rng.uniform(0.2, 1.0));
    c.pixel.push_back(j);
    for (std::size_t i = 0; i < d; ++i)
      c.values.at(i, j) += shift * double(c.labels.back() + 1);
  }
  return c;
}

// Weighted mean and covariance written out directly.
void hand_stats(const FeatureColumns &c, std::uint8_t cls, std::vector<double> &mu,
                Tensor &cov) {
  const std::size_t d = c.dim();
  mu.assign(d, 0.0);
  cov = Tensor({d, d});
  double w = 0.0;
  for (std::size_t j = 0; j < c.size(); ++j)
    if (c.labels[j] == cls) {
      w += c.weights[j];
      for (std::size_t i = 0; i < d; ++i)
        mu[i] += c.weights[j] * c.values.at(i, j);
    }
  for (auto &v : mu)
    v /= w;
  for (std::size_t j = 0; j < c.size(); ++j)
    if (c.labels[j] == cls)
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          cov.at(a, b) += c.weights[j] * (c.values.at(a, j) - mu[a]) *
                          (c.values.at(b, j) - mu[b]) / w;
}

double min_eig(const Tensor &a) { return sym_eig(a).values.front(); }

} // namespace

TEST(Bures, ScalarClosedForm) {
  const double v = bures_w2({0.0}, diag({1.0}), {3.0}, diag({4.0}));
  EXPECT_NEAR(v, 10.0, 1e-8);
}

TEST(Bures, CommutingDiagonalClosedForm) {
  EXPECT_NEAR(bures_w2({0, 0}, diag({1, 4}), {0, 0}, diag({4, 1})), 2.0, 1e-8);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const std::size_t d = 1 + rng.below(8);
    std::vector<double> a(d), b(d), m(d, 0.0);
    double expect = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      a[k] = rng.uniform(0.01, 5.0);
      b[k] = rng.uniform(0.01, 5.0);
      expect += std::pow(std::sqrt(a[k]) - std::sqrt(b[k]), 2);
    }
    EXPECT_NEAR(bures_w2(m, diag(a), m, diag(b)), expect, 1e-8);
  }
}

TEST(Bures, IdenticalGaussiansGiveZero) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const std::size_t d = 2 + rng.below(15);
    const auto s = random_spd(d, rng, 0.1);
    std::vector<double> mu(d);
    for (auto &v : mu)
      v = rng.uniform(-2, 2);
    EXPECT_NEAR(bures_w2(mu, s, mu, s), 0.0, 1e-10);
  }
}

TEST(Bures, NonNegativeAndSymmetric) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const std::size_t d = 2 + rng.below(15);
    const auto s1 = random_spd(d, rng), s2 = random_spd(d, rng);
    std::vector<double> m1(d), m2(d);
    for (std::size_t k = 0; k < d; ++k) {
      m1[k] = rng.uniform(-1, 1);
      m2[k] = rng.uniform(-1, 1);
    }
    const double ab = bures_w2(m1, s1, m2, s2), ba = bures_w2(m2, s2, m1, s1);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-8);
    EXPECT_GT(ab, 1e-6);
  }
}

TEST(Bures, DegenerateClass) {
  auto a = gaussian(0, {0.0}, diag({1.0}));
  auto b = a;
  b.usable = false;
  EXPECT_EQ(error_code([&] { bures_w2(a, b); }), Errc::DegenerateClass);
  EXPECT_EQ(bures_w2(a, a), 0.0);
}

TEST(ClassStats, TwoPixelFixture) {
  FeatureColumns c;
  c.values = Tensor({2, 2}, std::vector<double>{0, 2, 0, 0});
  c.labels = {1, 1};
  c.weights = {1, 1};
  c.pixel = {0, 1};
  CalibConfig cfg;
  cfg.min_count = 1;
  const auto st = class_stats(c, 2, cfg);
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[1].mean, (std::vector<double>{1, 0}));
  EXPECT_NEAR(st[1].cov.at(0, 0), 1.0 + 1e-6, 1e-15);
  EXPECT_EQ(st[1].cov.at(0, 1), 0.0);
  EXPECT_NEAR(st[1].cov.at(1, 1), 1e-6, 1e-18);
  EXPECT_EQ(st[1].count, 2u);
  EXPECT_FALSE(st[0].usable);
  EXPECT_EQ(st[0].count, 0u);
}

TEST(ClassStats, SinglePointIsRidge) {
  FeatureColumns c;
  c.values = Tensor({3, 3}, std::vector<double>{1, 5, 2, 4, 1, 0, 3, 3, 3});
  c.labels = {0, 0, 0};
  c.weights = {0, 2.5, 0};
  c.pixel = {0, 1, 2};
  const auto st = class_stats(c, 1, {});
  EXPECT_EQ(st[0].mean, (std::vector<double>{5, 1, 3}));
  EXPECT_EQ(st[0].cov, 1e-6 * Tensor::identity(3));
  EXPECT_EQ(st[0].count, 1u);
  EXPECT_FALSE(st[0].usable);
}

TEST(ClassStats, MatchesHandFormulaAndIgnoresOrder) {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto c = random_columns(rng, 4, 30, 2);
    CalibConfig cfg;
    cfg.ridge = 0.0;
    const auto st = class_stats(c, 2, cfg);
    FeatureColumns rev = c;
    for (std::size_t j = 0; j < c.size(); ++j) {
      const std::size_t r = c.size() - 1 - j;
      rev.labels[j] = c.labels[r];
      rev.weights[j] = c.weights[r];
      for (std::size_t k = 0; k < 4; ++k)
        rev.values.at(k, j) = c.values.at(k, r);
    }
    const auto st_rev = class_stats(rev, 2, cfg);
    for (std::uint8_t cls = 0; cls < 2; ++cls) {
      std::vector<double> mu;
      Tensor cov;
      hand_stats(c, cls, mu, cov);
      EXPECT_LT(rel_err(st[cls].mean, mu), 1e-13);
      EXPECT_LT(rel_err(st[cls].cov.values(), cov.values()), 1e-12);
      EXPECT_LT(rel_err(st_rev[cls].cov.values(), cov.values()), 1e-12);
      EXPECT_TRUE(st[cls].usable);
    }
  }
}

TEST(ClassStats, AccumulatorMatchesBatchStats) {
  Rng rng(5);
  const std::size_t d = 3, h = 5, w = 6;
  GaussianAccumulator acc(d, 2);
  FeatureColumns all;
  for (int img = 0; img < 4; ++img) {
    const auto f = random_tensor({d, h, w}, rng);
    LabelMap l(h, w);
    WeightMap wt(h, w);
    for (std::size_t k = 0; k < h * w; ++k) {
      l.data[k] = static_cast<std::uint8_t>(rng.below(2));
      wt.data[k] = rng.uniform01() < 0.2 ? 0.0 : rng.uniform01();
    }
    acc.add(f, l, wt);
    append_columns(all, denoise_features(f, l, wt, Mask(h, w, 1)));
  }
  const auto a = acc.finalize({}), b = class_stats(all, 2, {});
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_LT(rel_err(a[c].mean, b[c].mean), 1e-12);
    EXPECT_LT(rel_err(a[c].cov.values(), b[c].cov.values()), 1e-9);
    EXPECT_EQ(a[c].count, b[c].count);
    EXPECT_EQ(a[c].usable, b[c].usable);
  }
}

TEST(Denoise, ExcludesRatherThanZeroes) {
  Tensor f({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  LabelMap l(2, 2, 0);
  WeightMap w(2, 2, 1.0);
  const auto all = denoise_features(f, l, w, Mask(2, 2, 1));
  EXPECT_EQ(all.size(), 4u);
  EXPECT_EQ(all.values, Tensor({1, 4}, std::vector<double>{1, 2, 3, 4}));
  const auto none = denoise_features(f, l, w, Mask(2, 2, 0));
  EXPECT_EQ(none.size(), 0u);
  CalibConfig cfg;
  cfg.min_count = 1;
  const auto st = class_stats(none, 2, cfg);
  EXPECT_EQ(st[0].count, 0u);
  EXPECT_EQ(st[1].count, 0u);

  Mask half(2, 2, 0);
  half(0, 1) = 1;
  half(1, 1) = 1;
  const auto kept = denoise_features(f, l, w, half);
  EXPECT_EQ(kept.pixel, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(class_stats(kept, 1, cfg)[0].mean, std::vector<double>{3.0});

  EXPECT_EQ(error_code([&] { denoise_features(f, l, w, Mask(3, 2, 1)); }),
            Errc::ShapeMismatch);
}

TEST(Perturb, Fixtures) {
  Rng rng(0);
  double eps = -1.0;
  EXPECT_EQ(perturb_cov(Tensor::identity(2), rng, 0.0, &eps), Tensor::identity(2));
  EXPECT_EQ(eps, 0.0);
  Rng a(9), b(9);
  const auto p = perturb_cov(Tensor::identity(2), a, 0.01, &eps);
  const double expect = b.uniform(0.0, 0.01);
  EXPECT_EQ(eps, expect);
  EXPECT_EQ(p, Tensor({2, 2}, std::vector<double>{1 + eps, eps, eps, 1 + eps}));
  EXPECT_GE(eps, 0.0);
  EXPECT_LT(eps, 0.01);
}

TEST(Perturb, NeverLowersEigenvalues) {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 + rng.below(10);
    const auto s = random_spd(d, rng);
    const auto before = sym_eig(s).values;
    const auto after = sym_eig(perturb_cov(s, rng, 0.5)).values;
    for (std::size_t k = 0; k < d; ++k)
      EXPECT_GE(after[k], before[k] - 1e-12);
    EXPECT_GE(min_eig(perturb_cov(s, rng, 0.01)), min_eig(s) - 1e-12);
  }
}

TEST(Alignment, ZeroAtMatchedStatistics) {
  Rng rng(7);
  const auto c = random_columns(rng, 3, 24, 2);
  const auto target = class_stats(c, 2, {});
  const auto r = lw_loss_and_grad(c, target, 2, {});
  EXPECT_NEAR(r.loss, 0.0, 1e-10);
  for (double v : r.grad.data())
    EXPECT_NEAR(v, 0.0, 1e-6);
  EXPECT_EQ(r.classes_used, 2u);
}

TEST(Alignment, LossIsSumOfClassDistances) {
  Rng rng(8);
  const auto fz = random_columns(rng, 3, 24, 2);
  const auto tg = class_stats(random_columns(rng, 3, 40, 2, 0.5), 2, {});
  const auto fs = class_stats(fz, 2, {});
  const auto r = lw_loss_and_grad(fz, tg, 2, {});
  const double expect = bures_w2(tg[0], fs[0]) + bures_w2(tg[1], fs[1]);
  EXPECT_NEAR(r.loss, expect, 1e-10);
  ASSERT_EQ(r.per_class.size(), 2u);
}

TEST(Alignment, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  int instances = 0;
  for (int trial = 0; trial < 30; ++trial) {
    auto fz = random_columns(rng, 3, 12, 2);
    const auto tg = class_stats(random_columns(rng, 3, 30, 2, 0.7), 2, {});
    const auto r = lw_loss_and_grad(fz, tg, 2, {});
    const auto numeric = numeric_grad(
        [&](std::vector<double> &x) {
          auto c = fz;
          c.values = Tensor(fz.values.shape(), x);
          return lw_loss_and_grad(c, tg, 2, {}).loss;
        },
        fz.values.values(), 1e-5);
    EXPECT_LE(rel_err(r.grad.values(), numeric), 1e-4) << "trial " << trial;
    ++instances;
  }
  EXPECT_EQ(instances, 30);
}

TEST(Alignment, MissingClassIsSkipped) {
  Rng rng(10);
  auto fz = random_columns(rng, 3, 12, 1);
  const auto tg = class_stats(random_columns(rng, 3, 30, 2, 0.7), 2, {});
  const auto r = lw_loss_and_grad(fz, tg, 2, {});
  EXPECT_EQ(r.classes_used, 1u);
  EXPECT_NEAR(r.loss, bures_w2(tg[0], class_stats(fz, 2, {})[0]), 1e-10);
  const auto none = random_columns(rng, 3, 2, 2);
  EXPECT_EQ(error_code([&] { lw_loss_and_grad(none, tg, 2, {}); }),
            Errc::DegenerateClass);
}

TEST(Alignment, GradientDescentDecreasesLoss) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto fz = random_columns(rng, 3, 20, 2);
    const auto tg = class_stats(random_columns(rng, 3, 30, 2, 0.8), 2, {});
    double prev = lw_loss_and_grad(fz, tg, 2, {}).loss;
    for (int step = 0; step < 50; ++step) {
      const auto r = lw_loss_and_grad(fz, tg, 2, {});
      for (std::size_t k = 0; k < fz.values.size(); ++k)
        fz.values[k] -= 0.05 * r.grad[k];
      const double now = lw_loss_and_grad(fz, tg, 2, {}).loss;
      EXPECT_LE(now, prev + 1e-12) << "trial " << trial << " step " << step;
      prev = now;
    }
  }
}

TEST(FuzzyLoss, Assembly) {
  WeightMap ce(1, 4), om(1, 4), m(1, 4);
  ce.data = {1.0, 2.0, 3.0, 4.0};
  om.data = {1.0, 0.5, 2.0, 1.0};
  m.data = {1.0, 1.0, 0.5, 0.0};
  const double weighted = (1.0 + 1.0 + 3.0) / (1.0 + 0.5 + 1.0);
  EXPECT_DOUBLE_EQ(fuzzy_loss(ce, om, m, 7.0, 0.0), weighted);
  const double mean_omega = (1.0 + 0.5 + 2.0) / 3.0;
  EXPECT_DOUBLE_EQ(fuzzy_loss(ce, om, m, 7.0, 0.05),
                   weighted + mean_omega * 0.05 * 7.0);
  const WeightMap ones(1, 4, 1.0);
  const double plain = (1.0 + 2.0 + 1.5) / 2.5;
  EXPECT_DOUBLE_EQ(fuzzy_loss(ce, ones, m, 2.0, 0.05), plain + 0.05 * 2.0);
  EXPECT_EQ(error_code([&] { fuzzy_loss(ce, om, m, 1.0, -1.0); }), Errc::BadRange);
  EXPECT_EQ(error_code([&] { fuzzy_loss(ce, om, WeightMap(2, 2), 1.0, 0.1); }),
            Errc::ShapeMismatch);
}
