#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dale/trainer.hpp"
#include "support.hpp"

using namespace dale;
using testing_support::error_code;

namespace {

SyntheticSplits tiny_data(std::uint64_t seed = 5, double rate = 0.3) {
  GeneratorConfig g;
  g.n = 6;
  g.height = g.width = 16;
  g.seed = seed;
  NoiseConfig noise;
  noise.seed = seed + 100;
  noise.rate = rate;
  return make_synthetic_splits(g, 2, noise);
}

RunConfig tiny_config(Mode mode = Mode::Dale) {
  RunConfig c;
  c.T = 2;
  c.lr = 1e-2;
  c.batch_size = 4;
  c.patch_h = c.patch_w = 8;
  c.hidden = 4;
  c.d = 4;
  c.pixel_cap = 32;
  c.mode = mode;
  return c;
}

std::filesystem::path scratch(const std::string &name) {
  auto dir = std::filesystem::temp_directory_path() / ("dale_trainer_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

} // namespace

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = tiny_config();
  c.tau = 0.75;
  c.omega_init = "eta";
  c.literal_masks = true;
  c.seed = 12345678901ULL;
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_EQ(config_from_json("{}"), RunConfig{});
  EXPECT_EQ(config_from_json(R"({"T": 3})").T, 3u);
}

TEST(RunConfig, RejectsUnknownKeysTypesAndRanges) {
  for (const char *text :
       {R"({"tua": 0.5})", R"({"T": "3"})", R"({"T": -1})", R"({"tau": 1.0})",
        R"({"mode": "sgd"})", R"({"literal_masks": 1})", R"({"omega_dump": "x"})",
        R"({"C": 1})", "[1, 2]", "{not json"})
    EXPECT_EQ(error_code([&] { config_from_json(text); }), Errc::BadConfig) << text;
  RunConfig c;
  c.batch_size = 0;
  EXPECT_EQ(error_code([&] { c.validate(); }), Errc::BadConfig);
  EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(RunConfig, DerivedValues) {
  RunConfig c;
  EXPECT_EQ(c.omega0(), 1.0);
  c.omega_init = "eta";
  EXPECT_EQ(c.omega0(), c.eta);
  EXPECT_EQ(c.shadow_lr(), c.lr);
  c.inner_lr = 0.5;
  EXPECT_EQ(c.shadow_lr(), 0.5);
}

TEST(Evaluate, PerfectPredictionAndEmptySplit) {
  // Images equal to their labels; a network that thresholds intensity at 0.5.
  std::vector<Sample> split = tiny_data().train;
  for (auto &s : split) {
    for (std::size_t i = 0; i < s.clean_label.size(); ++i)
      s.image[i] = s.clean_label.data[i] ? 1.0 : 0.0;
  }
  ModelConfig mc{1, 1, 2, 2};
  auto p = init_params(mc, 0);
  for (auto &t : p.tensors)
    std::fill(t.data().begin(), t.data().end(), 0.0);
  p.tensors[0][4] = 1.0;            // conv1 centre tap
  p.tensors[1][0] = -0.5;           // relu(x - 0.5)
  p.tensors[2][4] = 1.0;            // conv2 channel 0 centre tap
  p.tensors[4][1 * 2 + 0] = 100.0;  // class 1 logit
  p.tensors[5][0] = 1.0;            // class 0 logit
  const auto row = evaluate(p, split, 2);
  EXPECT_EQ(row.dice, 1.0);
  EXPECT_EQ(row.miou, 1.0);
  EXPECT_EQ(row.hd95, 0.0);
  EXPECT_EQ(row.asd, 0.0);
  EXPECT_EQ(error_code([&] { evaluate(p, {}, 2); }), Errc::EmptySplit);
}

TEST(Trainer, BudgetParityBetweenModes) {
  const auto data = tiny_data();
  Trainer dale(tiny_config(Mode::Dale), data.train, data.test);
  Trainer base(tiny_config(Mode::Baseline), data.train, data.test);
  EXPECT_EQ(dale.steps_per_iteration(), base.steps_per_iteration());
  // 2 phases x ceil(6 / 4) batches.
  EXPECT_EQ(dale.steps_per_iteration(), 4u);
  dale.run();
  base.run();
  EXPECT_EQ(dale.state().steps, base.state().steps);
  EXPECT_EQ(dale.state().steps, 8u);
  EXPECT_EQ(dale.state().history.size(), 4u);
  EXPECT_EQ(base.state().history.size(), 2u);
  std::uint64_t logged = 0;
  for (const auto &r : dale.state().history)
    logged += r.steps;
  EXPECT_EQ(logged, 8u);
}

TEST(Trainer, PhasesChainParameters) {
  const auto data = tiny_data();
  RunConfig c = tiny_config();
  c.T = 3;
  Trainer tr(c, data.train, data.test);
  const auto init = init_params(c.model(), c.seed).checksum();
  tr.run();
  const auto &h = tr.state().history;
  ASSERT_EQ(h.size(), 6u);
  EXPECT_EQ(h[0].checksum_start, init);
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(h[i].phase, i % 2 == 0 ? "nonfuzzy" : "fuzzy");
    EXPECT_EQ(h[i].t, i / 2 + 1);
    EXPECT_NE(h[i].checksum_start, h[i].checksum_end);
    if (i > 0)
      EXPECT_EQ(h[i].checksum_start, h[i - 1].checksum_end);
  }
  EXPECT_EQ(h.back().checksum_end, tr.state().params.checksum());
}

TEST(Trainer, DeterministicLogs) {
  const auto data = tiny_data();
  Trainer a(tiny_config(), data.train, data.test);
  Trainer b(tiny_config(), data.train, data.test);
  a.run();
  b.run();
  EXPECT_EQ(a.metrics_csv(), b.metrics_csv());
  EXPECT_EQ(a.diagnostics_csv(), b.diagnostics_csv());
  EXPECT_EQ(a.state().params, b.state().params);
  RunConfig other = tiny_config();
  other.seed = 1;
  Trainer c(other, data.train, data.test);
  c.run();
  EXPECT_NE(a.state().params, c.state().params);
}

TEST(Trainer, MetricsCsvLayout) {
  const auto data = tiny_data();
  Trainer tr(tiny_config(), data.train, data.test);
  tr.step();
  const auto csv = tr.metrics_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "t,phase,loss,Dice,mIoU,HD95,ASD,mean_omega_clean,mean_omega_noisy,L_W");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const auto &fz = tr.state().history[1];
  EXPECT_TRUE(std::isnan(tr.state().history[0].lw));
  EXPECT_TRUE(std::isfinite(fz.lw));
  EXPECT_GE(fz.lw, 0.0);
  EXPECT_GE(fz.mean_omega_clean, 0.0);
  EXPECT_LE(fz.mean_omega_clean, tr.config().omega_max);
}

TEST(Checkpoint, RoundTripAndBitwiseResume) {
  const auto data = tiny_data();
  RunConfig c = tiny_config();
  c.T = 3;
  Trainer full(c, data.train, data.test);
  full.run();

  Trainer first(c, data.train, data.test);
  first.step();
  const auto bytes = encode_checkpoint(first.config(), first.state());
  auto [cfg, state] = decode_checkpoint(bytes);
  EXPECT_EQ(cfg, c);
  EXPECT_EQ(state.t, 1u);
  EXPECT_EQ(state.steps, first.state().steps);
  EXPECT_EQ(state.params, first.state().params);
  EXPECT_EQ(state.adam, first.state().adam);
  ASSERT_EQ(state.conf.size(), first.state().conf.size());
  for (std::size_t i = 0; i < state.conf.size(); ++i) {
    EXPECT_EQ(state.conf[i].omega, first.state().conf[i].omega);
    EXPECT_EQ(state.conf[i].grad_omega, first.state().conf[i].grad_omega);
  }
  EXPECT_EQ(encode_checkpoint(cfg, state), bytes);

  Trainer resumed(cfg, std::move(state), data.train, data.test);
  resumed.run();
  EXPECT_EQ(resumed.state().params, full.state().params);
  EXPECT_EQ(resumed.state().adam, full.state().adam);
  const auto &a = resumed.state().history, &b = full.state().history;
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].checksum_end, b[i + 2].checksum_end);
    EXPECT_EQ(a[i].loss, b[i + 2].loss);
    EXPECT_EQ(a[i].eval.dice, b[i + 2].eval.dice);
  }
}

TEST(Checkpoint, RejectsDamagedBytes) {
  const auto data = tiny_data();
  Trainer tr(tiny_config(Mode::Baseline), data.train, data.test);
  tr.step();
  const auto bytes = encode_checkpoint(tr.config(), tr.state());
  EXPECT_EQ(error_code([&] { decode_checkpoint("XXXX" + bytes.substr(4)); }),
            Errc::BadMagic);
  EXPECT_EQ(error_code([&] { decode_checkpoint(bytes.substr(0, 3)); }),
            Errc::TruncatedFile);
  EXPECT_EQ(error_code([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 5)); }),
            Errc::TruncatedFile);
}

TEST(Trainer, CleanFlatDataHasNoFuzzySupport) {
  // Constant images with background-only labels give every patch the same
  // score, so all of them are non-fuzzy and the fuzzy phase falls back
  // without losing steps.
  auto data = tiny_data();
  for (auto *split : {&data.train, &data.test})
    for (auto &s : *split) {
      std::fill(s.image.data().begin(), s.image.data().end(), 0.5);
      std::fill(s.label.data.begin(), s.label.data.end(), 0);
      s.clean_label = s.label;
    }
  RunConfig c = tiny_config();
  c.T = 1;
  Trainer tr(c, data.train, data.test);
  tr.run();
  const auto &h = tr.state().history;
  ASSERT_EQ(h.size(), 2u);
  EXPECT_FALSE(h[0].skipped);
  EXPECT_TRUE(h[1].skipped);
  EXPECT_EQ(tr.state().steps, tr.steps_per_iteration());
  for (const auto &r : tr.regions())
    for (double v : r.masks.fuzzy.data)
      EXPECT_EQ(v, 0.0);
}

TEST(Trainer, RejectsBadInputs) {
  const auto data = tiny_data();
  EXPECT_EQ(error_code([&] { Trainer(tiny_config(), {}, data.test); }),
            Errc::EmptySplit);
  auto mixed = data.train;
  mixed.push_back(gen_synthetic(1, 20, 20, 3.0, 9)[0]);
  EXPECT_EQ(error_code([&] { Trainer(tiny_config(), mixed, data.test); }),
            Errc::ShapeMismatch);
  RunConfig bad = tiny_config();
  bad.tau = 0.0;
  EXPECT_EQ(error_code([&] { Trainer(bad, data.train, data.test); }),
            Errc::BadConfig);
}

TEST(Trainer, OmegaInitAndLiteralMasksRun) {
  const auto data = tiny_data();
  RunConfig c = tiny_config();
  c.T = 1;
  c.omega_init = "eta";
  c.literal_masks = true;
  Trainer tr(c, data.train, data.test);
  for (const auto &conf : tr.state().conf)
    for (double v : conf.omega.data)
      EXPECT_EQ(v, c.eta);
  tr.run();
  EXPECT_EQ(tr.state().steps, tr.steps_per_iteration());
  EXPECT_TRUE(std::isfinite(tr.state().history.back().loss));
}

TEST(Trainer, WritesRunDirectory) {
  const auto dir = scratch("outputs");
  const auto data = tiny_data();
  RunConfig c = tiny_config();
  c.checkpoint_every = 1;
  Trainer tr(c, data.train, data.test);
  tr.set_output(dir, "9.9.9");
  tr.run();
  EXPECT_EQ(read_file(dir / "metrics.csv"), tr.metrics_csv());
  EXPECT_EQ(read_file(dir / "diagnostics.csv"), tr.diagnostics_csv());
  const auto echo = read_file(dir / "config.json");
  EXPECT_NE(echo.find("\"tool_version\": \"9.9.9\""), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "t0001.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "t0002.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "omega" / "t0001_img0000.dlf1"));
  const auto omega = read_f32(dir / "omega" / "t0002_img0005.dlf1");
  EXPECT_EQ(omega.shape(), (Shape{2, 16, 16}));
  const auto [cfg, state] =
      decode_checkpoint(read_file(dir / "checkpoints" / "t0002.ckpt"));
  EXPECT_EQ(state.params, tr.state().params);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, GoldenMetricRow) {
  const auto data = tiny_data(5, 0.0);
  RunConfig c = tiny_config(Mode::Baseline);
  c.T = 40;
  c.lr = 5e-2;
  c.hidden = c.d = 8;
  Trainer tr(c, data.train, data.test);
  tr.run();
  // Pinned from a reference build; guards against silent changes in data
  // order, initialization or the update rule.
  const auto &r = tr.state().history.back();
  EXPECT_NEAR(r.eval.dice, 0.68395390070921991, 1e-9);
  EXPECT_NEAR(r.eval.miou, 0.69302556012233429, 1e-9);
  EXPECT_NEAR(r.eval.hd95, 2.047213595499958, 1e-9);
  EXPECT_NEAR(r.loss, 0.17100749949142269, 1e-9);
}
