// Command-line front end: gen-data, partition, train, eval, inspect-omega.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dale/dataio.hpp"
#include "dale/error.hpp"
#include "dale/partition.hpp"
#include "dale/trainer.hpp"

#ifndef DALE_VERSION
#define DALE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace dale;

namespace {

constexpr int kUsage = 1;
constexpr int kDataError = 2;

struct Failure {
  int code;
  std::string message;
};

void prepare_out(const fs::path &dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw Failure{kDataError, dir.string() + " exists and is not a directory"};
    if (!fs::is_empty(dir) && !force)
      throw Failure{kDataError,
                    dir.string() + " is not empty (use --force to reuse it)"};
  }
  fs::create_directories(dir);
}

std::string tool_version() { return std::string("dale ") + DALE_VERSION; }

void write_json(const fs::path &path, const ordered_json &j) {
  write_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::size_t n = 200;
  std::size_t test_n = 50;
  std::size_t hw = 32;
  double blur = 3.0;
  double noise = 0.3;
  int band = 2;
  std::string model = "band";
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
};

int gen_data(const GenArgs &a) {
  GeneratorConfig g;
  g.n = a.n;
  g.height = g.width = a.hw;
  g.blur_sigma = a.blur;
  g.seed = a.seed;
  NoiseConfig nc;
  nc.rate = a.noise;
  nc.band = a.band;
  nc.seed = a.seed;
  nc.model = a.model == "uniform" ? NoiseModel::Uniform : NoiseModel::BoundaryBand;
  if (a.noise < 0.0 || a.noise > 1.0 || a.band < 1)
    throw Failure{kDataError, "--noise must be in [0, 1] and --band >= 1"};

  ordered_json echo = {{"tool_version", tool_version()},
                       {"n", a.n},
                       {"test_n", a.test_n},
                       {"height", a.hw},
                       {"width", a.hw},
                       {"blur", a.blur},
                       {"noise", a.noise},
                       {"band", a.band},
                       {"noise_model", a.model},
                       {"seed", a.seed}};
  prepare_out(a.out, a.force);
  write_json(fs::path(a.out) / "config.json", echo);
  std::cerr << "generating " << a.n << " train + " << a.test_n << " test images\n";
  const auto splits = make_synthetic_splits(g, a.test_n, nc);
  write_dataset(a.out, splits.train, splits.test, echo.dump(), g.classes);
  std::cerr << "wrote " << a.out << "\n";
  return 0;
}

// --------------------------------------------------------------- partition

struct PartitionArgs {
  std::string data;
  std::string out;
  double tau = 0.9;
  std::size_t patch = 16;
  int bins = 32;
  bool force = false;
};

int partition(const PartitionArgs &a) {
  PartitionConfig pc;
  pc.tau = a.tau;
  pc.patch_h = pc.patch_w = a.patch;
  pc.bins = a.bins;
  prepare_out(a.out, a.force);
  write_json(fs::path(a.out) / "config.json",
             {{"tool_version", tool_version()},
              {"data", a.data},
              {"tau", a.tau},
              {"patch", a.patch},
              {"bins", a.bins}});
  const auto ds = load_dataset(a.data);
  ordered_json scores = ordered_json::array();
  char name[48];
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const auto r = split(ds.train[i], pc);
    std::snprintf(name, sizeof name, "fuzzy_%04zu.pgm", i);
    write_pgm(fs::path(a.out) / name, to_bytes(r.masks.fuzzy));
    std::snprintf(name, sizeof name, "nonfuzzy_%04zu.pgm", i);
    write_pgm(fs::path(a.out) / name, to_bytes(r.masks.nonfuzzy));
    scores.push_back({{"image", i},
                      {"rows", r.scores.rows},
                      {"cols", r.scores.cols},
                      {"r", r.scores.r},
                      {"e", r.scores.e},
                      {"m", r.scores.m}});
  }
  write_json(fs::path(a.out) / "scores.json", scores);
  std::cerr << "partitioned " << ds.train.size() << " images\n";
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  bool force = false;
  std::optional<std::string> mode;
  std::optional<std::size_t> T, K, batch, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, tau, alpha, eta;
};

int train(const TrainArgs &a) {
  RunConfig cfg;
  std::optional<TrainState> state;
  if (!a.resume.empty()) {
    auto [c, s] = decode_checkpoint(read_file(a.resume));
    cfg = c;
    state = std::move(s);
  }
  if (!a.config.empty())
    cfg = config_from_json(read_file(a.config), cfg);
  ordered_json over;
  if (a.mode) over["mode"] = *a.mode;
  if (a.T) over["T"] = *a.T;
  if (a.K) over["K"] = *a.K;
  if (a.batch) over["batch_size"] = *a.batch;
  if (a.epochs) over["phase_epochs"] = *a.epochs;
  if (a.seed) over["seed"] = *a.seed;
  if (a.lr) over["lr"] = *a.lr;
  if (a.tau) over["tau"] = *a.tau;
  if (a.alpha) over["alpha"] = *a.alpha;
  if (a.eta) over["eta"] = *a.eta;
  if (!over.empty())
    cfg = config_from_json(over.dump(), cfg);

  prepare_out(a.out, a.force);
  auto ds = load_dataset(a.data);
  std::unique_ptr<Trainer> trainer;
  if (state)
    trainer = std::make_unique<Trainer>(cfg, std::move(*state), std::move(ds.train),
                                        std::move(ds.test));
  else
    trainer = std::make_unique<Trainer>(cfg, std::move(ds.train), std::move(ds.test));
  trainer->set_output(a.out, tool_version());
  std::cerr << "training mode=" << mode_name(cfg.mode) << " T=" << cfg.T
            << " from t=" << trainer->state().t << "\n";
  trainer->run();
  return 0;
}

// -------------------------------------------------------------------- eval

int eval(const std::string &ckpt, const std::string &data,
         const std::string &split_name, const std::string &labels) {
  if (split_name != "test" && split_name != "train")
    throw Failure{kUsage, "--split must be test or train"};
  if (labels != "clean" && labels != "noisy")
    throw Failure{kUsage, "--labels must be clean or noisy"};
  const auto [cfg, st] = decode_checkpoint(read_file(ckpt));
  const auto ds = load_dataset(data);
  const auto row = evaluate(st.params, split_name == "test" ? ds.test : ds.train,
                            cfg.C, labels == "clean");
  ordered_json j = {{"checkpoint", ckpt}, {"t", st.t},      {"split", split_name},
                    {"labels", labels},   {"Dice", row.dice}, {"mIoU", row.miou},
                    {"HD95", row.hd95},   {"ASD", row.asd}};
  std::cout << j.dump() << "\n";
  return 0;
}

// ----------------------------------------------------------- inspect-omega

int inspect_omega(const std::string &ckpt, const std::string &out, bool force) {
  const auto [cfg, st] = decode_checkpoint(read_file(ckpt));
  prepare_out(out, force);
  write_json(fs::path(out) / "config.json",
             {{"tool_version", tool_version()}, {"checkpoint", ckpt}, {"t", st.t}});
  char name[48];
  for (std::size_t i = 0; i < st.conf.size(); ++i) {
    const auto &c = st.conf[i];
    const std::size_t plane = c.omega.size();
    Tensor both({2, c.omega.height, c.omega.width});
    double gmax = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      both[p] = c.omega.data[p];
      both[plane + p] = c.grad_omega.data[p];
      gmax = std::max(gmax, std::abs(c.grad_omega.data[p]));
    }
    std::snprintf(name, sizeof name, "omega_%04zu.dlf1", i);
    write_f32(fs::path(out) / name, both);
    // Previews: omega over [0, omega_max], grad_omega centred at 128.
    WeightMap w(c.omega.height, c.omega.width), g(c.omega.height, c.omega.width);
    for (std::size_t p = 0; p < plane; ++p) {
      w.data[p] = std::clamp(c.omega.data[p] / cfg.omega_max, 0.0, 1.0);
      g.data[p] = gmax > 0.0 ? 0.5 + 0.5 * c.grad_omega.data[p] / gmax : 0.5;
    }
    std::snprintf(name, sizeof name, "omega_%04zu.pgm", i);
    write_pgm(fs::path(out) / name, to_bytes(w));
    std::snprintf(name, sizeof name, "grad_%04zu.pgm", i);
    write_pgm(fs::path(out) / name, to_bytes(g));
  }
  std::cerr << "wrote " << st.conf.size() << " confidence maps\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Alternating region-aware training for noisy segmentation labels"};
  app.set_version_flag("--version", tool_version());
  app.require_subcommand(1);

  GenArgs ga;
  auto *gen = app.add_subcommand("gen-data", "write a synthetic noisy-label dataset");
  gen->add_option("--n", ga.n, "training images")->capture_default_str();
  gen->add_option("--test-n", ga.test_n, "test images")->capture_default_str();
  gen->add_option("--hw", ga.hw, "image height and width")->capture_default_str();
  gen->add_option("--blur", ga.blur, "Gaussian blur sigma")->capture_default_str();
  gen->add_option("--noise", ga.noise, "fraction of band pixels flipped")
      ->capture_default_str();
  gen->add_option("--band", ga.band, "noise band width in pixels")->capture_default_str();
  gen->add_option("--noise-model", ga.model, "band or uniform")
      ->check(CLI::IsMember({"band", "uniform"}))
      ->capture_default_str();
  gen->add_option("--seed", ga.seed)->capture_default_str();
  gen->add_option("--out", ga.out, "output directory")->required();
  gen->add_flag("--force", ga.force, "reuse a non-empty output directory");

  PartitionArgs pa;
  auto *part = app.add_subcommand("partition", "write fuzzy/non-fuzzy masks");
  part->add_option("--data", pa.data)->required();
  part->add_option("--out", pa.out)->required();
  part->add_option("--tau", pa.tau)->capture_default_str();
  part->add_option("--patch", pa.patch)->capture_default_str();
  part->add_option("--bins", pa.bins)->capture_default_str();
  part->add_flag("--force", pa.force);

  TrainArgs ta;
  auto *tr = app.add_subcommand("train", "train one arm and log metrics");
  tr->add_option("--config", ta.config, "JSON run config");
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--out", ta.out)->required();
  tr->add_option("--resume", ta.resume, "continue from a checkpoint");
  tr->add_flag("--force", ta.force);
  tr->add_option("--mode", ta.mode)->check(CLI::IsMember({"dale", "baseline"}));
  tr->add_option("--T", ta.T);
  tr->add_option("--K", ta.K);
  tr->add_option("--batch", ta.batch);
  tr->add_option("--phase-epochs", ta.epochs);
  tr->add_option("--seed", ta.seed);
  tr->add_option("--lr", ta.lr);
  tr->add_option("--tau", ta.tau);
  tr->add_option("--alpha", ta.alpha);
  tr->add_option("--eta", ta.eta);

  std::string ckpt, data, split_name = "test", labels = "clean";
  auto *ev = app.add_subcommand("eval", "score a checkpoint; JSON on stdout");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--split", split_name)->capture_default_str();
  ev->add_option("--labels", labels)->capture_default_str();

  std::string ickpt, iout;
  bool iforce = false;
  auto *io = app.add_subcommand("inspect-omega", "dump confidence maps");
  io->add_option("--ckpt", ickpt)->required();
  io->add_option("--out", iout)->required();
  io->add_flag("--force", iforce);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*gen)
      return gen_data(ga);
    if (*part)
      return partition(pa);
    if (*tr)
      return train(ta);
    if (*ev)
      return eval(ckpt, data, split_name, labels);
    if (*io)
      return inspect_omega(ickpt, iout, iforce);
  } catch (const Failure &f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}
