#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dale/calib.hpp"
#include "dale/confidence.hpp"
#include "dale/dataio.hpp"
#include "dale/metrics.hpp"
#include "dale/partition.hpp"
#include "dale/segmodel.hpp"

namespace dale {

enum class Mode { Dale, Baseline };

struct RunConfig {
  std::size_t T = 20;
  std::size_t K = 1;
  double tau = 0.9;
  double alpha = 0.05;
  double eta = 0.1;      // omega step size
  double lr = 3e-4;
  double inner_lr = 0.0; // shadow SGD step; 0 means lr
  std::size_t batch_size = 24;
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  int bins = 32;
  std::size_t d = 8;
  std::size_t hidden = 8;
  std::size_t C = 2;
  std::uint64_t seed = 0;
  Mode mode = Mode::Dale;
  std::string omega_init = "ones"; // "ones" or "eta" (omega_0 = eta)
  bool literal_masks = false;      // multiply images and labels by masks
  std::size_t phase_epochs = 1;
  double omega_max = 2.0;
  double eps_max = 0.01;
  double ridge = 1e-6;
  double support_threshold = 0.01;
  std::size_t pixel_cap = 256;
  bool warm_start_omega = true;
  std::size_t checkpoint_every = 0; // 0: final checkpoint only
  std::string omega_dump = "final"; // "final", "all" or "none"

  /// Throws Errc::BadConfig naming the first offending key.
  void validate() const;
  double omega0() const { return omega_init == "eta" ? eta : 1.0; }
  double shadow_lr() const { return inner_lr > 0.0 ? inner_lr : lr; }
  ModelConfig model() const;
  bool operator==(const RunConfig &) const = default;
};

std::string mode_name(Mode m);
std::string config_to_json(const RunConfig &c);
/// Keys present in `text` override `base`; unknown keys and wrong types
/// throw Errc::BadConfig.
RunConfig config_from_json(std::string_view text, RunConfig base = {});

/// One logged phase. Columns that do not apply to a phase hold NaN.
struct IterationLog {
  std::size_t t = 0;
  std::string phase; // "nonfuzzy", "fuzzy" or "baseline"
  double loss = 0.0; // mean training loss over the phase's batches
  MetricRow eval;    // test split vs clean labels
  double mean_omega_clean = 0.0;
  double mean_omega_noisy = 0.0;
  double lw = 0.0;
  // Diagnostics.
  MetricRow eval_noisy; // test split vs noisy labels
  double indicator_precision = 0.0; // P(noise | indicator false)
  double noise_base_rate = 0.0;     // P(noise) over evaluated pixels
  std::uint64_t checksum_start = 0;
  std::uint64_t checksum_end = 0;
  std::uint64_t steps = 0; // optimizer steps taken in this phase
  bool skipped = false;    // phase had zero total mask weight
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  std::size_t t = 0; // completed outer iterations
  std::uint64_t steps = 0;
  std::vector<ConfidenceMap> conf; // one per training image
  std::vector<IterationLog> history;
};

/// Mean metric row over a split. Throws Errc::EmptySplit.
MetricRow evaluate(const ModelParams &params, const std::vector<Sample> &split,
                   std::size_t classes, bool against_clean = true);

std::string encode_checkpoint(const RunConfig &config, const TrainState &state);
/// Returns the config and state; history is not stored.
std::pair<RunConfig, TrainState> decode_checkpoint(std::string_view bytes);

class Trainer {
public:
  Trainer(RunConfig config, std::vector<Sample> train, std::vector<Sample> test);
  /// Resumes from a decoded checkpoint.
  Trainer(RunConfig config, TrainState state, std::vector<Sample> train,
          std::vector<Sample> test);

  /// Writes config.json and, from then on, metrics.csv, diagnostics.csv,
  /// checkpoints and omega dumps into `dir`.
  void set_output(std::filesystem::path dir, std::string tool_version = "");

  void dale_iteration();
  void baseline_iteration();
  /// One outer iteration of the configured mode.
  void step();
  /// Steps until t == T.
  void run();

  /// Optimizer steps one outer iteration takes in either mode.
  std::uint64_t steps_per_iteration() const;

  const RunConfig &config() const noexcept { return config_; }
  const TrainState &state() const noexcept { return state_; }
  const std::vector<RegionSample> &regions() const noexcept { return regions_; }
  const std::vector<Sample> &train() const noexcept { return train_; }
  const std::vector<Sample> &test() const noexcept { return test_; }

  std::string metrics_csv() const;
  std::string diagnostics_csv() const;
  void save_checkpoint(const std::filesystem::path &path) const;

private:
  struct PhaseData {
    std::vector<Sample> samples; // images and labels as trained on
    std::vector<WeightMap> weights;
    double total = 0.0;
  };

  void prepare();
  IterationLog nonfuzzy_phase(std::vector<ClassGaussian> &target);
  void omega_phase();
  IterationLog fuzzy_phase(const std::vector<ClassGaussian> &target);
  IterationLog plain_epochs(const PhaseData &data, std::size_t epochs,
                            std::uint64_t purpose, const char *phase,
                            GaussianAccumulator *stats);
  void finish_log(IterationLog &log, std::uint64_t checksum_start);
  void omega_stats(IterationLog &log) const;
  void write_outputs() const;
  Rng stream(std::uint64_t purpose, std::uint64_t index = 0) const;

  RunConfig config_;
  TrainState state_;
  std::vector<Sample> train_;
  std::vector<Sample> test_;
  std::vector<RegionSample> regions_;
  PhaseData nonfuzzy_;
  PhaseData fuzzy_;
  PhaseData all_;
  std::filesystem::path out_dir_;
};

} // namespace dale
