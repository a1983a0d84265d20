#include "dale/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <limits>
#include <map>

#include <json.hpp>

#include "dale/error.hpp"

namespace dale {

using ojson = nlohmann::ordered_json;

namespace {

// Stream purposes; every random choice is keyed by (seed, t, purpose, index).
enum Purpose : std::uint64_t {
  kNonfuzzyOrder = 11,
  kFuzzyOrder = 12,
  kOmegaOrder = 13,
  kSupport = 14,
  kMetaBatch = 15,
  kPerturb = 16,
  kBaselineOrder = 17,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

[[noreturn]] void bad_config(const std::string &what) {
  throw Error(Errc::BadConfig, what);
}

std::vector<std::size_t> permutation(std::size_t n, Rng rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i)
    p[i] = i;
  for (std::size_t i = n; i > 1; --i)
    std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

double sum_of(const WeightMap &w) {
  double s = 0.0;
  for (double v : w.data)
    s += v;
  return s;
}

void add_into(std::vector<Tensor> &acc, const std::vector<Tensor> &g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t k = 0; k < acc[i].size(); ++k)
      acc[i][k] += g[i][k];
}

std::vector<Tensor> zeros_for(const ModelParams &p) {
  std::vector<Tensor> z;
  for (const auto &t : p.tensors)
    z.emplace_back(t.shape());
  return z;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

} // namespace

// ---------------------------------------------------------------- config

std::string mode_name(Mode m) { return m == Mode::Dale ? "dale" : "baseline"; }

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.hidden = hidden;
  m.feature_dim = d;
  m.classes = C;
  return m;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const char *key) {
    if (!ok)
      bad_config(std::string("invalid value for ") + key);
  };
  need(T >= 1, "T");
  need(K >= 1, "K");
  need(tau > 0.0 && tau < 1.0, "tau");
  need(alpha >= 0.0, "alpha");
  need(eta >= 0.0, "eta");
  need(lr > 0.0, "lr");
  need(inner_lr >= 0.0, "inner_lr");
  need(batch_size >= 1, "batch_size");
  need(patch_h >= 1, "patch_h");
  need(patch_w >= 1, "patch_w");
  need(bins >= 1, "bins");
  need(d >= 2, "d");
  need(hidden >= 1, "hidden");
  need(C >= 2 && C <= 255, "C");
  need(omega_init == "ones" || omega_init == "eta", "omega_init");
  need(phase_epochs >= 1, "phase_epochs");
  need(omega_max > 0.0, "omega_max");
  need(eps_max >= 0.0, "eps_max");
  need(ridge >= 0.0, "ridge");
  need(support_threshold >= 0.0 && support_threshold < 1.0, "support_threshold");
  need(omega_dump == "final" || omega_dump == "all" || omega_dump == "none",
       "omega_dump");
}

namespace {
ojson config_json(const RunConfig &c) {
  ojson j;
  j["T"] = c.T;
  j["K"] = c.K;
  j["tau"] = c.tau;
  j["alpha"] = c.alpha;
  j["eta"] = c.eta;
  j["lr"] = c.lr;
  j["inner_lr"] = c.inner_lr;
  j["batch_size"] = c.batch_size;
  j["patch_h"] = c.patch_h;
  j["patch_w"] = c.patch_w;
  j["bins"] = c.bins;
  j["d"] = c.d;
  j["hidden"] = c.hidden;
  j["C"] = c.C;
  j["seed"] = c.seed;
  j["mode"] = mode_name(c.mode);
  j["omega_init"] = c.omega_init;
  j["literal_masks"] = c.literal_masks;
  j["phase_epochs"] = c.phase_epochs;
  j["omega_max"] = c.omega_max;
  j["eps_max"] = c.eps_max;
  j["ridge"] = c.ridge;
  j["support_threshold"] = c.support_threshold;
  j["pixel_cap"] = c.pixel_cap;
  j["warm_start_omega"] = c.warm_start_omega;
  j["checkpoint_every"] = c.checkpoint_every;
  j["omega_dump"] = c.omega_dump;
  return j;
}

RunConfig config_apply(const ojson &j, RunConfig c) {
  if (!j.is_object())
    bad_config("config must be a JSON object");
  auto count = [](const ojson &v, const std::string &k) -> std::uint64_t {
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 &&
                                   !v.is_number_unsigned()))
      bad_config(k + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  };
  auto real = [](const ojson &v, const std::string &k) {
    if (!v.is_number())
      bad_config(k + " must be a number");
    return v.get<double>();
  };
  auto text = [](const ojson &v, const std::string &k) {
    if (!v.is_string())
      bad_config(k + " must be a string");
    return v.get<std::string>();
  };
  auto flag = [](const ojson &v, const std::string &k) {
    if (!v.is_boolean())
      bad_config(k + " must be a boolean");
    return v.get<bool>();
  };
  using Setter = std::function<void(const ojson &, const std::string &)>;
  const std::map<std::string, Setter> setters = {
      {"T", [&](auto &v, auto &k) { c.T = count(v, k); }},
      {"K", [&](auto &v, auto &k) { c.K = count(v, k); }},
      {"tau", [&](auto &v, auto &k) { c.tau = real(v, k); }},
      {"alpha", [&](auto &v, auto &k) { c.alpha = real(v, k); }},
      {"eta", [&](auto &v, auto &k) { c.eta = real(v, k); }},
      {"lr", [&](auto &v, auto &k) { c.lr = real(v, k); }},
      {"inner_lr", [&](auto &v, auto &k) { c.inner_lr = real(v, k); }},
      {"batch_size", [&](auto &v, auto &k) { c.batch_size = count(v, k); }},
      {"patch_h", [&](auto &v, auto &k) { c.patch_h = count(v, k); }},
      {"patch_w", [&](auto &v, auto &k) { c.patch_w = count(v, k); }},
      {"bins", [&](auto &v, auto &k) { c.bins = static_cast<int>(count(v, k)); }},
      {"d", [&](auto &v, auto &k) { c.d = count(v, k); }},
      {"hidden", [&](auto &v, auto &k) { c.hidden = count(v, k); }},
      {"C", [&](auto &v, auto &k) { c.C = count(v, k); }},
      {"seed", [&](auto &v, auto &k) { c.seed = count(v, k); }},
      {"mode",
       [&](auto &v, auto &k) {
         const auto m = text(v, k);
         if (m == "dale")
           c.mode = Mode::Dale;
         else if (m == "baseline")
           c.mode = Mode::Baseline;
         else
           bad_config("mode must be dale or baseline");
       }},
      {"omega_init", [&](auto &v, auto &k) { c.omega_init = text(v, k); }},
      {"literal_masks", [&](auto &v, auto &k) { c.literal_masks = flag(v, k); }},
      {"phase_epochs", [&](auto &v, auto &k) { c.phase_epochs = count(v, k); }},
      {"omega_max", [&](auto &v, auto &k) { c.omega_max = real(v, k); }},
      {"eps_max", [&](auto &v, auto &k) { c.eps_max = real(v, k); }},
      {"ridge", [&](auto &v, auto &k) { c.ridge = real(v, k); }},
      {"support_threshold",
       [&](auto &v, auto &k) { c.support_threshold = real(v, k); }},
      {"pixel_cap", [&](auto &v, auto &k) { c.pixel_cap = count(v, k); }},
      {"warm_start_omega",
       [&](auto &v, auto &k) { c.warm_start_omega = flag(v, k); }},
      {"checkpoint_every",
       [&](auto &v, auto &k) { c.checkpoint_every = count(v, k); }},
      {"omega_dump", [&](auto &v, auto &k) { c.omega_dump = text(v, k); }},
  };
  for (const auto &[key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end())
      bad_config("unknown config key '" + key + "'");
    it->second(value, key);
  }
  c.validate();
  return c;
}
} // namespace

std::string config_to_json(const RunConfig &c) { return config_json(c).dump(2) + "\n"; }

RunConfig config_from_json(std::string_view text, RunConfig base) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::exception &e) {
    bad_config(std::string("config is not valid JSON: ") + e.what());
  }
  return config_apply(j, std::move(base));
}

// ------------------------------------------------------------ evaluation

MetricRow evaluate(const ModelParams &params, const std::vector<Sample> &split,
                   std::size_t classes, bool against_clean) {
  if (split.empty())
    throw Error(Errc::EmptySplit, "cannot evaluate an empty split");
  MetricRow mean;
  for (const auto &s : split) {
    const auto out = forward_values(params, s.image);
    const auto row = score_prediction(predict(out.logits),
                                      against_clean ? s.clean_label : s.label,
                                      classes);
    mean.dice += row.dice;
    mean.miou += row.miou;
    mean.hd95 += row.hd95;
    mean.asd += row.asd;
  }
  const auto n = static_cast<double>(split.size());
  mean.dice /= n;
  mean.miou /= n;
  mean.hd95 /= n;
  mean.asd /= n;
  return mean;
}

// ------------------------------------------------------------ checkpoint

namespace {
constexpr char kCkptMagic[4] = {'D', 'L', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T> void put(std::string &out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T> T get(std::string_view bytes, std::size_t at) {
  if (at + sizeof(T) > bytes.size())
    throw Error(Errc::TruncatedFile, "checkpoint ends early");
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}
} // namespace

std::string encode_checkpoint(const RunConfig &config, const TrainState &state) {
  std::string blocks;
  ojson index;
  index["t"] = state.t;
  index["steps"] = state.steps;
  index["config"] = config_json(config);
  index["adam_step"] = state.adam.step;
  ojson params = ojson::array();
  for (std::size_t i = 0; i < state.params.tensors.size(); ++i) {
    const std::string enc = encode_f32(state.params.tensors[i]);
    params.push_back({{"name", state.params.names[i]},
                      {"shape", state.params.tensors[i].shape()},
                      {"offset", blocks.size()},
                      {"bytes", enc.size()}});
    blocks += enc;
  }
  index["params"] = params;

  // Exact doubles so a resumed run continues bit for bit.
  std::vector<double> exact = state.params.flatten();
  for (const auto *moments : {&state.adam.m, &state.adam.v})
    for (const auto &t : *moments)
      exact.insert(exact.end(), t.data().begin(), t.data().end());
  ojson has_grad = ojson::array();
  std::size_t h = 0, w = 0;
  for (const auto &c : state.conf) {
    h = c.omega.height;
    w = c.omega.width;
    exact.insert(exact.end(), c.omega.data.begin(), c.omega.data.end());
    exact.insert(exact.end(), c.grad_omega.data.begin(), c.grad_omega.data.end());
    for (auto e : c.evaluated.data)
      exact.push_back(e);
    has_grad.push_back(c.has_grad);
  }
  index["images"] = state.conf.size();
  index["height"] = h;
  index["width"] = w;
  index["eta"] = state.conf.empty() ? 0.0 : state.conf.front().eta;
  index["has_grad"] = has_grad;
  index["exact_offset"] = blocks.size();
  index["exact_count"] = exact.size();
  for (double v : exact)
    put(blocks, v);

  const std::string idx = index.dump();
  std::string out(kCkptMagic, 4);
  put(out, kCkptVersion);
  put(out, static_cast<std::uint64_t>(idx.size()));
  out += idx;
  out += blocks;
  return out;
}

std::pair<RunConfig, TrainState> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16)
    throw Error(Errc::TruncatedFile, "checkpoint header is incomplete");
  if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw Error(Errc::BadMagic, "not a checkpoint file");
  if (get<std::uint32_t>(bytes, 4) != kCkptVersion)
    throw Error(Errc::BadMagic, "unsupported checkpoint version");
  const auto idx_len = get<std::uint64_t>(bytes, 8);
  if (16 + idx_len > bytes.size())
    throw Error(Errc::TruncatedFile, "checkpoint index is incomplete");
  ojson index;
  try {
    index = ojson::parse(bytes.substr(16, idx_len));
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::BadMagic, std::string("checkpoint index: ") + e.what());
  }
  const std::string_view payload = bytes.substr(16 + idx_len);

  RunConfig config = config_apply(index.at("config"), RunConfig{});
  TrainState st;
  st.t = index.at("t").get<std::size_t>();
  st.steps = index.at("steps").get<std::uint64_t>();
  st.params.config = config.model();
  for (const auto &p : index.at("params")) {
    const auto off = p.at("offset").get<std::size_t>();
    const auto len = p.at("bytes").get<std::size_t>();
    if (off + len > payload.size())
      throw Error(Errc::TruncatedFile, "checkpoint tensor block is incomplete");
    st.params.names.push_back(p.at("name").get<std::string>());
    st.params.tensors.push_back(decode_f32(payload.substr(off, len)));
  }
  const auto exact_off = index.at("exact_offset").get<std::size_t>();
  const auto exact_count = index.at("exact_count").get<std::size_t>();
  if (exact_off + exact_count * 8 > payload.size())
    throw Error(Errc::TruncatedFile, "checkpoint exact section is incomplete");
  std::size_t cursor = exact_off;
  auto next = [&] {
    const double v = get<double>(payload, cursor);
    cursor += 8;
    return v;
  };
  for (auto &t : st.params.tensors)
    for (auto &v : t.data())
      v = next();
  AdamConfig ac;
  ac.lr = config.lr;
  st.adam = AdamState::zeros_like(st.params, ac);
  st.adam.step = index.at("adam_step").get<std::uint64_t>();
  for (auto *moments : {&st.adam.m, &st.adam.v})
    for (auto &t : *moments)
      for (auto &v : t.data())
        v = next();
  const auto images = index.at("images").get<std::size_t>();
  const auto h = index.at("height").get<std::size_t>();
  const auto w = index.at("width").get<std::size_t>();
  const auto eta = index.at("eta").get<double>();
  const auto &has_grad = index.at("has_grad");
  for (std::size_t i = 0; i < images; ++i) {
    auto c = ConfidenceMap::init(h, w, 0.0, eta);
    for (auto &v : c.omega.data)
      v = next();
    for (auto &v : c.grad_omega.data)
      v = next();
    for (auto &v : c.evaluated.data)
      v = next() != 0.0;
    c.has_grad = has_grad.at(i).get<bool>();
    st.conf.push_back(std::move(c));
  }
  if (cursor != exact_off + exact_count * 8)
    throw Error(Errc::ShapeMismatch, "checkpoint exact section size disagrees");
  return {config, std::move(st)};
}

// --------------------------------------------------------------- trainer

Trainer::Trainer(RunConfig config, std::vector<Sample> train,
                 std::vector<Sample> test)
    : config_(std::move(config)), train_(std::move(train)),
      test_(std::move(test)) {
  config_.validate();
  state_.params = init_params(config_.model(), config_.seed);
  AdamConfig ac;
  ac.lr = config_.lr;
  state_.adam = AdamState::zeros_like(state_.params, ac);
  prepare();
}

Trainer::Trainer(RunConfig config, TrainState state, std::vector<Sample> train,
                 std::vector<Sample> test)
    : config_(std::move(config)), state_(std::move(state)),
      train_(std::move(train)), test_(std::move(test)) {
  config_.validate();
  prepare();
}

void Trainer::prepare() {
  if (train_.empty())
    throw Error(Errc::EmptySplit, "training split is empty");
  const std::size_t h = train_.front().height(), w = train_.front().width();
  for (const auto *split : {&train_, &test_})
    for (const auto &s : *split) {
      if (s.height() != h || s.width() != w)
        throw Error(Errc::ShapeMismatch, "all images must share one size");
      for (auto v : s.label.data)
        if (v >= config_.C)
          throw Error(Errc::BadRange, "label class >= C");
    }
  PartitionConfig pc;
  pc.patch_h = config_.patch_h;
  pc.patch_w = config_.patch_w;
  pc.bins = config_.bins;
  pc.tau = config_.tau;
  regions_.clear();
  for (const auto &s : train_)
    regions_.push_back(split(s, pc));

  auto build = [&](PhaseData &pd, auto mask_of) {
    pd = {};
    for (std::size_t i = 0; i < train_.size(); ++i) {
      const WeightMap &m = mask_of(i);
      Sample s = train_[i];
      WeightMap wts = m;
      if (config_.literal_masks) {
        const std::size_t plane = m.size();
        for (std::size_t c = 0; c < s.image.dim(0); ++c)
          for (std::size_t p = 0; p < plane; ++p)
            s.image[c * plane + p] *= m.data[p];
        for (std::size_t p = 0; p < plane; ++p)
          s.label.data[p] = static_cast<std::uint8_t>(
              std::lround(m.data[p] * s.label.data[p]));
        wts = WeightMap(h, w, 1.0);
      }
      pd.total += sum_of(wts);
      pd.samples.push_back(std::move(s));
      pd.weights.push_back(std::move(wts));
    }
  };
  build(nonfuzzy_, [&](std::size_t i) -> const WeightMap & {
    return regions_[i].masks.nonfuzzy;
  });
  build(fuzzy_, [&](std::size_t i) -> const WeightMap & {
    return regions_[i].masks.fuzzy;
  });
  all_ = {};
  for (const auto &s : train_) {
    all_.samples.push_back(s);
    all_.weights.emplace_back(h, w, 1.0);
    all_.total += static_cast<double>(h * w);
  }
  if (state_.conf.empty())
    for (std::size_t i = 0; i < train_.size(); ++i)
      state_.conf.push_back(
          ConfidenceMap::init(h, w, config_.omega0(), config_.eta));
  if (state_.conf.size() != train_.size())
    throw Error(Errc::ShapeMismatch, "one confidence map per training image");
}

Rng Trainer::stream(std::uint64_t purpose, std::uint64_t index) const {
  return Rng(config_.seed).split({state_.t + 1, purpose, index});
}

std::uint64_t Trainer::steps_per_iteration() const {
  const std::size_t n = train_.size(), b = config_.batch_size;
  return 2 * config_.phase_epochs * ((n + b - 1) / b);
}

IterationLog Trainer::plain_epochs(const PhaseData &data, std::size_t epochs,
                                   std::uint64_t purpose, const char *phase,
                                   GaussianAccumulator *stats) {
  IterationLog log;
  log.phase = phase;
  const std::size_t n = data.samples.size(), b = config_.batch_size;
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = permutation(n, stream(purpose, e));
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t end = std::min(n, start + b);
      double total = 0.0;
      for (std::size_t i = start; i < end; ++i)
        total += sum_of(data.weights[order[i]]);
      std::vector<Tensor> grads;
      double batch_loss = 0.0;
      if (total > 0.0) {
        for (std::size_t i = start; i < end; ++i) {
          const std::size_t j = order[i];
          Graph g;
          const auto vars = bind_params(g, state_.params);
          const auto out = forward(g, vars, data.samples[j].image);
          const Var loss = weighted_ce(g, out.logits, data.samples[j].label,
                                       data.weights[j], 1.0 / total);
          batch_loss += g.value(loss).item();
          add_into(grads, g.grad(loss, vars));
          if (stats)
            stats->add(g.value(out.features), data.samples[j].label,
                       data.weights[j]);
        }
      } else {
        grads = zeros_for(state_.params);
      }
      adam_step(state_.params, grads, state_.adam);
      ++state_.steps;
      ++log.steps;
      loss_sum += batch_loss;
      ++batches;
    }
  }
  log.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  return log;
}

IterationLog Trainer::nonfuzzy_phase(std::vector<ClassGaussian> &target) {
  const std::uint64_t start = state_.params.checksum();
  IterationLog log;
  if (nonfuzzy_.total <= 0.0) {
    std::cerr << "warning: t=" << state_.t + 1
              << " non-fuzzy region set is empty; phase skipped\n";
    log.phase = "nonfuzzy";
    log.skipped = true;
  } else {
    log = plain_epochs(nonfuzzy_, config_.phase_epochs, kNonfuzzyOrder,
                       "nonfuzzy", nullptr);
  }
  // Frozen non-fuzzy statistics of theta_n.
  GaussianAccumulator acc(config_.d, config_.C);
  for (std::size_t i = 0; i < train_.size(); ++i) {
    if (sum_of(nonfuzzy_.weights[i]) <= 0.0)
      continue;
    const auto fv = forward_values(state_.params, nonfuzzy_.samples[i].image);
    acc.add(fv.features, nonfuzzy_.samples[i].label, nonfuzzy_.weights[i]);
  }
  CalibConfig cc;
  cc.ridge = config_.ridge;
  target = acc.finalize(cc);
  for (auto &g : target) {
    Rng r = stream(kPerturb, g.cls);
    g.cov = perturb_cov(g.cov, r, config_.eps_max);
  }
  log.mean_omega_clean = log.mean_omega_noisy = log.lw = kNaN;
  log.indicator_precision = log.noise_base_rate = kNaN;
  finish_log(log, start);
  return log;
}

void Trainer::omega_phase() {
  if (!config_.warm_start_omega)
    for (auto &c : state_.conf)
      c = ConfidenceMap::init(c.omega.height, c.omega.width, config_.omega0(),
                              config_.eta);
  MetaConfig mc;
  mc.inner_lr = config_.shadow_lr();
  mc.eta = config_.eta;
  mc.omega_max = config_.omega_max;
  mc.omega_init = config_.omega0();
  mc.support_threshold = config_.support_threshold;
  mc.pixel_cap = config_.pixel_cap;
  mc.rounds = config_.K;

  std::vector<std::size_t> nf_pool;
  for (std::size_t i = 0; i < train_.size(); ++i)
    if (sum_of(nonfuzzy_.weights[i]) > 0.0)
      nf_pool.push_back(i);
  if (nf_pool.empty())
    return;

  const ModelParams theta_n = state_.params;
  const std::size_t n = train_.size(), b = config_.batch_size;
  const auto order = permutation(n, stream(kOmegaOrder));
  for (std::size_t start = 0, batch = 0; start < n; start += b, ++batch) {
    std::vector<FuzzyItem> items;
    for (std::size_t i = start; i < std::min(n, start + b); ++i) {
      const std::size_t j = order[i];
      auto pixels = fuzzy_support(regions_[j].masks.fuzzy, config_.support_threshold,
                                  config_.pixel_cap, stream(kSupport, j));
      if (pixels.empty())
        continue;
      items.push_back({&fuzzy_.samples[j], &state_.conf[j], std::move(pixels)});
    }
    if (items.empty())
      continue;
    std::vector<std::size_t> pool = nf_pool;
    Rng r = stream(kMetaBatch, batch);
    const std::size_t take = std::min(b, pool.size());
    std::vector<NonFuzzyItem> nf;
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(pool[i], pool[i + r.below(pool.size() - i)]);
      nf.push_back({&nonfuzzy_.samples[pool[i]], &nonfuzzy_.weights[pool[i]]});
    }
    omega_loop(theta_n, items, nf, mc);
  }
}

IterationLog Trainer::fuzzy_phase(const std::vector<ClassGaussian> &target) {
  const std::uint64_t start_sum = state_.params.checksum();
  if (fuzzy_.total <= 0.0) {
    std::cerr << "warning: t=" << state_.t + 1
              << " fuzzy region set is empty; training on the non-fuzzy set\n";
    IterationLog log = plain_epochs(nonfuzzy_, config_.phase_epochs, kFuzzyOrder,
                                    "fuzzy", nullptr);
    log.skipped = true;
    log.lw = kNaN;
    omega_stats(log);
    finish_log(log, start_sum);
    return log;
  }

  const std::size_t n = train_.size(), b = config_.batch_size, d = config_.d;
  std::vector<Mask> indicator;
  for (const auto &c : state_.conf)
    indicator.push_back(c.has_grad ? noise_indicator(c)
                                   : Mask(c.omega.height, c.omega.width, 0));
  CalibConfig cc;
  cc.alpha = config_.alpha;
  cc.ridge = config_.ridge;
  cc.support_threshold = config_.support_threshold;
  bool any_target = false;
  for (const auto &g : target)
    any_target = any_target || g.usable;

  IterationLog log;
  log.phase = "fuzzy";
  double loss_sum = 0.0, lw_sum = 0.0;
  std::size_t batches = 0, lw_batches = 0;
  for (std::size_t e = 0; e < config_.phase_epochs; ++e) {
    const auto order = permutation(n, stream(kFuzzyOrder, e));
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t end = std::min(n, start + b);
      std::vector<Graph> graphs(end - start);
      std::vector<std::vector<Var>> vars;
      std::vector<ForwardOut> outs;
      std::vector<WeightMap> ce_w;
      std::vector<std::size_t> col_begin;
      FeatureColumns cols;
      double total = 0.0, omega_sum = 0.0;
      std::size_t support = 0;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t j = order[i];
        Graph &g = graphs[i - start];
        vars.push_back(bind_params(g, state_.params));
        outs.push_back(forward(g, vars.back(), fuzzy_.samples[j].image));
        WeightMap w = fuzzy_.weights[j];
        const auto &omega = state_.conf[j].omega;
        const auto &mf = regions_[j].masks.fuzzy;
        for (std::size_t p = 0; p < w.size(); ++p) {
          w.data[p] *= omega.data[p];
          total += w.data[p];
          if (mf.data[p] > config_.support_threshold) {
            omega_sum += omega.data[p];
            ++support;
          }
        }
        ce_w.push_back(std::move(w));
        col_begin.push_back(cols.size());
        append_columns(cols, denoise_features(g.value(outs.back().features),
                                              fuzzy_.samples[j].label, mf,
                                              indicator[j]));
      }
      col_begin.push_back(cols.size());

      AlignmentResult align;
      bool have_lw = false;
      if (any_target && config_.alpha > 0.0 && cols.size() > 0) {
        try {
          align = lw_loss_and_grad(cols, target, config_.C, cc);
          have_lw = true;
        } catch (const Error &err) {
          if (err.code() != Errc::DegenerateClass)
            throw;
        }
      }
      const double mean_omega =
          support ? omega_sum / static_cast<double>(support) : 0.0;
      const double coef = config_.alpha * mean_omega;

      std::vector<Tensor> grads;
      double batch_loss = have_lw ? coef * align.loss : 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t k = i - start, j = order[i];
        Graph &g = graphs[k];
        Var loss;
        bool has_term = false;
        if (total > 0.0) {
          loss = weighted_ce(g, outs[k].logits, fuzzy_.samples[j].label, ce_w[k],
                             1.0 / total);
          batch_loss += g.value(loss).item();
          has_term = true;
        }
        if (have_lw && col_begin[k + 1] > col_begin[k]) {
          const auto &fv = g.value(outs[k].features);
          const std::size_t plane = fv.dim(1) * fv.dim(2);
          Tensor gf(fv.shape());
          for (std::size_t c = col_begin[k]; c < col_begin[k + 1]; ++c)
            for (std::size_t a = 0; a < d; ++a)
              gf[a * plane + cols.pixel[c]] = coef * align.grad.at(a, c);
          const Var lw_term = g.sum(g.weight(outs[k].features, std::move(gf)));
          loss = has_term ? g.add(loss, lw_term) : lw_term;
          has_term = true;
        }
        if (has_term)
          add_into(grads, g.grad(loss, vars[k]));
      }
      if (grads.empty())
        grads = zeros_for(state_.params);
      adam_step(state_.params, grads, state_.adam);
      ++state_.steps;
      ++log.steps;
      loss_sum += batch_loss;
      ++batches;
      if (have_lw) {
        lw_sum += align.loss;
        ++lw_batches;
      }
    }
  }
  log.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  log.lw = lw_batches ? lw_sum / static_cast<double>(lw_batches) : kNaN;
  omega_stats(log);
  finish_log(log, start_sum);
  return log;
}

void Trainer::omega_stats(IterationLog &log) const {
  double clean_sum = 0.0, noisy_sum = 0.0;
  std::size_t clean_n = 0, noisy_n = 0, flagged = 0, flagged_noisy = 0;
  for (std::size_t i = 0; i < train_.size(); ++i) {
    const auto &c = state_.conf[i];
    const auto &noise = train_[i].noise_mask;
    for (std::size_t p = 0; p < c.omega.size(); ++p) {
      if (!c.evaluated.data[p])
        continue;
      const bool is_noise = noise.data[p] != 0;
      if (is_noise) {
        noisy_sum += c.omega.data[p];
        ++noisy_n;
      } else {
        clean_sum += c.omega.data[p];
        ++clean_n;
      }
      if (!(c.grad_omega.data[p] > 0.0)) {
        ++flagged;
        flagged_noisy += is_noise;
      }
    }
  }
  auto ratio = [](double a, std::size_t b) {
    return b ? a / static_cast<double>(b) : kNaN;
  };
  log.mean_omega_clean = ratio(clean_sum, clean_n);
  log.mean_omega_noisy = ratio(noisy_sum, noisy_n);
  log.indicator_precision = ratio(static_cast<double>(flagged_noisy), flagged);
  log.noise_base_rate = ratio(static_cast<double>(noisy_n), clean_n + noisy_n);
}

void Trainer::finish_log(IterationLog &log, std::uint64_t checksum_start) {
  log.t = state_.t + 1;
  log.checksum_start = checksum_start;
  log.checksum_end = state_.params.checksum();
  log.eval = evaluate(state_.params, test_.empty() ? train_ : test_, config_.C);
  log.eval_noisy =
      evaluate(state_.params, test_.empty() ? train_ : test_, config_.C, false);
}

void Trainer::dale_iteration() {
  std::vector<ClassGaussian> target;
  IterationLog nf = nonfuzzy_phase(target);
  omega_phase();
  IterationLog fz = fuzzy_phase(target);
  ++state_.t;
  state_.history.push_back(std::move(nf));
  state_.history.push_back(std::move(fz));
  write_outputs();
}

void Trainer::baseline_iteration() {
  const std::uint64_t start = state_.params.checksum();
  IterationLog log = plain_epochs(all_, 2 * config_.phase_epochs, kBaselineOrder,
                                  "baseline", nullptr);
  log.mean_omega_clean = log.mean_omega_noisy = log.lw = kNaN;
  log.indicator_precision = log.noise_base_rate = kNaN;
  finish_log(log, start);
  ++state_.t;
  state_.history.push_back(std::move(log));
  write_outputs();
}

void Trainer::step() {
  if (config_.mode == Mode::Dale)
    dale_iteration();
  else
    baseline_iteration();
}

void Trainer::run() {
  while (state_.t < config_.T) {
    step();
    const auto &last = state_.history.back();
    std::cerr << "t=" << state_.t << " phase=" << last.phase
              << " loss=" << fmt(last.loss) << " dice=" << fmt(last.eval.dice)
              << " hd95=" << fmt(last.eval.hd95) << "\n";
  }
}

std::string Trainer::metrics_csv() const {
  std::string out = "t,phase,loss,Dice,mIoU,HD95,ASD,mean_omega_clean,"
                    "mean_omega_noisy,L_W\n";
  for (const auto &r : state_.history)
    out += std::to_string(r.t) + "," + r.phase + "," + fmt(r.loss) + "," +
           fmt(r.eval.dice) + "," + fmt(r.eval.miou) + "," + fmt(r.eval.hd95) +
           "," + fmt(r.eval.asd) + "," + fmt(r.mean_omega_clean) + "," +
           fmt(r.mean_omega_noisy) + "," + fmt(r.lw) + "\n";
  return out;
}

std::string Trainer::diagnostics_csv() const {
  std::string out = "t,phase,steps,skipped,noisy_Dice,noisy_mIoU,noisy_HD95,"
                    "noisy_ASD,indicator_precision,noise_base_rate,"
                    "checksum_start,checksum_end\n";
  char hex[2][24];
  for (const auto &r : state_.history) {
    std::snprintf(hex[0], sizeof hex[0], "%016llx",
                  static_cast<unsigned long long>(r.checksum_start));
    std::snprintf(hex[1], sizeof hex[1], "%016llx",
                  static_cast<unsigned long long>(r.checksum_end));
    out += std::to_string(r.t) + "," + r.phase + "," + std::to_string(r.steps) +
           "," + (r.skipped ? "1" : "0") + "," + fmt(r.eval_noisy.dice) + "," +
           fmt(r.eval_noisy.miou) + "," + fmt(r.eval_noisy.hd95) + "," +
           fmt(r.eval_noisy.asd) + "," + fmt(r.indicator_precision) + "," +
           fmt(r.noise_base_rate) + "," + hex[0] + "," + hex[1] + "\n";
  }
  return out;
}

void Trainer::save_checkpoint(const std::filesystem::path &path) const {
  write_file(path, encode_checkpoint(config_, state_));
}

void Trainer::set_output(std::filesystem::path dir, std::string tool_version) {
  out_dir_ = std::move(dir);
  ojson echo = config_json(config_);
  if (!tool_version.empty())
    echo["tool_version"] = tool_version;
  write_file(out_dir_ / "config.json", echo.dump(2) + "\n");
}

void Trainer::write_outputs() const {
  if (out_dir_.empty())
    return;
  write_file(out_dir_ / "metrics.csv", metrics_csv());
  write_file(out_dir_ / "diagnostics.csv", diagnostics_csv());
  char name[64];
  const std::size_t t = state_.t;
  const bool last = t == config_.T;
  if (last || (config_.checkpoint_every && t % config_.checkpoint_every == 0)) {
    std::snprintf(name, sizeof name, "t%04zu.ckpt", t);
    save_checkpoint(out_dir_ / "checkpoints" / name);
  }
  if (config_.mode == Mode::Dale &&
      (config_.omega_dump == "all" || (config_.omega_dump == "final" && last)))
    for (std::size_t i = 0; i < state_.conf.size(); ++i) {
      const auto &c = state_.conf[i];
      const std::size_t plane = c.omega.size();
      Tensor both({2, c.omega.height, c.omega.width});
      for (std::size_t p = 0; p < plane; ++p) {
        both[p] = c.omega.data[p];
        both[plane + p] = c.grad_omega.data[p];
      }
      std::snprintf(name, sizeof name, "t%04zu_img%04zu.dlf1", t, i);
      write_f32(out_dir_ / "omega" / name, both);
    }
}

} // namespace dale
