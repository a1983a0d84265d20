#include "dale/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dale/error.hpp"
#include "dale/rng.hpp"

namespace dale {

namespace fs = std::filesystem;
using nlohmann::json;

WeightMap Sample::intensity() const {
  const std::size_t c = image.dim(0), plane = height() * width();
  WeightMap out(height(), width());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p)
      out.data[p] += image[k * plane + p];
  for (auto &v : out.data)
    v /= static_cast<double>(c);
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0)
    return {1.0};
  const auto radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + radius];
  }
  for (auto &v : k)
    v /= total;
  return k;
}

// Separable blur with clamp-to-edge borders.
WeightMap blur(const WeightMap &in, double sigma) {
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1)
    return in;
  const int r = static_cast<int>(k.size() / 2);
  const int h = static_cast<int>(in.height), w = static_cast<int>(in.width);
  auto clamp = [](int v, int n) { return std::clamp(v, 0, n - 1); };
  WeightMap tmp(in.height, in.width), out(in.height, in.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * in(y, clamp(x + i, w));
      tmp(y, x) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * tmp(clamp(y + i, h), x);
      out(y, x) = s;
    }
  return out;
}

struct Blob {
  double cy, cx, radius, aspect, angle, irregularity, phase;
  int harmonic;
  std::uint8_t cls;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * std::cos(angle) + dy * std::sin(angle);
    const double v = -dx * std::sin(angle) + dy * std::cos(angle);
    const double rho = std::hypot(u / aspect, v * aspect);
    const double theta = std::atan2(v, u);
    return rho <= radius * (1.0 + irregularity * std::sin(harmonic * theta + phase));
  }
};

Sample make_sample(const GeneratorConfig &cfg, Rng rng) {
  const std::size_t h = cfg.height, w = cfg.width;
  const double side = static_cast<double>(std::min(h, w));
  const auto n_blobs = 1 + rng.below(3);
  std::vector<Blob> blobs;
  for (std::uint64_t b = 0; b < n_blobs; ++b) {
    Blob blob{};
    blob.cy = rng.uniform(0.2, 0.8) * static_cast<double>(h);
    blob.cx = rng.uniform(0.2, 0.8) * static_cast<double>(w);
    blob.radius = rng.uniform(0.12, 0.22) * side;
    blob.aspect = rng.uniform(0.75, 1.33);
    blob.angle = rng.uniform(0.0, std::numbers::pi);
    blob.irregularity = rng.uniform(0.0, 0.2);
    blob.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    blob.harmonic = 2 + static_cast<int>(rng.below(3));
    blob.cls = static_cast<std::uint8_t>(1 + b % (cfg.classes - 1));
    blobs.push_back(blob);
  }

  Sample s;
  s.clean_label = LabelMap(h, w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (const auto &blob : blobs)
        if (blob.contains(static_cast<double>(y) + 0.5,
                          static_cast<double>(x) + 0.5))
          s.clean_label(y, x) = blob.cls;

  // Class c maps to an intensity level between background and lesion.
  WeightMap base(h, w);
  const double span = cfg.lesion_level - cfg.background_level;
  for (std::size_t p = 0; p < base.size(); ++p) {
    const auto c = s.clean_label.data[p];
    base.data[p] = c == 0 ? cfg.background_level
                          : cfg.background_level +
                                span * static_cast<double>(c) /
                                    static_cast<double>(cfg.classes - 1);
  }
  const WeightMap blurred = blur(base, cfg.blur_sigma);

  const double fy = rng.uniform(0.5, 2.0), fx = rng.uniform(0.5, 2.0);
  const double tphase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.image = Tensor({cfg.channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double texture =
          cfg.texture_amplitude *
          std::sin(2.0 * std::numbers::pi *
                       (fy * static_cast<double>(y) / static_cast<double>(h) +
                        fx * static_cast<double>(x) / static_cast<double>(w)) +
                   tphase);
      const double v = blurred(y, x) + texture +
                       (cfg.pixel_noise > 0.0
                            ? rng.uniform(-cfg.pixel_noise, cfg.pixel_noise)
                            : 0.0);
      for (std::size_t c = 0; c < cfg.channels; ++c)
        s.image.at(c, y, x) =
            std::clamp(v * (1.0 - 0.1 * static_cast<double>(c)), 0.0, 1.0);
    }
  s.label = s.clean_label;
  s.noise_mask = Mask(h, w, 0);
  return s;
}

} // namespace

std::vector<Sample> gen_synthetic(const GeneratorConfig &cfg) {
  if (cfg.n < 1 || cfg.height < 8 || cfg.width < 8 || cfg.height > 256 ||
      cfg.width > 256)
    throw Error(Errc::BadDims, "need n >= 1 and 8 <= H, W <= 256");
  if (cfg.classes < 2 || cfg.classes > 255 || cfg.channels < 1)
    throw Error(Errc::BadDims, "need 2 <= classes <= 255 and channels >= 1");
  if (cfg.blur_sigma < 0.0)
    throw Error(Errc::BadRange, "blur_sigma must be >= 0");
  const Rng root(cfg.seed);
  std::vector<Sample> out;
  out.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i)
    out.push_back(make_sample(cfg, root.split(i)));
  return out;
}

std::vector<Sample> gen_synthetic(std::size_t n, std::size_t h, std::size_t w,
                                  double blur_sigma, std::uint64_t seed) {
  GeneratorConfig cfg;
  cfg.n = n;
  cfg.height = h;
  cfg.width = w;
  cfg.blur_sigma = blur_sigma;
  cfg.seed = seed;
  return gen_synthetic(cfg);
}

SyntheticSplits make_synthetic_splits(const GeneratorConfig &gen,
                                      std::size_t test_n,
                                      const NoiseConfig &noise) {
  SyntheticSplits out;
  out.train = gen_synthetic(gen);
  if (test_n > 0) {
    GeneratorConfig tg = gen;
    tg.n = test_n;
    tg.seed = Rng(gen.seed).split(0x7e57).next_u64();
    out.test = gen_synthetic(tg);
  }
  const Rng root(noise.seed);
  std::uint64_t split_id = 0;
  for (auto *samples : {&out.train, &out.test}) {
    for (std::size_t i = 0; i < samples->size(); ++i) {
      auto &s = (*samples)[i];
      s = inject_noise(s, noise.rate, noise.band,
                       root.split({split_id, i}).next_u64(), noise.model,
                       gen.classes);
    }
    ++split_id;
  }
  return out;
}

Mask class_boundary(const LabelMap &label) {
  Mask out(label.height, label.width, 0);
  const std::size_t h = label.height, w = label.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto c = label(y, x);
      if ((y > 0 && label(y - 1, x) != c) || (y + 1 < h && label(y + 1, x) != c) ||
          (x > 0 && label(y, x - 1) != c) || (x + 1 < w && label(y, x + 1) != c))
        out(y, x) = 1;
    }
  return out;
}

Mask boundary_band(const LabelMap &label, int band) {
  if (band < 1)
    throw Error(Errc::BadRange, "band must be >= 1");
  const Mask edge = class_boundary(label);
  const auto h = static_cast<std::ptrdiff_t>(label.height);
  const auto w = static_cast<std::ptrdiff_t>(label.width);
  const std::ptrdiff_t r = band - 1;
  Mask out(label.height, label.width, 0);
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      if (!edge(y, x))
        continue;
      for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y - r);
           yy <= std::min(h - 1, y + r); ++yy)
        for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x - r);
             xx <= std::min(w - 1, x + r); ++xx)
          out(yy, xx) = 1;
    }
  return out;
}

Sample inject_noise(const Sample &sample, double rate, int band,
                    std::uint64_t seed, NoiseModel model, std::size_t classes) {
  if (band < 1)
    throw Error(Errc::BadRange, "band must be >= 1");
  if (!(rate >= 0.0 && rate <= 1.0))
    throw Error(Errc::BadRange, "noise rate must lie in [0, 1]");
  Sample out = sample;
  out.label = sample.clean_label;

  std::vector<std::size_t> candidates;
  if (model == NoiseModel::BoundaryBand) {
    const Mask region = boundary_band(sample.clean_label, band);
    for (std::size_t p = 0; p < region.size(); ++p)
      if (region.data[p])
        candidates.push_back(p);
  } else {
    candidates.resize(sample.clean_label.size());
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
  }

  Rng rng(seed);
  const auto flips = static_cast<std::size_t>(
      std::llround(rate * static_cast<double>(candidates.size())));
  for (std::size_t i = 0; i < flips; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    const std::size_t p = candidates[i];
    const auto c = out.label.data[p];
    if (classes == 2) {
      out.label.data[p] = static_cast<std::uint8_t>(1 - c);
    } else {
      auto other = static_cast<std::uint8_t>(rng.below(classes - 1));
      out.label.data[p] = other >= c ? other + 1 : other;
    }
  }
  out.noise_mask = Mask(out.height(), out.width(), 0);
  for (std::size_t p = 0; p < out.label.size(); ++p)
    out.noise_mask.data[p] = out.label.data[p] != out.clean_label.data[p];
  return out;
}

// ---------------------------------------------------------------- PGM

std::string encode_pgm(const ByteMap &map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " +
                    std::to_string(map.height) + "\n255\n";
  out.append(reinterpret_cast<const char *>(map.data.data()), map.data.size());
  return out;
}

namespace {

class HeaderReader {
public:
  explicit HeaderReader(std::string_view s) : s_(s) {}

  void skip_space_and_comments() {
    while (pos_ < s_.size()) {
      const char c = s_[pos_];
      if (c == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n')
          ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number() {
    skip_space_and_comments();
    if (pos_ >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[pos_])))
      throw Error(Errc::TruncatedFile, "PGM header ends early");
    std::size_t v = 0;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(s_[pos_] - '0');
      if (v > (1u << 24))
        throw Error(Errc::BadDims, "PGM header value too large");
      ++pos_;
    }
    return v;
  }

  std::size_t pos() const noexcept { return pos_; }
  void advance(std::size_t n) noexcept { pos_ += n; }

private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

} // namespace

ByteMap decode_pgm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P5")
    throw Error(Errc::BadMagic, "not a binary PGM (P5)");
  HeaderReader rd(bytes.substr(2));
  const std::size_t w = rd.number();
  const std::size_t h = rd.number();
  const std::size_t maxval = rd.number();
  if (maxval != 255)
    throw Error(Errc::BadMaxval, "PGM maxval " + std::to_string(maxval) +
                                     " (only 255 is supported)");
  // Exactly one whitespace byte separates the header from the raster.
  const std::size_t start = 2 + rd.pos() + 1;
  if (start > bytes.size() || bytes.size() - start < w * h)
    throw Error(Errc::TruncatedFile, "PGM raster shorter than " +
                                         std::to_string(w) + "x" +
                                         std::to_string(h));
  ByteMap map(h, w);
  std::memcpy(map.data.data(), bytes.data() + start, w * h);
  return map;
}

std::string read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(Errc::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path &path, std::string_view bytes) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error(Errc::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error(Errc::Io, "short write to " + path.string());
}

void write_pgm(const fs::path &path, const ByteMap &map) {
  write_file(path, encode_pgm(map));
}

ByteMap read_pgm(const fs::path &path) { return decode_pgm(read_file(path)); }

ByteMap to_bytes(const WeightMap &map) {
  ByteMap out(map.height, map.width);
  for (std::size_t p = 0; p < map.size(); ++p)
    out.data[p] = static_cast<std::uint8_t>(
        std::lround(std::clamp(map.data[p], 0.0, 1.0) * 255.0));
  return out;
}

WeightMap from_bytes(const ByteMap &map) {
  WeightMap out(map.height, map.width);
  for (std::size_t p = 0; p < map.size(); ++p)
    out.data[p] = map.data[p] / 255.0;
  return out;
}

// ---------------------------------------------------------------- DLF1

namespace {

constexpr std::string_view kF32Magic = "DLF1";

void put_u32(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i]))
         << (8 * i);
  return v;
}

struct F32Header {
  Shape shape;
  std::size_t payload_offset;
};

F32Header parse_f32_header(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kF32Magic)
    throw Error(Errc::BadMagic, "not a DLF1 tensor");
  if (bytes.size() < 8)
    throw Error(Errc::TruncatedFile, "DLF1 header ends before rank");
  const std::uint32_t rank = get_u32(bytes, 4);
  if (rank == 0)
    throw Error(Errc::ShapeMismatch, "DLF1 tensor with empty dims");
  if (rank > 16 || bytes.size() < 8 + 4 * std::size_t{rank})
    throw Error(Errc::TruncatedFile, "DLF1 header ends before dims");
  F32Header h{Shape(rank), 8 + 4 * std::size_t{rank}};
  for (std::uint32_t i = 0; i < rank; ++i) {
    h.shape[i] = get_u32(bytes, 8 + 4 * std::size_t{i});
    if (h.shape[i] == 0)
      throw Error(Errc::ShapeMismatch, "DLF1 tensor with a zero dimension");
  }
  return h;
}

} // namespace

std::string encode_f32(const Tensor &t) {
  if (t.rank() == 0)
    throw Error(Errc::ShapeMismatch, "cannot encode a tensor with empty dims");
  std::string out(kF32Magic);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape())
    put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (double v : t.data())
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

std::size_t encoded_f32_size(std::string_view bytes) {
  const auto h = parse_f32_header(bytes);
  return h.payload_offset + 4 * shape_size(h.shape);
}

Tensor decode_f32(std::string_view bytes) {
  const auto h = parse_f32_header(bytes);
  const std::size_t n = shape_size(h.shape);
  if (bytes.size() - h.payload_offset != 4 * n)
    throw Error(Errc::ShapeMismatch,
                "DLF1 payload holds " +
                    std::to_string((bytes.size() - h.payload_offset) / 4) +
                    " values, dims " + shape_string(h.shape) + " need " +
                    std::to_string(n));
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = std::bit_cast<float>(get_u32(bytes, h.payload_offset + 4 * i));
  return Tensor(h.shape, std::move(data));
}

void write_f32(const fs::path &path, const Tensor &t) {
  write_file(path, encode_f32(t));
}

Tensor read_f32(const fs::path &path) { return decode_f32(read_file(path)); }

// ---------------------------------------------------------------- manifest

std::string manifest_to_json(const Manifest &m) {
  json j;
  j["height"] = m.height;
  j["width"] = m.width;
  j["classes"] = m.classes;
  j["entries"] = json::array();
  for (const auto &e : m.entries)
    j["entries"].push_back({{"image", e.image},
                            {"label", e.label},
                            {"clean", e.clean},
                            {"noise", e.noise},
                            {"split", e.split}});
  j["generator"] = json::parse(m.generator_json);
  return j.dump(2) + "\n";
}

Manifest manifest_from_json(std::string_view text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.classes = j.value("classes", std::size_t{2});
    for (const auto &e : j.at("entries")) {
      ManifestEntry entry;
      entry.image = e.at("image").get<std::string>();
      entry.label = e.at("label").get<std::string>();
      entry.clean = e.value("clean", entry.label);
      entry.noise = e.value("noise", std::string{});
      entry.split = e.at("split").get<std::string>();
      m.entries.push_back(std::move(entry));
    }
    m.generator_json = j.contains("generator") ? j["generator"].dump() : "{}";
  } catch (const json::exception &e) {
    throw Error(Errc::BadConfig, std::string("manifest: ") + e.what());
  }
  return m;
}

void write_dataset(const fs::path &dir, const std::vector<Sample> &train,
                   const std::vector<Sample> &test,
                   const std::string &generator_json, std::size_t classes) {
  fs::create_directories(dir);
  Manifest m;
  m.classes = classes;
  m.generator_json = generator_json;
  std::size_t index = 0;
  auto emit = [&](const Sample &s, const char *split) {
    if (m.height == 0) {
      m.height = s.height();
      m.width = s.width();
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", index++);
    ManifestEntry e{std::string("img_") + stem + ".pgm",
                    std::string("lbl_") + stem + ".pgm",
                    std::string("clean_") + stem + ".pgm",
                    std::string("noise_") + stem + ".pgm", split};
    write_pgm(dir / e.image, to_bytes(s.intensity()));
    write_pgm(dir / e.label, s.label);
    write_pgm(dir / e.clean, s.clean_label);
    write_pgm(dir / e.noise, s.noise_mask);
    m.entries.push_back(std::move(e));
  };
  for (const auto &s : train)
    emit(s, "train");
  for (const auto &s : test)
    emit(s, "test");
  write_file(dir / "manifest.json", manifest_to_json(m));
}

Dataset load_dataset(const fs::path &dir) {
  Dataset ds;
  ds.manifest = manifest_from_json(read_file(dir / "manifest.json"));
  const auto &m = ds.manifest;
  for (const auto &e : m.entries) {
    auto check = [&](const ByteMap &b, const std::string &name) {
      if (!b.same_shape(m.height, m.width))
        throw Error(Errc::ShapeMismatch,
                    name + " is " + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + ", manifest says " +
                        std::to_string(m.height) + "x" +
                        std::to_string(m.width));
      return b;
    };
    Sample s;
    const WeightMap img = from_bytes(check(read_pgm(dir / e.image), e.image));
    s.image = Tensor({1, m.height, m.width}, img.data);
    s.label = check(read_pgm(dir / e.label), e.label);
    s.clean_label = check(read_pgm(dir / e.clean), e.clean);
    for (auto c : s.label.data)
      if (c >= m.classes)
        throw Error(Errc::BadConfig, e.label + " holds class >= classes");
    s.noise_mask = Mask(m.height, m.width, 0);
    for (std::size_t p = 0; p < s.label.size(); ++p)
      s.noise_mask.data[p] = s.label.data[p] != s.clean_label.data[p];
    if (e.split == "train")
      ds.train.push_back(std::move(s));
    else if (e.split == "test")
      ds.test.push_back(std::move(s));
    else
      throw Error(Errc::BadConfig, "unknown split tag '" + e.split + "'");
  }
  return ds;
}

} // namespace dale
