#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dale/tensor.hpp"

namespace dale {

/// One image with its (possibly corrupted) training label, the generator's
/// ground truth, and the set of pixels where the two differ.
struct Sample {
  Tensor image;         // [channels, H, W], values in [0, 1]
  LabelMap label;       // training label, class indices
  LabelMap clean_label; // ground truth
  Mask noise_mask;      // 1 where label != clean_label

  std::size_t height() const noexcept { return label.height; }
  std::size_t width() const noexcept { return label.width; }
  /// Channel mean as an H x W map.
  WeightMap intensity() const;
};

struct GeneratorConfig {
  std::size_t n = 200;
  std::size_t height = 32;
  std::size_t width = 32;
  double blur_sigma = 3.0;
  std::size_t classes = 2;
  std::size_t channels = 1;
  double background_level = 0.25;
  double lesion_level = 0.75;
  double texture_amplitude = 0.05; // low-frequency sinusoid
  double pixel_noise = 0.08;       // uniform +-pixel_noise
  std::uint64_t seed = 0;
};

/// Synthetic lesion images: 1-3 irregular blobs of class >= 1 on a textured
/// class-0 background. The image is the blurred clean mask mapped to
/// intensity levels plus texture, clipped to [0, 1]. Throws Errc::BadDims
/// unless n >= 1 and 8 <= H, W <= 256.
std::vector<Sample> gen_synthetic(const GeneratorConfig &config);
std::vector<Sample> gen_synthetic(std::size_t n, std::size_t h, std::size_t w,
                                  double blur_sigma, std::uint64_t seed);

/// Pixels with at least one in-image 4-neighbor of a different class.
Mask class_boundary(const LabelMap &label);

/// Pixels within Chebyshev distance band-1 of a class_boundary pixel, so
/// band 1 is the boundary itself.
Mask boundary_band(const LabelMap &label, int band);

enum class NoiseModel { BoundaryBand, Uniform };

struct NoiseConfig {
  double rate = 0.3;
  int band = 2;
  NoiseModel model = NoiseModel::BoundaryBand;
  std::uint64_t seed = 0;
};

/// Starts from the clean label and flips exactly round(rate * |candidates|)
/// candidate pixels, chosen uniformly without replacement. Candidates are
/// the boundary band of the clean label (or every pixel for
/// NoiseModel::Uniform). With two classes a flip is 1 - c; otherwise a
/// uniformly chosen different class.
Sample inject_noise(const Sample &sample, double rate, int band,
                    std::uint64_t seed,
                    NoiseModel model = NoiseModel::BoundaryBand,
                    std::size_t classes = 2);

struct SyntheticSplits {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// gen.n training and test_n test samples from disjoint streams of gen.seed,
/// each corrupted by inject_noise with a per-image seed drawn from
/// noise.seed. gen.classes is used for the flips.
SyntheticSplits make_synthetic_splits(const GeneratorConfig &gen,
                                      std::size_t test_n,
                                      const NoiseConfig &noise);

// Binary PGM ("P5", maxval 255). Comments after the magic are accepted.
using ByteMap = Grid<std::uint8_t>;
std::string encode_pgm(const ByteMap &map);
ByteMap decode_pgm(std::string_view bytes);
void write_pgm(const std::filesystem::path &path, const ByteMap &map);
ByteMap read_pgm(const std::filesystem::path &path);

/// Soft values in [0,1] stored as round(v * 255), and back.
ByteMap to_bytes(const WeightMap &map);
WeightMap from_bytes(const ByteMap &map);

// "DLF1" raw float tensors: magic, u32 rank, rank x u32 dims, then
// little-endian float32 values in row-major order.
std::string encode_f32(const Tensor &t);
Tensor decode_f32(std::string_view bytes);
/// Size in bytes of the encoded tensor that starts at `bytes`.
std::size_t encoded_f32_size(std::string_view bytes);
void write_f32(const std::filesystem::path &path, const Tensor &t);
Tensor read_f32(const std::filesystem::path &path);

std::string read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, std::string_view bytes);

struct ManifestEntry {
  std::string image;
  std::string label;
  std::string clean;
  std::string noise;
  std::string split; // "train" or "test"
};

struct Manifest {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 2;
  std::vector<ManifestEntry> entries;
  std::string generator_json = "{}"; // config echo, verbatim JSON
};

struct Dataset {
  Manifest manifest;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Writes PGMs for every sample plus manifest.json into `dir`.
void write_dataset(const std::filesystem::path &dir,
                   const std::vector<Sample> &train,
                   const std::vector<Sample> &test,
                   const std::string &generator_json, std::size_t classes);

/// Loads and validates a dataset directory. Every referenced file must
/// exist, parse, and match the manifest's height and width.
Dataset load_dataset(const std::filesystem::path &dir);

std::string manifest_to_json(const Manifest &m);
Manifest manifest_from_json(std::string_view text);

} // namespace dale
