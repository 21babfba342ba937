#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "floodlora/tensor.hpp"

namespace floodlora {

class Rng;

enum class Split { Train, Val, Test, Ood };

std::string to_string(Split split);
Split parse_split(const std::string& name);

inline constexpr std::size_t kSnapshotChannels = 4;
// pre_VV_asc, pre_VH_asc, pre_VV_desc, pre_VH_desc, then the post_* channels.
const std::array<std::string, 2 * kSnapshotChannels>& channel_names();

struct FloodSample {
  std::string id;
  Split split = Split::Train;
  Tensor pre;   // [4, H, W], normalized
  Tensor post;  // [4, H, W], normalized
  Tensor mask;  // [H, W], values in {0, 1}
};

// ---------------------------------------------------------------------------
// FSEG raster container: "FSEG", u16 version, u16 channels, u32 H, u32 W,
// then little-endian float32 values channel-major. Masks use the same
// header with one channel and u8 payload.

inline constexpr std::uint16_t kFsegVersion = 1;

struct Raster {
  std::uint16_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> values;
};

struct MaskRaster {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> values;
};

void write_raster(const std::filesystem::path& path, const Raster& raster);
Raster read_raster(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const MaskRaster& mask);
MaskRaster read_mask(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct ChannelStats {
  std::array<double, 2 * kSnapshotChannels> mean{};
  std::array<double, 2 * kSnapshotChannels> stddev{};
};

struct SampleRecord {
  std::string id;
  Split split = Split::Train;
  std::string pre_path;   // relative to the dataset root
  std::string post_path;
  std::string mask_path;
};

struct DatasetManifest {
  int version = 1;
  std::size_t image_size = 0;
  std::vector<std::string> channels;
  std::vector<SampleRecord> samples;
  ChannelStats stats;
  std::string generator_json;  // resolved generator config, verbatim JSON

  // Throws ValidationError on duplicate ids or missing stats.
  void validate() const;
};

enum class LabelMode {
  AllPostWater,  // flood plus permanent water
  FloodOnly,     // post-event water minus pre-event water
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Backscatter regime of a generated scene. Values in dB.
struct SceneRegime {
  double terrain_scale = 12.0;  // Gaussian smoothing sigma in pixels
  Range water_fraction{0.15, 0.45};
  Range flood_growth{0.2, 0.6};  // fraction of post-event water that is new
  double land_db = -8.0;
  double land_slope_db = 2.0;    // land brightness varies with terrain height
  double water_db = -20.0;
  double vh_offset_db = -7.0;
  double desc_offset_db = 0.8;   // descending orbit brightness shift over land
  double speckle = 0.5;          // std of multiplicative log-normal speckle (natural log)
};

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t n_train = 64;
  std::size_t n_val = 16;
  std::size_t n_test = 16;
  std::size_t n_ood = 16;
  std::uint64_t seed = 7;
  LabelMode label_mode = LabelMode::AllPostWater;
  SceneRegime regime;
  SceneRegime ood_regime = default_ood_regime();

  static SceneRegime default_ood_regime();
  void validate() const;
};

struct SyntheticScene {
  Raster pre;   // raw dB, 4 channels
  Raster post;
  MaskRaster mask;
  std::vector<std::uint8_t> pre_water;
  std::vector<std::uint8_t> post_water;
  double post_water_fraction = 0.0;  // target drawn from the regime's range
};

SyntheticScene make_scene(std::size_t image_size, const SceneRegime& regime, LabelMode label_mode, Rng& rng);

// Writes <root>/manifest.json and <root>/samples/<id>.{pre,post,mask}.fseg.
// Normalization stats come from the train split only.
DatasetManifest generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& root);

class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  std::size_t size() const { return manifest_.samples.size(); }

  std::vector<std::size_t> indices(Split split) const;
  // Raw (un-normalized) rasters as stored.
  SyntheticScene load_raw(std::size_t index) const;
  FloodSample load(std::size_t index) const;
  std::vector<FloodSample> load_split(Split split) const;

 private:
  std::filesystem::path root_;
  DatasetManifest manifest_;
};

// Seeded shuffle for train, stable order otherwise; final partial batch kept.
// Returns positions within the split. Throws UsageError on an empty split.
std::vector<std::vector<std::size_t>> split_iter(std::size_t split_size, Split split, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed);
std::vector<std::vector<std::size_t>> split_iter(const Dataset& dataset, Split split, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed);

struct Batch {
  Tensor pre;   // [b, 4, H, W]
  Tensor post;  // [b, 4, H, W]
  Tensor mask;  // [b, 1, H, W]
};

Batch make_batch(const std::vector<FloodSample>& samples, std::span<const std::size_t> positions);

// 8-bit binary PGM (P5); value 255 where mask is 1.
void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> mask, std::size_t height,
               std::size_t width);

}  // namespace floodlora
