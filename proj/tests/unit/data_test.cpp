#include <cstdio>
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "floodlora/data.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"
#include "floodlora/training.hpp"
#include "test_support.hpp"

namespace floodlora {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SynthConfig small_config(std::uint64_t seed = 3) {
  SynthConfig c;
  c.n_train = 6;
  c.n_val = 3;
  c.n_test = 3;
  c.n_ood = 3;
  c.image_size = 32;
  c.seed = seed;
  return c;
}

double post_vv_mean(const Raster& r, const std::vector<std::uint8_t>& mask, bool inside) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if ((mask[i] != 0) == inside) {
      s += r.values[i];
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

TEST(Fseg, RasterAndMaskRoundTripExactly) {
  TempDir dir("fseg");
  Rng rng(1);
  Raster r{3, 5, 7, {}};
  for (std::size_t i = 0; i < 3 * 5 * 7; ++i) r.values.push_back(static_cast<float>(rng.normal(-10.0, 4.0)));
  write_raster(dir / "r.fseg", r);
  const Raster back = read_raster(dir / "r.fseg");
  EXPECT_EQ(back.channels, 3);
  EXPECT_EQ(back.height, 5u);
  EXPECT_EQ(back.width, 7u);
  EXPECT_EQ(back.values, r.values);
  // Header plus channel-major float32 payload.
  EXPECT_EQ(fs::file_size(dir / "r.fseg"), 16u + 4u * 105u);
  EXPECT_EQ(slurp(dir / "r.fseg").substr(0, 4), "FSEG");

  MaskRaster m{4, 3, {1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0}};
  write_mask(dir / "m.fseg", m);
  const MaskRaster mb = read_mask(dir / "m.fseg");
  EXPECT_EQ(mb.values, m.values);
  EXPECT_EQ(fs::file_size(dir / "m.fseg"), 16u + 12u);
}

TEST(Fseg, CorruptFilesAreReportedWithPath) {
  TempDir dir("fseg-bad");
  Raster r{1, 2, 2, {1, 2, 3, 4}};
  write_raster(dir / "r.fseg", r);
  const std::string bytes = slurp(dir / "r.fseg");
  {
    std::ofstream out(dir / "trunc.fseg", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  {
    std::ofstream out(dir / "magic.fseg", std::ios::binary);
    out << "XSEG" << bytes.substr(4);
  }
  try {
    read_raster(dir / "trunc.fseg");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("trunc.fseg"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_raster(dir / "magic.fseg"), IoError);
  EXPECT_THROW(read_raster(dir / "missing.fseg"), IoError);
  EXPECT_THROW(read_mask(dir / "r.fseg"), IoError);
  EXPECT_THROW(write_raster(dir / "x.fseg", Raster{1, 2, 2, {1}}), DimensionError);
}

TEST(Synthetic, RegenerationIsByteIdentical) {
  TempDir a("gen-a"), b("gen-b");
  generate_synthetic(small_config(), a.path());
  generate_synthetic(small_config(), b.path());
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a.path());
    EXPECT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 1u + 3u * 15u);
}

TEST(Synthetic, DifferentSeedsDiffer) {
  TempDir a("seed-a"), b("seed-b");
  generate_synthetic(small_config(3), a.path());
  generate_synthetic(small_config(4), b.path());
  EXPECT_NE(slurp(a / "samples/train-0000.pre.fseg"), slurp(b / "samples/train-0000.pre.fseg"));
}

TEST(Synthetic, LoadRoundTripAndSplitFiltering) {
  TempDir dir("load");
  const DatasetManifest written = generate_synthetic(small_config(), dir.path());
  const Dataset ds = Dataset::open(dir.path());
  EXPECT_EQ(ds.size(), 15u);
  EXPECT_EQ(ds.manifest().channels.size(), 8u);
  for (const Split s : {Split::Train, Split::Val, Split::Test, Split::Ood}) {
    for (const FloodSample& sample : ds.load_split(s)) {
      EXPECT_EQ(sample.split, s);
      EXPECT_EQ(sample.id.rfind(to_string(s), 0), 0u) << sample.id;
      EXPECT_EQ(sample.pre.shape(), (Shape{4, 32, 32}));
      EXPECT_EQ(sample.mask.shape(), (Shape{32, 32}));
    }
  }
  EXPECT_EQ(ds.load_split(Split::Val).size(), 3u);
  // Normalized values reproduce the stored float32 rasters.
  const SyntheticScene raw = ds.load_raw(0);
  const FloodSample s = ds.load(0);
  for (std::size_t c = 0; c < 4; ++c) {
    const double mu = written.stats.mean[c], sd = written.stats.stddev[c];
    for (std::size_t i = 0; i < 32 * 32; i += 37) {
      EXPECT_EQ(s.pre.data()[c * 1024 + i], (raw.pre.values[c * 1024 + i] - mu) / sd);
    }
  }
}

TEST(Synthetic, TrainSplitIsRoughlyStandardizedPerChannel) {
  TempDir dir("norm");
  generate_synthetic(small_config(), dir.path());
  const std::vector<FloodSample> train = Dataset::open(dir.path()).load_split(Split::Train);
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0.0, sq = 0.0, n = 0.0;
    for (const FloodSample& x : train) {
      const Tensor& t = c < 4 ? x.pre : x.post;
      for (std::size_t i = 0; i < 1024; ++i) {
        const double v = t.data()[(c % 4) * 1024 + i];
        s += v;
        sq += v * v;
        n += 1.0;
      }
    }
    EXPECT_NEAR(s / n, 0.0, 1e-6) << channel_names()[c];
    EXPECT_NEAR(sq / n, 1.0, 1e-6) << channel_names()[c];
  }
}

TEST(Synthetic, TruncatedSampleErrorNamesTheId) {
  TempDir dir("trunc");
  generate_synthetic(small_config(), dir.path());
  const fs::path victim = dir / "samples/val-0001.post.fseg";
  fs::resize_file(victim, fs::file_size(victim) - 10);
  const Dataset ds = Dataset::open(dir.path());
  try {
    ds.load_split(Split::Val);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("val-0001"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(ds.load_split(Split::Test));
}

TEST(Synthetic, ManifestProblemsAreDetected) {
  TempDir dir("manifest");
  EXPECT_THROW(Dataset::open(dir.path()), IoError);
  {
    std::ofstream out(dir / "manifest.json");
    out << "{ not json";
  }
  EXPECT_THROW(Dataset::open(dir.path()), IoError);
  DatasetManifest m = generate_synthetic(small_config(), dir.path());
  m.samples.push_back(m.samples.front());
  EXPECT_THROW(m.validate(), ValidationError);
}

TEST(Synthetic, WaterIsDarkerThanLandInEveryScene) {
  TempDir dir("dark");
  SynthConfig cfg = small_config();
  cfg.n_train = 20;
  cfg.n_ood = 20;
  generate_synthetic(cfg, dir.path());
  const Dataset ds = Dataset::open(dir.path());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const SyntheticScene s = ds.load_raw(i);
    EXPECT_LT(post_vv_mean(s.post, s.mask.values, true), post_vv_mean(s.post, s.mask.values, false))
        << ds.manifest().samples[i].id;
  }
}

TEST(Synthetic, WaterFractionStaysInConfiguredRange) {
  const SceneRegime regime;
  std::size_t inside = 0;
  const std::size_t n = 200;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(i, 40);
    const SyntheticScene s = make_scene(64, regime, LabelMode::AllPostWater, rng);
    double frac = 0.0;
    for (std::uint8_t v : s.mask.values) frac += v;
    frac /= 64.0 * 64.0;
    inside += frac >= regime.water_fraction.lo - 0.05 && frac <= regime.water_fraction.hi + 0.05;
  }
  EXPECT_GE(static_cast<double>(inside) / n, 0.95);
}

TEST(Synthetic, FloodOnlyLabelsExcludePreEventWater) {
  Rng a(5, 41), b(5, 41);
  const SyntheticScene all = make_scene(48, SceneRegime{}, LabelMode::AllPostWater, a);
  const SyntheticScene flood = make_scene(48, SceneRegime{}, LabelMode::FloodOnly, b);
  for (std::size_t i = 0; i < all.mask.values.size(); ++i) {
    EXPECT_LE(all.pre_water[i], all.post_water[i]);  // pre-event water lies inside the flood extent
    EXPECT_EQ(all.mask.values[i], all.post_water[i]);
    EXPECT_EQ(flood.mask.values[i], all.post_water[i] && !all.pre_water[i]);
  }
}

TEST(Synthetic, OodRegimeShiftsChannelMeans) {
  TempDir dir("ood");
  SynthConfig cfg = small_config();
  cfg.n_test = 12;
  cfg.n_ood = 12;
  generate_synthetic(cfg, dir.path());
  const Dataset ds = Dataset::open(dir.path());
  const auto channel_mean = [&](Split split, std::size_t c) {
    double s = 0.0, n = 0.0;
    for (std::size_t i : ds.indices(split)) {
      const SyntheticScene raw = ds.load_raw(i);
      for (std::size_t p = 0; p < 1024; ++p) s += raw.post.values[c * 1024 + p];
      n += 1024.0;
    }
    return s / n;
  };
  // Both polarizations share the speckle bias, so the VH - VV mean contrast is
  // the configured VH offset; the regimes differ in it by 1 dB.
  const auto contrast = [&](Split split) { return channel_mean(split, 1) - channel_mean(split, 0); };
  const double expected = cfg.ood_regime.vh_offset_db - cfg.regime.vh_offset_db;
  ASSERT_GT(std::abs(expected), 0.5);
  EXPECT_NEAR(contrast(Split::Ood) - contrast(Split::Test), expected, 0.1);
  EXPECT_GT(std::abs(contrast(Split::Ood) - contrast(Split::Test)), 0.5);
}

TEST(Synthetic, InvalidConfigsAreRejected) {
  SynthConfig c = small_config();
  c.regime.water_fraction = {0.5, 0.2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.n_train = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.ood_regime.flood_growth = {0.0, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_split("holdout"), UsageError);
}

TEST(SplitIter, TenByFourGivesFourFourTwo) {
  const auto batches = split_iter(10, Split::Val, 4, 0);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[1].size(), 4u);
  EXPECT_EQ(batches[2].size(), 2u);
}

TEST(SplitIter, TrainShuffleIsSeededAndOtherSplitsAreStable) {
  EXPECT_EQ(split_iter(20, Split::Train, 3, 5), split_iter(20, Split::Train, 3, 5));
  EXPECT_NE(split_iter(20, Split::Train, 3, 5), split_iter(20, Split::Train, 3, 6));
  for (const Split s : {Split::Val, Split::Test, Split::Ood}) {
    EXPECT_EQ(split_iter(7, s, 3, 1), split_iter(7, s, 3, 99));
    EXPECT_EQ(split_iter(7, s, 3, 1)[0], (std::vector<std::size_t>{0, 1, 2}));
  }
  const auto shuffled = split_iter(20, Split::Train, 3, 5);
  std::set<std::size_t> seen;
  for (const auto& b : shuffled) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 20u);
  EXPECT_THROW(split_iter(0, Split::Test, 4, 0), UsageError);
}

TEST(SplitIter, DatasetOverloadReturnsDatasetIndices) {
  TempDir dir("iter");
  generate_synthetic(small_config(), dir.path());
  const Dataset ds = Dataset::open(dir.path());
  for (const auto& batch : split_iter(ds, Split::Test, 2, 0)) {
    for (std::size_t idx : batch) EXPECT_EQ(ds.manifest().samples[idx].split, Split::Test);
  }
}

TEST(Batch, StacksSamplesInOrder) {
  TempDir dir("batch");
  generate_synthetic(small_config(), dir.path());
  const std::vector<FloodSample> train = Dataset::open(dir.path()).load_split(Split::Train);
  const std::vector<std::size_t> positions{4, 1};
  const Batch b = make_batch(train, positions);
  EXPECT_EQ(b.pre.shape(), (Shape{2, 4, 32, 32}));
  EXPECT_EQ(b.mask.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_TRUE(testing::bitwise_equal(b.post.data().subspan(0, 4096), train[4].post.data()));
  EXPECT_TRUE(testing::bitwise_equal(b.mask.data().subspan(1024, 1024), train[1].mask.data()));
}

TEST(Pgm, WritesBinaryGreymap) {
  TempDir dir("pgm");
  write_pgm(dir / "m.pgm", std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0}, 2, 3);
  EXPECT_EQ(slurp(dir / "m.pgm"), std::string("P5\n3 2\n255\n") + std::string("\xff\0\0\xff\xff\0", 6));
}

// Difficulty knob: the same model and seed learn less from heavier speckle.
TEST(Synthetic, HeavierSpeckleLowersTrainedF1) {
  double f1[2];
  const double speckle[2] = {0.2, 1.6};
  for (int k = 0; k < 2; ++k) {
    TempDir dir("speckle");
    SynthConfig cfg;
    cfg.n_train = 16;
    cfg.n_val = 4;
    cfg.n_test = 8;
    cfg.n_ood = 1;
    cfg.seed = 21;
    cfg.regime.speckle = speckle[k];
    generate_synthetic(cfg, dir.path());
    const Dataset ds = Dataset::open(dir.path());
    SegModel m(EncoderConfig::desk(), Strategy::full(), 21);
    TrainConfig tc;
    tc.max_epochs = 8;
    tc.lr = 1e-3;
    tc.batch_size = 4;
    tc.seed = 21;
    train(m, ds.load_split(Split::Train), ds.load_split(Split::Val), tc);
    f1[k] = evaluate(m, ds.load_split(Split::Test)).aggregate.f1;
  }
  EXPECT_GT(f1[0], f1[1]) << "low speckle " << f1[0] << ", high speckle " << f1[1];
}

}  // namespace
}  // namespace floodlora
