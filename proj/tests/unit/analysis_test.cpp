#include <gtest/gtest.h>

#include <cmath>

#include "floodlora/analysis.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/training.hpp"
#include "test_support.hpp"

namespace floodlora {
namespace {

using testing::bitwise_equal;
using testing::TempDir;

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m{rows, cols, std::vector<double>(rows * cols)};
  for (double& v : m.values) v = rng.normal();
  return m;
}

double dot_rows(const Matrix& m, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t j = 0; j < m.cols; ++j) s += m(a, j) * m(b, j);
  return s;
}

TEST(Pca, ComponentsAreOrthonormal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t cols = 2 + rng.below(30);
    const Matrix x = random_matrix(rng, 10 + rng.below(100), cols);
    const std::size_t k = 1 + rng.below(cols);
    const PcaResult p = pca(x, k);
    ASSERT_EQ(p.components.rows, k);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) EXPECT_NEAR(dot_rows(p.components, a, b), a == b ? 1.0 : 0.0, 1e-9);
    }
    for (std::size_t c = 1; c < k; ++c) EXPECT_GE(p.explained[c - 1], p.explained[c]);
  }
}

TEST(Pca, TwoDimensionalClosedForm) {
  // Covariance [[a, b], [b, c]] has eigenvalues (a+c)/2 +- sqrt(((a-c)/2)^2 + b^2).
  Rng rng(4);
  Matrix x{200, 2, std::vector<double>(400)};
  for (std::size_t i = 0; i < 200; ++i) {
    const double u = rng.normal(0.0, 3.0), v = rng.normal(0.0, 0.5);
    x.values[2 * i] = 5.0 + 0.8 * u - 0.6 * v;
    x.values[2 * i + 1] = -1.0 + 0.6 * u + 0.8 * v;
  }
  double m0 = 0, m1 = 0;
  for (std::size_t i = 0; i < 200; ++i) m0 += x(i, 0) / 200.0, m1 += x(i, 1) / 200.0;
  double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const double d0 = x(i, 0) - m0, d1 = x(i, 1) - m1;
    a += d0 * d0 / 199.0, b += d0 * d1 / 199.0, c += d1 * d1 / 199.0;
  }
  const double mid = (a + c) / 2.0, rad = std::sqrt((a - c) * (a - c) / 4.0 + b * b);
  const PcaResult p = pca(x, 2);
  EXPECT_NEAR(p.mean[0], m0, 1e-12);
  EXPECT_NEAR(p.mean[1], m1, 1e-12);
  EXPECT_NEAR(p.explained[0], mid + rad, 1e-9);
  EXPECT_NEAR(p.explained[1], mid - rad, 1e-9);
  // Leading eigenvector is proportional to (b, lambda - a); sign fixed by the largest entry.
  double v0 = b, v1 = mid + rad - a;
  const double norm = std::hypot(v0, v1);
  v0 /= norm, v1 /= norm;
  if (std::abs(v1) > std::abs(v0) ? v1 < 0 : v0 < 0) v0 = -v0, v1 = -v1;
  EXPECT_NEAR(p.components(0, 0), v0, 1e-9);
  EXPECT_NEAR(p.components(0, 1), v1, 1e-9);
  for (std::size_t i = 0; i < 200; ++i) {
    EXPECT_NEAR(p.projection(i, 0), (x(i, 0) - m0) * v0 + (x(i, 1) - m1) * v1, 1e-9);
  }
}

TEST(Pca, SignConventionMakesLargestEntryPositive) {
  Rng rng(9);
  const PcaResult p = pca(random_matrix(rng, 50, 6), 3);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < 6; ++j) {
      if (std::abs(p.components(c, j)) > std::abs(p.components(c, arg))) arg = j;
    }
    EXPECT_GT(p.components(c, arg), 0.0);
  }
}

TEST(Pca, InvalidRequests) {
  Rng rng(1);
  EXPECT_THROW(pca(random_matrix(rng, 1, 3)), UsageError);
  EXPECT_THROW(pca(random_matrix(rng, 5, 3), 0), ConfigError);
  EXPECT_THROW(pca(random_matrix(rng, 5, 3), 4), ConfigError);
  Matrix bad{3, 3, std::vector<double>(8)};
  EXPECT_THROW(pca(bad), DimensionError);
}

TEST(LinearProbe, SeparatesSeparableDataAndNotNoise) {
  Rng rng(2);
  const auto make = [&](std::size_t n, bool informative) {
    Matrix x = random_matrix(rng, n, 5);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = informative ? (x(i, 0) + 0.5 * x(i, 3) > 0.2) : rng.uniform() < 0.5;
    }
    return std::pair{x, y};
  };
  const auto [xa, ya] = make(400, true);
  const auto [xb, yb] = make(400, true);
  const ProbeResult good = linear_probe(xa, ya, xb, yb, 2000);
  EXPECT_GT(good.train_accuracy, 0.97);
  EXPECT_GT(good.test_accuracy, 0.95);

  const auto [xc, yc] = make(400, false);
  const auto [xd, yd] = make(400, false);
  EXPECT_LT(linear_probe(xc, yc, xd, yd).test_accuracy, 0.6);
}

TEST(LinearProbe, IsDeterministicAndChecksExtents) {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 30, 4);
  std::vector<std::uint8_t> y(30);
  for (std::size_t i = 0; i < 30; ++i) y[i] = x(i, 1) > 0;
  const ProbeResult a = linear_probe(x, y, x, y), b = linear_probe(x, y, x, y);
  EXPECT_EQ(a.test_accuracy, b.test_accuracy);
  EXPECT_THROW(linear_probe(x, std::vector<std::uint8_t>(29), x, y), DimensionError);
  EXPECT_THROW(linear_probe(x, y, random_matrix(rng, 30, 3), y), DimensionError);
}

class Embeddings : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("embed");
    SynthConfig cfg;
    cfg.n_train = 24;
    cfg.n_val = 1;
    cfg.n_test = 12;
    cfg.n_ood = 1;
    cfg.seed = 21;
    generate_synthetic(cfg, dir_->path());
  }
  static void TearDownTestSuite() { delete dir_; }
  static Dataset dataset() { return Dataset::open(dir_->path()); }

  static TempDir* dir_;
};
TempDir* Embeddings::dir_ = nullptr;

TEST_F(Embeddings, RowsAreEncoderTokensWithMajorityLabels) {
  const std::vector<FloodSample> samples = dataset().load_split(Split::Test);
  const SegModel model(EncoderConfig::desk(), Strategy::frozen(), 1);
  const EncoderConfig& c = model.config();
  const PatchEmbeddings emb = patch_embeddings(model, samples, 5);
  ASSERT_EQ(emb.embeddings.rows, samples.size() * c.grid() * c.grid());
  ASSERT_EQ(emb.embeddings.cols, c.d_model);

  NoGradGuard guard;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const std::size_t position[] = {s};
    const Batch one = make_batch(samples, position);
    const Tensor z = model.encoder().encode(one.post, ForwardMode{});
    const std::size_t offset = s * c.tokens() * c.d_model;
    const std::vector<double> rows(emb.embeddings.values.begin() + offset,
                                   emb.embeddings.values.begin() + offset + c.tokens() * c.d_model);
    EXPECT_LT(testing::max_abs_diff(rows, z.data()), 1e-12);
    for (std::size_t t = 0; t < c.tokens(); ++t) {
      const std::size_t row = s * c.tokens() + t;
      EXPECT_EQ(emb.sample_ids[row], samples[s].id);
      EXPECT_EQ(emb.patch_index[row], t);
      double wet = 0.0;
      const std::size_t gy = t / c.grid(), gx = t % c.grid(), p = c.patch_size;
      for (std::size_t y = gy * p; y < (gy + 1) * p; ++y) {
        for (std::size_t x = gx * p; x < (gx + 1) * p; ++x) wet += samples[s].mask.data()[y * c.image_size + x];
      }
      EXPECT_EQ(emb.water[row], wet > p * p / 2.0 ? 1 : 0);
    }
  }
}

TEST_F(Embeddings, PretrainedEncoderLinearlySeparatesWaterPatches) {
  const Dataset ds = dataset();
  const std::vector<FloodSample> train = ds.load_split(Split::Train), test = ds.load_split(Split::Test);
  SegModel model(EncoderConfig::desk(), Strategy::full(), 3);
  MaeConfig mae;
  mae.epochs = 2;
  mae.seed = 3;
  mae_pretrain(model, snapshot_images(train), mae);
  const PatchEmbeddings fit = patch_embeddings(model, train), held_out = patch_embeddings(model, test);
  const ProbeResult probe = linear_probe(fit.embeddings, fit.water, held_out.embeddings, held_out.water);
  double wet = 0.0;
  for (std::uint8_t w : held_out.water) wet += w;
  const double majority = std::max(wet, held_out.water.size() - wet) / held_out.water.size();
  EXPECT_GT(probe.test_accuracy, 0.8);
  EXPECT_GT(probe.test_accuracy, majority);
}

}  // namespace
}  // namespace floodlora
