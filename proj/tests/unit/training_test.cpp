#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "floodlora/data.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"
#include "floodlora/training.hpp"
#include "test_support.hpp"

namespace floodlora {
namespace {

using testing::bitwise_equal;

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  for (const double g : {0.3, -2.5, 1e-3}) {
    Tensor p = Tensor::scalar(1.0, true);
    (p * Tensor::scalar(g)).backward();
    OptimizerState state;
    adam_step(std::vector<Tensor>{p}, state, AdamConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
    // m_hat = g, v_hat = g^2 after bias correction.
    EXPECT_NEAR(p.item(), 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    EXPECT_EQ(state.t, 1u);
  }
}

TEST(Adam, MatchesScalarReferenceOverSeveralSteps) {
  Rng rng(1);
  Tensor p = Tensor({3}, {0.5, -1.0, 2.0}, true);
  std::vector<double> w{0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  const AdamConfig cfg{1e-2, 0.9, 0.999, 1e-8, 0.1};
  OptimizerState state;
  for (int t = 1; t <= 6; ++t) {
    std::vector<double> g(3);
    for (double& x : g) x = rng.normal(0.0, 1.0);
    p.clear_grad();
    sum(mul(p, Tensor({3}, g))).backward();
    adam_step(std::vector<Tensor>{p}, state, cfg);
    for (std::size_t k = 0; k < 3; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
      const double mh = m[k] / (1.0 - std::pow(0.9, t));
      const double vh = v[k] / (1.0 - std::pow(0.999, t));
      w[k] -= 1e-2 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w[k]);
    }
    EXPECT_LT(testing::max_abs_diff(p.data(), w), 1e-14);
  }
}

TEST(Adam, ZeroGradientWithoutDecayIsIdentity) {
  Tensor p = Tensor({4}, {1.0, -2.0, 3.5, 0.0}, true);
  const std::vector<double> before(p.data().begin(), p.data().end());
  OptimizerState state;
  for (int i = 0; i < 5; ++i) {
    p.clear_grad();
    sum(mul_scalar(p, 0.0)).backward();
    adam_step(std::vector<Tensor>{p}, state, AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  }
  EXPECT_TRUE(bitwise_equal(p.data(), before));
}

TEST(Adam, MissingGradientOrFrozenLeafIsStateError) {
  Tensor p = Tensor::scalar(1.0, true);
  OptimizerState state;
  EXPECT_THROW(adam_step(std::vector<Tensor>{p}, state, AdamConfig{}), StateError);
  Tensor frozen = Tensor::scalar(1.0, false);
  OptimizerState other;
  EXPECT_THROW(adam_step(std::vector<Tensor>{frozen}, other, AdamConfig{}), StateError);
}

// ---------------------------------------------------------------------------
// Scheduler and early stopping

std::vector<double> lr_trace(const std::vector<double>& losses, double lr = 1.0) {
  PlateauScheduler s(lr, 0.5, 3);
  std::vector<double> out;
  for (double l : losses) out.push_back(s.step(l));
  return out;
}

TEST(Scheduler, ImprovingLossesKeepLearningRate) {
  EXPECT_EQ(lr_trace({1.0, 0.9, 0.8}), (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Scheduler, HalvesAfterFourthNonImprovingEpoch) {
  EXPECT_EQ(lr_trace({1.0, 1.0, 1.0, 1.0, 1.0}), (std::vector<double>{1.0, 1.0, 1.0, 1.0, 0.5}));
}

TEST(Scheduler, TwoPlateausCompound) {
  const std::vector<double> lr = lr_trace({1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0}, 1e-4);
  EXPECT_EQ(lr.back(), 1e-4 * 0.25);
}

TEST(Scheduler, RejectsInvalidSettings) {
  EXPECT_THROW(PlateauScheduler(1.0, 1.0, 3), ConfigError);
  EXPECT_THROW(PlateauScheduler(1.0, 0.5, 0), ConfigError);
  PlateauScheduler s(1.0, 0.5, 3);
  EXPECT_THROW(s.step(std::numeric_limits<double>::quiet_NaN()), NumericalError);
}

TEST(EarlyStop, DocumentedTraces) {
  EXPECT_TRUE(early_stop(std::vector<double>{1.0, 0.9, 0.95, 0.96}));
  EXPECT_FALSE(early_stop(std::vector<double>{1.0, 0.9, 0.8, 0.7}));
  EXPECT_FALSE(early_stop(std::vector<double>{1.0}));
  EXPECT_FALSE(early_stop(std::vector<double>{1.0, 0.9, 0.95}));
  EXPECT_TRUE(early_stop(std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_THROW(early_stop(std::vector<double>{}), UsageError);
}

// Independent restatement of the counter semantics, used as an oracle over
// every short sequence on a three-letter alphabet.
struct CounterOracle {
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  int plateau = 0;
  double lr;
  explicit CounterOracle(double start) : lr(start) {}
  void feed(double loss) {
    if (loss < best) {
      best = loss;
      since_best = 0;
      plateau = 0;
      return;
    }
    ++since_best;
    if (++plateau == 4) {
      lr *= 0.5;
      plateau = 0;
    }
  }
};

TEST(SchedulerAndEarlyStop, ExhaustiveShortSequencesMatchOracle) {
  std::size_t checked = 0;
  for (std::size_t len = 1; len <= 8; ++len) {
    std::size_t combos = 1;
    for (std::size_t i = 0; i < len; ++i) combos *= 3;
    for (std::size_t code = 0; code < combos; ++code) {
      std::vector<double> seq;
      for (std::size_t i = 0, c = code; i < len; ++i, c /= 3) seq.push_back(1.0 + static_cast<double>(c % 3));
      CounterOracle oracle(1.0);
      PlateauScheduler sched(1.0, 0.5, 3);
      for (std::size_t i = 0; i < len; ++i) {
        oracle.feed(seq[i]);
        ASSERT_EQ(sched.step(seq[i]), oracle.lr);
        const std::span<const double> prefix(seq.data(), i + 1);
        ASSERT_EQ(early_stop(prefix, 2), oracle.since_best >= 2);
        ASSERT_EQ(early_stop(prefix, 3), oracle.since_best >= 3);
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 9000u);
}

TEST(TrainConfig, RecipeDefaults) {
  const TrainConfig c;
  EXPECT_EQ(c.max_epochs, 50u);
  EXPECT_EQ(c.early_stop_patience, 2u);
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.adam_eps, 1e-8);
  EXPECT_EQ(c.sched_factor, 0.5);
  EXPECT_EQ(c.sched_patience, 3u);
  TrainConfig bad = c;
  bad.sched_factor = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.early_stop_patience = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Training loop on a small generated dataset

class ToyData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<testing::TempDir>("toy");
    SynthConfig cfg;
    cfg.n_train = 16;
    cfg.n_val = 4;
    cfg.n_test = 4;
    cfg.n_ood = 4;
    cfg.seed = 11;
    generate_synthetic(cfg, dir_->path());
    const Dataset ds = Dataset::open(dir_->path());
    train_ = ds.load_split(Split::Train);
    val_ = ds.load_split(Split::Val);
    test_ = ds.load_split(Split::Test);
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static TrainConfig quick(std::size_t epochs, std::uint64_t seed = 0) {
    TrainConfig c;
    c.max_epochs = epochs;
    c.lr = 1e-3;
    c.seed = seed;
    c.early_stop_patience = 100;
    return c;
  }

  static std::unique_ptr<testing::TempDir> dir_;
  static std::vector<FloodSample> train_, val_, test_;
};

std::unique_ptr<testing::TempDir> ToyData::dir_;
std::vector<FloodSample> ToyData::train_, ToyData::val_, ToyData::test_;

StateDict group_state(const SegModel& m, ParamGroup group) {
  StateDict out;
  for (const NamedParameter& p : m.parameters()) {
    if (p.group == group) out[p.name] = {p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}};
  }
  return out;
}

bool same_state(const StateDict& a, const StateDict& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, rec] : a) {
    if (!b.count(name) || !bitwise_equal(rec.values, b.at(name).values)) return false;
  }
  return true;
}

TEST_F(ToyData, FrozenEncoderIsUntouchedByAdamSteps) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 3);
  const StateDict encoder = group_state(m, ParamGroup::EncoderBase);
  const StateDict decoder = group_state(m, ParamGroup::Decoder);
  const std::vector<Tensor> params = m.trainable_parameters();
  OptimizerState opt;
  const std::vector<std::size_t> positions{0, 1};
  const Batch batch = make_batch(train_, positions);
  for (int step = 0; step < 10; ++step) {
    for (const Tensor& p : params) Tensor(p).clear_grad();
    combined_loss(m.forward(batch.pre, batch.post), batch.mask).backward();
    adam_step(params, opt, AdamConfig{1e-3});
  }
  EXPECT_TRUE(same_state(encoder, group_state(m, ParamGroup::EncoderBase)));
  EXPECT_FALSE(same_state(decoder, group_state(m, ParamGroup::Decoder)));
}

TEST_F(ToyData, LoraTrainingChangesOnlyAdaptersAndDecoder) {
  SegModel m(EncoderConfig::desk(), Strategy::lora(4), 4);
  const StateDict encoder = group_state(m, ParamGroup::EncoderBase);
  const StateDict adapters = group_state(m, ParamGroup::Adapter);
  train(m, train_, val_, quick(2));
  EXPECT_TRUE(same_state(encoder, group_state(m, ParamGroup::EncoderBase)));
  EXPECT_FALSE(same_state(adapters, group_state(m, ParamGroup::Adapter)));
}

TEST_F(ToyData, SameSeedGivesIdenticalTrajectories) {
  Strategy s = Strategy::lora(4);
  std::vector<EpochRecord> runs[2];
  StateDict states[2];
  for (int i = 0; i < 2; ++i) {
    SegModel m(EncoderConfig::desk(), s, 5);
    runs[i] = train(m, train_, val_, quick(2, 9)).epochs;
    states[i] = m.state();
  }
  ASSERT_EQ(runs[0].size(), runs[1].size());
  for (std::size_t e = 0; e < runs[0].size(); ++e) {
    EXPECT_EQ(runs[0][e].train_loss, runs[1][e].train_loss);
    EXPECT_EQ(runs[0][e].val_loss, runs[1][e].val_loss);
    EXPECT_EQ(runs[0][e].lr, runs[1][e].lr);
    EXPECT_EQ(runs[0][e].val_metrics.counts, runs[1][e].val_metrics.counts);
  }
  EXPECT_TRUE(same_state(states[0], states[1]));
}

TEST_F(ToyData, TrainLossFallsForEveryStrategy) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const Strategy& s : {Strategy::full(), Strategy::frozen(), Strategy::lora(4)}) {
      SCOPED_TRACE(s.label() + " seed " + std::to_string(seed));
      SegModel m(EncoderConfig::desk(), s, seed);
      const TrainResult r = train(m, train_, val_, quick(10, seed));
      ASSERT_EQ(r.epochs.size(), 10u);
      EXPECT_LT(r.epochs[9].train_loss, r.epochs[0].train_loss);
    }
  }
}

TEST_F(ToyData, FullFineTuningOverfitsTheToySet) {
  SegModel m(EncoderConfig::desk(), Strategy::full(), 6);
  TrainConfig cfg = quick(30, 6);
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  const TrainResult r = train(m, train_, train_, cfg);
  double best_train = r.epochs.front().train_loss;
  for (const EpochRecord& e : r.epochs) best_train = std::min(best_train, e.train_loss);
  EXPECT_LT(best_train, 0.1);
}

TEST_F(ToyData, EarlyStopAndBestCheckpointFollowValidationLoss) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 7);
  TrainConfig cfg = quick(50, 7);
  cfg.lr = 0.5;  // deliberately unstable so validation loss stalls quickly
  cfg.early_stop_patience = 2;
  std::vector<std::size_t> seen;
  const TrainResult r = train(m, train_, val_, cfg, [&](const EpochRecord& e) { seen.push_back(e.epoch); });
  ASSERT_FALSE(r.epochs.empty());
  EXPECT_EQ(seen.size(), r.epochs.size());
  std::vector<double> history;
  for (const EpochRecord& e : r.epochs) history.push_back(e.val_loss);
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] < history[best]) best = i;
  }
  EXPECT_EQ(r.best_epoch, best + 1);
  EXPECT_EQ(r.best_val_loss, history[best]);
  if (r.stopped_early) EXPECT_EQ(history.size() - 1 - best, 2u);
  // The model is left holding the best weights.
  EXPECT_EQ(validation_loss(m, val_, 8, LossConfig{}), r.best_val_loss);
}

TEST_F(ToyData, EvaluateAggregatesSampleCounts) {
  const SegModel m(EncoderConfig::desk(), Strategy::frozen(), 8);
  const EvalResult r = evaluate(m, test_, 3);
  ASSERT_EQ(r.samples.size(), test_.size());
  ConfusionCounts total;
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    EXPECT_EQ(r.samples[i].id, test_[i].id);
    total += r.samples[i].metrics.counts;
  }
  EXPECT_EQ(r.aggregate.counts, total);
  const EvalResult single = evaluate(m, test_, 1);
  EXPECT_EQ(single.aggregate.counts, total);
  EXPECT_THROW(evaluate(m, {}), UsageError);
}

TEST_F(ToyData, ZeroBLoraEvaluatesLikeItsFrozenBase) {
  const SegModel frozen(EncoderConfig::desk(), Strategy::frozen(), 9);
  const SegModel lora(EncoderConfig::desk(), Strategy::lora(8), 9);
  const EvalResult a = evaluate(frozen, test_);
  const EvalResult b = evaluate(lora, test_);
  EXPECT_EQ(a.aggregate.counts, b.aggregate.counts);
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i].predicted, b.samples[i].predicted);
}

TEST_F(ToyData, GroundTruthAsPredictionScoresPerfectly) {
  for (const FloodSample& s : test_) {
    const std::vector<std::uint8_t> truth = to_mask(s.mask);
    const MetricsReport m = compute_metrics(truth, truth);
    EXPECT_EQ(m.accuracy, 1.0);
    if (m.counts.tp > 0) {
      EXPECT_EQ(m.f1, 1.0);
      EXPECT_EQ(m.iou, 1.0);
    }
  }
}

TEST_F(ToyData, EmptySplitsAreUsageErrors) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 10);
  EXPECT_THROW(train(m, {}, val_, quick(1)), UsageError);
  EXPECT_THROW(train(m, train_, {}, quick(1)), UsageError);
}

TEST_F(ToyData, NonFiniteLossAbortsWithDiagnostics) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 11);
  std::vector<FloodSample> poisoned = train_;
  Tensor pre = poisoned[0].pre.clone_leaf(false);
  pre.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  poisoned[0].pre = pre;
  try {
    train(m, poisoned, val_, quick(1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("batch"), std::string::npos) << what;
    EXPECT_NE(what.find("lr"), std::string::npos) << what;
  }
}

// ---------------------------------------------------------------------------
// Masked-patch pretraining

TEST_F(ToyData, MaeLossDecreasesAndOnlyEncoderBaseMoves) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 12);
  const StateDict decoder = group_state(m, ParamGroup::Decoder);
  const StateDict encoder = group_state(m, ParamGroup::EncoderBase);
  MaeConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 12;
  const MaeResult r = mae_pretrain(m, snapshot_images(train_), cfg);
  ASSERT_EQ(r.epoch_losses.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(r.epoch_losses[e], r.epoch_losses[e - 1]) << "epoch " << e + 1;
  EXPECT_TRUE(same_state(decoder, group_state(m, ParamGroup::Decoder)));
  EXPECT_FALSE(same_state(encoder, group_state(m, ParamGroup::EncoderBase)));
  // Frozen flags survive pretraining.
  for (const NamedParameter& p : m.parameters()) {
    if (p.group == ParamGroup::EncoderBase) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
  }
}

TEST(MaeConfig, MaskRatioMustBeOpenUnitInterval) {
  MaeConfig c;
  c.mask_ratio = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_ratio = 0.75;
  EXPECT_NO_THROW(c.validate());
}

TEST(MaeConfig, WrongImageShapeIsDimensionError) {
  SegModel m(EncoderConfig::desk(), Strategy::frozen(), 13);
  EXPECT_THROW(mae_pretrain(m, {Tensor::zeros({4, 32, 32})}, MaeConfig{}), DimensionError);
}

}  // namespace
}  // namespace floodlora
