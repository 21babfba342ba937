#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "floodlora/data.hpp"
#include "floodlora/model.hpp"
#include "floodlora/objective.hpp"

namespace floodlora {

struct TrainConfig {
  std::size_t max_epochs = 50;
  std::size_t early_stop_patience = 2;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double sched_factor = 0.5;
  std::size_t sched_patience = 3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  LossConfig loss;

  void validate() const;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

// m, v mirror the parameter list passed to adam_step.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

// One bias-corrected Adam step with decoupled weight decay. Every parameter
// must be a trainable leaf holding a gradient; StateError otherwise.
void adam_step(std::span<const Tensor> params, OptimizerState& state, const AdamConfig& cfg);

// Reduce-on-plateau with min_delta 0: the lr is multiplied by `factor` once
// the count of non-improving epochs exceeds `patience`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience);

  double step(double val_loss);
  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t counter() const { return counter_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double best_;
  std::size_t counter_ = 0;
};

// True once `patience` epochs have passed without a strict improvement of
// the running best.
bool early_stop(std::span<const double> val_loss_history, std::size_t patience = 2);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  MetricsReport val_metrics;
  double wall_seconds = 0.0;  // informational, excluded from logs
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  StateDict best_state;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Seeded epoch loop; on return the model holds the best-validation weights.
TrainResult train(SegModel& model, const std::vector<FloodSample>& train_set, const std::vector<FloodSample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Mean combined loss over a split in eval mode.
double validation_loss(const SegModel& model, const std::vector<FloodSample>& samples, std::size_t batch_size,
                       const LossConfig& loss);

struct SampleReport {
  std::string id;
  MetricsReport metrics;
  std::vector<std::uint8_t> predicted;  // H*W, row-major
};

struct EvalResult {
  MetricsReport aggregate;
  std::vector<SampleReport> samples;
};

// Thresholds sigmoid(logits) at 0.5; aggregate metrics come from summed counts.
EvalResult evaluate(const SegModel& model, const std::vector<FloodSample>& samples, std::size_t batch_size = 8);

struct MaeConfig {
  double mask_ratio = 0.75;
  std::size_t epochs = 10;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MaeResult {
  std::vector<double> epoch_losses;
};

// Masked-patch reconstruction on [C, H, W] images. Masked tokens are replaced
// by a learned token; a linear head predicts their pixels; the head and
// token are discarded afterwards. Trains encoder base weights only.
MaeResult mae_pretrain(SegModel& model, const std::vector<Tensor>& images, const MaeConfig& cfg,
                       const std::function<void(std::size_t, double)>& on_epoch = {});

// Pre and post rasters of every sample, in order.
std::vector<Tensor> snapshot_images(const std::vector<FloodSample>& samples);

}  // namespace floodlora
