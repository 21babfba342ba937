#include "floodlora/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"

namespace floodlora {

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (early_stop_patience < 1 || sched_patience < 1) throw ConfigError("patiences must be at least 1");
  if (!(sched_factor > 0.0 && sched_factor < 1.0)) throw ConfigError("sched_factor must lie in (0, 1)");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  loss.validate();
}

void MaeConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie strictly between 0 and 1");
  if (epochs < 1) throw ConfigError("pretraining needs at least one epoch");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
}

// ---------------------------------------------------------------------------

void adam_step(std::span<const Tensor> params, OptimizerState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw StateError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i];
    if (!p.requires_grad() || !p.is_leaf()) throw StateError("adam: parameter " + std::to_string(i) + " is not a trainable leaf");
    if (!p.has_grad()) throw StateError("adam: trainable parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != p.numel()) throw StateError("adam: moment buffer shape drifted from its parameter");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
      w[k] -= cfg.lr * (update + cfg.weight_decay * w[k]);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience)
    : lr_(lr), factor_(factor), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("scheduler factor must lie in (0, 1)");
  if (patience < 1) throw ConfigError("scheduler patience must be at least 1");
}

double PlateauScheduler::step(double val_loss) {
  if (!std::isfinite(val_loss)) throw NumericalError("scheduler received a non-finite validation loss");
  if (val_loss < best_) {
    best_ = val_loss;
    counter_ = 0;
  } else if (++counter_ > patience_) {
    lr_ *= factor_;
    counter_ = 0;
  }
  return lr_;
}

bool early_stop(std::span<const double> history, std::size_t patience) {
  if (history.empty()) throw UsageError("early_stop needs a non-empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] < history[best]) best = i;
  }
  return history.size() - 1 - best >= patience;
}

// ---------------------------------------------------------------------------

namespace {

struct EvalPass {
  double loss = 0.0;
  ConfusionCounts counts;
};

EvalPass eval_pass(const SegModel& model, const std::vector<FloodSample>& samples, std::size_t batch_size,
                   const LossConfig& loss) {
  NoGradGuard no_grad;
  EvalPass out;
  for (const auto& positions : split_iter(samples.size(), Split::Val, batch_size, 0)) {
    const Batch batch = make_batch(samples, positions);
    const Tensor logits = model.forward(batch.pre, batch.post);
    out.loss += combined_loss(logits, batch.mask, loss).item() * static_cast<double>(positions.size());
    out.counts += confusion_counts(threshold_logits(logits), to_mask(batch.mask));
  }
  out.loss /= static_cast<double>(samples.size());
  return out;
}

std::uint64_t epoch_shuffle_seed(std::uint64_t seed, std::size_t epoch) {
  return Rng(seed, streams::kShuffle).fork(epoch).next_u64();
}

AdamConfig adam_config(const TrainConfig& cfg, double lr) {
  return AdamConfig{lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

double validation_loss(const SegModel& model, const std::vector<FloodSample>& samples, std::size_t batch_size,
                       const LossConfig& loss) {
  if (samples.empty()) throw UsageError("validation split is empty");
  return eval_pass(model, samples, batch_size, loss).loss;
}

TrainResult train(SegModel& model, const std::vector<FloodSample>& train_set, const std::vector<FloodSample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw UsageError("train split is empty");
  if (val_set.empty()) throw UsageError("validation split is empty");

  const std::vector<Tensor> params = model.trainable_parameters();
  OptimizerState opt;
  PlateauScheduler scheduler(cfg.lr, cfg.sched_factor, cfg.sched_patience);
  Rng dropout_rng(cfg.seed, streams::kDropout);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  result.best_state = model.state();
  std::vector<double> history;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = scheduler.lr();
    const AdamConfig adam = adam_config(cfg, lr);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (const auto& positions :
         split_iter(train_set.size(), Split::Train, cfg.batch_size, epoch_shuffle_seed(cfg.seed, epoch))) {
      ++batch_index;
      const Batch batch = make_batch(train_set, positions);
      for (const Tensor& p : params) Tensor(p).clear_grad();
      const Tensor logits = model.forward(batch.pre, batch.post, ForwardMode{true, &dropout_rng});
      const Tensor loss = combined_loss(logits, batch.mask, cfg.loss);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index) + " (lr " + fmt_double(lr) + ")");
      }
      if (!params.empty()) {
        loss.backward();
        adam_step(params, opt, adam);
      }
      loss_sum += value * static_cast<double>(positions.size());
    }
    for (const Tensor& p : params) Tensor(p).clear_grad();

    const EvalPass val = eval_pass(model, val_set, cfg.batch_size, cfg.loss);
    if (!std::isfinite(val.loss)) {
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch) + " (lr " + fmt_double(lr) + ")");
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(train_set.size());
    record.val_loss = val.loss;
    record.lr = lr;
    record.val_metrics = metrics_from_counts(val.counts);

    if (val.loss < result.best_val_loss) {
      result.best_val_loss = val.loss;
      result.best_epoch = epoch;
      result.best_state = model.state();
    }
    scheduler.step(val.loss);
    history.push_back(val.loss);
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
    if (early_stop(history, cfg.early_stop_patience)) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  model.load_state(result.best_state);
  return result;
}

EvalResult evaluate(const SegModel& model, const std::vector<FloodSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw UsageError("cannot evaluate an empty split");
  NoGradGuard no_grad;
  EvalResult result;
  ConfusionCounts total;
  for (const auto& positions : split_iter(samples.size(), Split::Test, batch_size, 0)) {
    const Batch batch = make_batch(samples, positions);
    const Tensor logits = model.forward(batch.pre, batch.post);
    const std::vector<std::uint8_t> predicted = threshold_logits(logits);
    const std::size_t plane = predicted.size() / positions.size();
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const FloodSample& s = samples[positions[i]];
      SampleReport report;
      report.id = s.id;
      report.predicted.assign(predicted.begin() + i * plane, predicted.begin() + (i + 1) * plane);
      const ConfusionCounts counts = confusion_counts(report.predicted, to_mask(s.mask));
      report.metrics = metrics_from_counts(counts);
      total += counts;
      result.samples.push_back(std::move(report));
    }
  }
  result.aggregate = metrics_from_counts(total);
  return result;
}

std::vector<Tensor> snapshot_images(const std::vector<FloodSample>& samples) {
  std::vector<Tensor> out;
  out.reserve(2 * samples.size());
  for (const FloodSample& s : samples) {
    out.push_back(s.pre);
    out.push_back(s.post);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Tensor stack_images(const std::vector<Tensor>& images, std::span<const std::size_t> positions) {
  const Shape& shape = images[positions[0]].shape();
  std::vector<double> values;
  values.reserve(positions.size() * images[positions[0]].numel());
  for (std::size_t pos : positions) {
    if (images[pos].shape() != shape) throw DimensionError("pretraining images differ in shape");
    values.insert(values.end(), images[pos].data().begin(), images[pos].data().end());
  }
  return Tensor({positions.size(), shape[0], shape[1], shape[2]}, std::move(values));
}

// Restores requires_grad flags on scope exit and drops stray gradients.
class TrainableScope {
 public:
  explicit TrainableScope(std::vector<Tensor> params) : params_(std::move(params)) {
    for (Tensor& p : params_) {
      flags_.push_back(p.requires_grad());
      p.set_requires_grad(true);
    }
  }
  ~TrainableScope() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      params_[i].clear_grad();
      params_[i].set_requires_grad(flags_[i]);
    }
  }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<bool> flags_;
};

}  // namespace

MaeResult mae_pretrain(SegModel& model, const std::vector<Tensor>& images, const MaeConfig& cfg,
                       const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  if (images.empty()) throw UsageError("pretraining needs at least one image");
  const EncoderConfig& ec = model.config();
  const Shape expected{ec.in_channels, ec.image_size, ec.image_size};
  for (const Tensor& img : images) {
    if (img.shape() != expected) {
      throw DimensionError("pretraining image " + shape_str(img.shape()) + " does not match encoder input " +
                           shape_str(expected));
    }
  }

  std::vector<Tensor> encoder_params;
  for (const NamedParameter& p : model.parameters()) {
    if (p.group == ParamGroup::EncoderBase) encoder_params.push_back(p.tensor);
  }
  TrainableScope scope(std::move(encoder_params));

  const Rng root(cfg.seed, streams::kMaeMask);
  Rng head_rng = root.fork(0);
  Rng mask_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);

  std::vector<double> token_values(ec.d_model);
  for (double& v : token_values) v = head_rng.normal(0.0, 0.02);
  const Tensor mask_token({ec.d_model}, std::move(token_values), true);
  const AdaptedLinear head = AdaptedLinear::create(ec.d_model, ec.patch_dim(), true, head_rng);

  std::vector<Tensor> params = scope.params();
  params.push_back(mask_token);
  params.push_back(head.weight());
  params.push_back(head.bias());

  const std::size_t tokens = ec.tokens();
  const std::size_t n_masked = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.mask_ratio * static_cast<double>(tokens))), 1, tokens - 1);
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
  OptimizerState opt;
  MaeResult result;

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> positions(order.data() + start, end - start);
      const std::size_t b = positions.size();
      const Tensor x = stack_images(images, positions);

      TokenMask mask{std::vector<std::uint8_t>(b * tokens, 0), mask_token};
      std::vector<std::size_t> masked_rows;
      std::vector<std::size_t> perm(tokens);
      for (std::size_t i = 0; i < b; ++i) {
        std::iota(perm.begin(), perm.end(), 0);
        // Partial Fisher-Yates: the first n_masked entries are a uniform subset.
        for (std::size_t k = 0; k < n_masked; ++k) std::swap(perm[k], perm[k + mask_rng.below(tokens - k)]);
        for (std::size_t k = 0; k < n_masked; ++k) mask.rows[i * tokens + perm[k]] = 1;
      }
      for (std::size_t r = 0; r < mask.rows.size(); ++r) {
        if (mask.rows[r]) masked_rows.push_back(r);
      }

      for (const Tensor& p : params) Tensor(p).clear_grad();
      const Tensor z = model.encoder().encode(x, ForwardMode{}, &mask);
      const Tensor pred = reshape(head.forward(z), {b * tokens, ec.patch_dim()});
      const Tensor target = reshape(model.encoder().patchify(x).detach(), {b * tokens, ec.patch_dim()});
      const Tensor loss = mse(select_rows(pred, masked_rows), select_rows(target, masked_rows));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite reconstruction loss at pretraining epoch " + std::to_string(epoch));
      }
      loss.backward();
      adam_step(params, opt, adam);
      loss_sum += value * static_cast<double>(b);
    }
    const double epoch_loss = loss_sum / static_cast<double>(images.size());
    result.epoch_losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return result;
}

}  // namespace floodlora
