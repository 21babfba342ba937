#include "floodlora/objective.hpp"

#include <cmath>
#include <cstdio>

#include "floodlora/errors.hpp"

namespace floodlora {

void LossConfig::validate() const {
  if (!(lambda_bce > 0.0 && lambda_dice > 0.0 && epsilon > 0.0 && prob_clamp > 0.0 && prob_clamp < 0.5)) {
    throw ConfigError("loss weights, epsilon and prob_clamp must be strictly positive (prob_clamp < 0.5)");
  }
}

void validate_binary_targets(const Tensor& targets) {
  for (double v : targets.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("targets must be binary (0 or 1), found " + std::to_string(v));
  }
}

namespace {

void check_pair(const Tensor& predictions, const Tensor& targets, const char* op) {
  if (predictions.shape() != targets.shape()) {
    throw DimensionError(std::string(op) + ": predictions " + shape_str(predictions.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  validate_binary_targets(targets);
}

Tensor soft_dice_flat(const Tensor& probs, const Tensor& targets, double eps) {
  const Tensor overlap = sum(mul(targets, probs));
  const Tensor denom = add_scalar(add(sum(square(targets)), sum(square(probs))), eps);
  return add_scalar(neg(div(add_scalar(mul_scalar(overlap, 2.0), eps), denom)), 1.0);
}

Tensor soft_dice_impl(const Tensor& probs, const Tensor& targets, const LossConfig& cfg) {
  if (cfg.dice_reduction == DiceReduction::Batch || probs.rank() == 0 || probs.dim(0) == 1) {
    return soft_dice_flat(probs, targets, cfg.epsilon);
  }
  const std::size_t batch = probs.dim(0);
  const std::size_t per_image = probs.numel() / batch;
  // [b, n] -> [n, b] so each image becomes one last-dim column.
  const auto p_cols = split_lastdim(transpose_last2(reshape(probs, {batch, per_image})), batch);
  const auto t_cols = split_lastdim(transpose_last2(reshape(targets, {batch, per_image})), batch);
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < batch; ++i) losses.push_back(reshape(soft_dice_flat(p_cols[i], t_cols[i], cfg.epsilon), {1}));
  return mean(concat(losses, 0));
}

}  // namespace

Tensor bce_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg) {
  check_pair(logits, targets, "bce_loss");
  const Tensor p = clamp(sigmoid(logits), cfg.prob_clamp, 1.0 - cfg.prob_clamp);
  const Tensor pos = mul(targets, log(p));
  const Tensor negative_targets = add_scalar(neg(targets), 1.0);
  const Tensor negs = mul(negative_targets, log(add_scalar(neg(p), 1.0)));
  return neg(mean(add(pos, negs)));
}

Tensor dice_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg) {
  check_pair(logits, targets, "dice_loss");
  return soft_dice_impl(sigmoid(logits), targets, cfg);
}

Tensor soft_dice_loss(const Tensor& probs, const Tensor& targets, const LossConfig& cfg) {
  check_pair(probs, targets, "soft_dice_loss");
  for (double v : probs.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("soft_dice_loss: probabilities must lie in [0,1]");
  }
  return soft_dice_impl(probs, targets, cfg);
}

Tensor combined_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg) {
  cfg.validate();
  return add(mul_scalar(bce_loss(logits, targets, cfg), cfg.lambda_bce),
             mul_scalar(dice_loss(logits, targets, cfg), cfg.lambda_dice));
}

// ---------------------------------------------------------------------------

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  tn += other.tn;
  return *this;
}

ConfusionCounts confusion_counts(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("metrics: predicted mask has " + std::to_string(predicted.size()) +
                         " pixels, ground truth has " + std::to_string(truth.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const std::uint8_t p = predicted[i];
    const std::uint8_t t = truth[i];
    if (p > 1 || t > 1) throw ValidationError("metrics: masks must be binary");
    if (p && t) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (t) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

MetricsReport metrics_from_counts(const ConfusionCounts& counts) {
  if (counts.total() == 0) throw UsageError("metrics over zero pixels");
  MetricsReport r;
  r.counts = counts;
  const auto ratio = [&r](double num, double den) {
    if (den == 0.0) {
      r.degenerate = true;
      return 0.0;
    }
    return num / den;
  };
  const double tp = static_cast<double>(counts.tp);
  const double fp = static_cast<double>(counts.fp);
  const double fn = static_cast<double>(counts.fn);
  const double tn = static_cast<double>(counts.tn);
  r.accuracy = (tp + tn) / static_cast<double>(counts.total());
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.f1 = f1_from_precision_recall(r.precision, r.recall);
  r.iou = ratio(tp, tp + fp + fn);
  // Overlap form 2|P and T| / (|P| + |T|); agrees with f1 on binary masks.
  r.dice = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  return r;
}

MetricsReport compute_metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  return metrics_from_counts(confusion_counts(predicted, truth));
}

double f1_from_precision_recall(double precision, double recall) {
  const double den = precision + recall;
  return den == 0.0 ? 0.0 : 2.0 * precision * recall / den;
}

double iou_from_f1(double f1) { return f1 / (2.0 - f1); }

std::vector<std::uint8_t> threshold_logits(const Tensor& logits) {
  std::vector<std::uint8_t> out(logits.numel());
  const auto v = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> to_mask(const Tensor& binary) {
  validate_binary_targets(binary);
  std::vector<std::uint8_t> out(binary.numel());
  const auto v = binary.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] != 0.0 ? 1 : 0;
  return out;
}

double as_percent(double fraction) { return std::round(fraction * 10000.0) / 100.0; }

std::string metrics_csv_header() { return "accuracy,precision,recall,f1,iou,dice,tp,fp,fn,tn,degenerate"; }

std::string metrics_csv_row(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.2f,%.2f,%.2f,%.2f,%.2f,%.2f,%llu,%llu,%llu,%llu,%d", r.accuracy * 100.0,
                r.precision * 100.0, r.recall * 100.0, r.f1 * 100.0, r.iou * 100.0, r.dice * 100.0,
                static_cast<unsigned long long>(r.counts.tp), static_cast<unsigned long long>(r.counts.fp),
                static_cast<unsigned long long>(r.counts.fn), static_cast<unsigned long long>(r.counts.tn),
                r.degenerate ? 1 : 0);
  return buf;
}

}  // namespace floodlora
