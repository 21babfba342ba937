#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "floodlora/tensor.hpp"

namespace floodlora {

enum class DiceReduction {
  Batch,     // one soft Dice over every pixel of the batch
  PerImage,  // mean of per-image soft Dice losses
};

struct LossConfig {
  double lambda_bce = 1.0;
  double lambda_dice = 1.0;
  double epsilon = 1e-6;
  double prob_clamp = 1e-7;
  DiceReduction dice_reduction = DiceReduction::Batch;

  void validate() const;
};

// Throws ValidationError unless every target is exactly 0 or 1.
void validate_binary_targets(const Tensor& targets);

// Mean binary cross-entropy of sigmoid(logits), probabilities clamped to
// [prob_clamp, 1 - prob_clamp].
Tensor bce_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg = {});
// 1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps) with p = sigmoid(logits).
Tensor dice_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg = {});
// Same soft Dice on probabilities that are already in [0, 1].
Tensor soft_dice_loss(const Tensor& probs, const Tensor& targets, const LossConfig& cfg = {});
// lambda_bce * bce + lambda_dice * dice.
Tensor combined_loss(const Tensor& logits, const Tensor& targets, const LossConfig& cfg = {});

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& other);
  bool operator==(const ConfusionCounts&) const = default;
};

struct MetricsReport {
  ConfusionCounts counts;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  double dice = 0.0;
  // Some ratio had a zero denominator and was reported as 0.
  bool degenerate = false;
};

ConfusionCounts confusion_counts(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
MetricsReport metrics_from_counts(const ConfusionCounts& counts);
// Both masks binary (0/1) and the same length.
MetricsReport compute_metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

// 2pr / (p + r), 0 when p + r == 0.
double f1_from_precision_recall(double precision, double recall);
// IoU = F1 / (2 - F1) on binary masks.
double iou_from_f1(double f1);

// sigmoid(logit) > 0.5, i.e. logit > 0.
std::vector<std::uint8_t> threshold_logits(const Tensor& logits);
std::vector<std::uint8_t> to_mask(const Tensor& binary);

// Flat record; the six ratios are percentages rounded to 2 decimals.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);
double as_percent(double fraction);

}  // namespace floodlora
