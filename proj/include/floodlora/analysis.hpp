#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "floodlora/data.hpp"
#include "floodlora/model.hpp"

namespace floodlora {

// Row-major sample matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct PcaResult {
  std::vector<double> mean;            // cols
  Matrix components;                   // k x cols, orthonormal rows
  std::vector<double> explained;       // variance along each component
  Matrix projection;                   // rows x k
};

// Top-k principal directions of the centered data. Each component's sign is
// fixed so its largest-magnitude entry is positive.
PcaResult pca(const Matrix& data, std::size_t k = 2);

struct PatchEmbeddings {
  std::vector<std::string> sample_ids;  // one per row
  std::vector<std::size_t> patch_index;
  std::vector<std::uint8_t> water;      // majority label of the patch
  Matrix embeddings;                    // rows = samples * tokens, cols = d_model
};

// Encoder output of each sample's post-event snapshot, one row per patch.
PatchEmbeddings patch_embeddings(const SegModel& model, const std::vector<FloodSample>& samples,
                                 std::size_t batch_size = 8);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Standardized L2-regularized logistic regression fit by full-batch gradient
// descent; deterministic.
ProbeResult linear_probe(const Matrix& train_x, const std::vector<std::uint8_t>& train_y, const Matrix& test_x,
                         const std::vector<std::uint8_t>& test_y, std::size_t iterations = 500, double lr = 0.5,
                         double l2 = 1e-4);

}  // namespace floodlora
