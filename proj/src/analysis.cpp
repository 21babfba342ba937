#include "floodlora/analysis.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "floodlora/errors.hpp"

namespace floodlora {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Matrix& m) {
  if (m.values.size() != m.rows * m.cols) throw DimensionError("matrix storage does not match its extents");
  return {m.values.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

}  // namespace

PcaResult pca(const Matrix& data, std::size_t k) {
  if (data.rows < 2) throw UsageError("pca needs at least two rows");
  if (k == 0 || k > data.cols) throw ConfigError("pca: component count must lie in [1, cols]");
  const auto x = view(data);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const RowMatrix centered = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(data.rows - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("pca: eigendecomposition failed");

  PcaResult out;
  out.mean.assign(mu.data(), mu.data() + mu.size());
  out.components = Matrix{k, data.cols, std::vector<double>(k * data.cols)};
  out.projection = Matrix{data.rows, k, std::vector<double>(data.rows * k)};
  for (std::size_t c = 0; c < k; ++c) {
    // Eigenvalues come in ascending order.
    const Eigen::Index col = static_cast<Eigen::Index>(data.cols - 1 - c);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    out.explained.push_back(std::max(0.0, solver.eigenvalues()(col)));
    for (std::size_t j = 0; j < data.cols; ++j) out.components.values[c * data.cols + j] = v(j);
    const Eigen::VectorXd proj = centered * v;
    for (std::size_t r = 0; r < data.rows; ++r) out.projection.values[r * k + c] = proj(r);
  }
  return out;
}

PatchEmbeddings patch_embeddings(const SegModel& model, const std::vector<FloodSample>& samples,
                                 std::size_t batch_size) {
  if (samples.empty()) throw UsageError("no samples to embed");
  const EncoderConfig& c = model.config();
  const std::size_t tokens = c.tokens();
  const std::size_t grid = c.grid();
  const std::size_t p = c.patch_size;
  NoGradGuard no_grad;
  PatchEmbeddings out;
  out.embeddings.cols = c.d_model;
  for (const auto& positions : split_iter(samples.size(), Split::Test, batch_size, 0)) {
    const Batch batch = make_batch(samples, positions);
    const Tensor z = model.encoder().encode(batch.post, ForwardMode{});
    out.embeddings.values.insert(out.embeddings.values.end(), z.data().begin(), z.data().end());
    for (std::size_t pos : positions) {
      const FloodSample& s = samples[pos];
      const std::size_t width = s.mask.dim(1);
      const auto mask = s.mask.data();
      for (std::size_t t = 0; t < tokens; ++t) {
        const std::size_t gy = t / grid;
        const std::size_t gx = t % grid;
        std::size_t wet = 0;
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) wet += mask[(gy * p + dy) * width + gx * p + dx] != 0.0;
        }
        out.sample_ids.push_back(s.id);
        out.patch_index.push_back(t);
        out.water.push_back(2 * wet > p * p ? 1 : 0);
      }
    }
  }
  out.embeddings.rows = out.sample_ids.size();
  return out;
}

ProbeResult linear_probe(const Matrix& train_x, const std::vector<std::uint8_t>& train_y, const Matrix& test_x,
                         const std::vector<std::uint8_t>& test_y, std::size_t iterations, double lr, double l2) {
  if (train_x.rows != train_y.size() || test_x.rows != test_y.size() || train_x.cols != test_x.cols) {
    throw DimensionError("linear probe: feature and label extents disagree");
  }
  if (train_x.rows == 0 || test_x.rows == 0) throw UsageError("linear probe needs non-empty train and test sets");
  const auto xtr = view(train_x);
  const auto xte = view(test_x);
  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) sd(j) = sd(j) > 1e-12 ? sd(j) : 1.0;
  const RowMatrix a = (xtr.rowwise() - mu).array().rowwise() / sd.array();
  const RowMatrix b = (xte.rowwise() - mu).array().rowwise() / sd.array();
  Eigen::VectorXd y(train_y.size());
  for (std::size_t i = 0; i < train_y.size(); ++i) y(i) = train_y[i];

  Eigen::VectorXd w = Eigen::VectorXd::Zero(a.cols());
  double bias = 0.0;
  const double n = static_cast<double>(a.rows());
  for (std::size_t it = 0; it < iterations; ++it) {
    const Eigen::VectorXd z = (a * w).array() + bias;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    const Eigen::VectorXd r = p - y;
    w -= lr * ((a.transpose() * r) / n + l2 * w);
    bias -= lr * r.mean();
  }
  const auto accuracy = [&](const RowMatrix& x, const std::vector<std::uint8_t>& labels) {
    const Eigen::VectorXd z = (x * w).array() + bias;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += (z(i) > 0.0) == (labels[i] != 0);
    return static_cast<double>(hits) / static_cast<double>(labels.size());
  };
  return {accuracy(a, train_y), accuracy(b, test_y)};
}

}  // namespace floodlora
