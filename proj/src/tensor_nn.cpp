#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"
#include "floodlora/tensor.hpp"
#include "tensor_internal.hpp"

namespace floodlora {

using detail::make_op;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct Grid {
  std::size_t channels, height, width;  // image the patches are drawn from
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;             // number of patch positions
};

// cols[(c*k + ki)*k + kj][oy*out_w + ox] = img[c][oy*s - p + ki][ox*s - p + kj]
void im2col(const double* img, const Grid& g, double* cols) {
  const std::size_t positions = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) && x < static_cast<long>(g.width);
            row[oy * g.out_w + ox] = inside ? img[(c * g.height + y) * g.width + x] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const double* cols, const Grid& g, double* img) {
  const std::size_t positions = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            img[(c * g.height + y) * g.width + x] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

void check_conv_inputs(const Tensor& x, const Tensor& weight, const Tensor& bias, const char* op,
                       std::size_t weight_in_axis, std::size_t weight_out_axis) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": input must be [b,c,h,w], got " + shape_str(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw DimensionError(std::string(op) + ": weight must be a square 4-d kernel, got " + shape_str(weight.shape()));
  }
  if (weight.dim(weight_in_axis) != x.dim(1)) {
    throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(weight_out_axis))) {
    throw DimensionError(std::string(op) + ": bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax_lastdim on a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * width;
    double* dst = out.data() + r * width;
    const double top = *std::max_element(src, src + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = std::exp(src[j] - top);
      total += dst[j];
    }
    for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
  }
  return make_op(x.shape(), std::move(out), "softmax", {x}, [rows, width](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * width;
      const double* gy = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t width = x.shape().back();
  if (gamma.numel() != width || beta.numel() != width) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += src[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (src[j] - mu) * inv;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gm[j] + bt[j];
    }
  }
  return make_op(x.shape(), std::move(out), "layer_norm", {x, gamma, beta}, [xhat, rstd, rows, width](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const double n = static_cast<double>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = self.grad.data() + r * width;
      const double* h = xhat->data() + r * width;
      if (pg.requires_grad) {
        auto& g = pg.grad_buffer();
        for (std::size_t j = 0; j < width; ++j) g[j] += gy[j] * h[j];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buffer();
        for (std::size_t j = 0; j < width; ++j) g[j] += gy[j];
      }
      if (px.requires_grad) {
        double mean_d = 0.0;
        double mean_dh = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          const double d = gy[j] * pg.data[j];
          mean_d += d;
          mean_dh += d * h[j];
        }
        mean_d /= n;
        mean_dh /= n;
        auto& g = px.grad_buffer();
        for (std::size_t j = 0; j < width; ++j) {
          const double d = gy[j] * pg.data[j];
          g[r * width + j] += (*rstd)[r] * (d - mean_d - h[j] * mean_dh);
        }
      }
    }
  });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw UsageError("dropout in training mode needs a random stream");
  const double keep_scale = 1.0 / (1.0 - p);
  auto scale = std::make_shared<std::vector<double>>(x.numel());
  for (double& s : *scale) s = rng->uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * (*scale)[i];
  return make_op(x.shape(), std::move(out), "dropout", {x}, [scale](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*scale)[i];
  });
}

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom) {
  check_conv_inputs(x, weight, bias, "conv2d", 1, 0);
  if (geom.stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const long span_h = static_cast<long>(h + 2 * geom.padding) - static_cast<long>(k);
  const long span_w = static_cast<long>(w + 2 * geom.padding) - static_cast<long>(k);
  if (span_h < 0 || span_w < 0) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_str(x.shape()));
  }
  const Grid grid{cin, h, w, k, geom.stride, geom.padding, static_cast<std::size_t>(span_h) / geom.stride + 1,
                  static_cast<std::size_t>(span_w) / geom.stride + 1};
  const std::size_t positions = grid.out_h * grid.out_w;
  const std::size_t patch = cin * k * k;

  std::vector<double> out(batch * cout * positions);
  std::vector<double> cols(patch * positions);
  ConstMap W(weight.data().data(), cout, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * cin * h * w, grid, cols.data());
    MutMap Y(out.data() + b * cout * positions, cout, positions);
    Y.noalias() = W * ConstMap(cols.data(), patch, positions);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) Y.row(c).array() += bias.data()[c];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op({batch, cout, grid.out_h, grid.out_w}, std::move(out), "conv2d", inputs,
                 [grid, batch, cout, patch, positions](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   const std::size_t img = grid.channels * grid.height * grid.width;
                   std::vector<double> cols(patch * positions);
                   ConstMap W(pw.data.data(), cout, patch);
                   for (std::size_t b = 0; b < batch; ++b) {
                     ConstMap G(self.grad.data() + b * cout * positions, cout, positions);
                     if (pw.requires_grad) {
                       im2col(px.data.data() + b * img, grid, cols.data());
                       MutMap GW(pw.grad_buffer().data(), cout, patch);
                       GW.noalias() += G * ConstMap(cols.data(), patch, positions).transpose();
                     }
                     if (px.requires_grad) {
                       MutMap C(cols.data(), patch, positions);
                       C.noalias() = W.transpose() * G;
                       col2im(cols.data(), grid, px.grad_buffer().data() + b * img);
                     }
                     if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                       auto& gb = self.parents[2]->grad_buffer();
                       for (std::size_t c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                     }
                   }
                 });
}

Tensor deconv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom) {
  check_conv_inputs(x, weight, bias, "deconv2d", 0, 1);
  if (geom.stride == 0) throw ConfigError("deconv2d: stride must be >= 1");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(1), k = weight.dim(2);
  const long oh = static_cast<long>((h - 1) * geom.stride + k) - 2 * static_cast<long>(geom.padding);
  const long ow = static_cast<long>((w - 1) * geom.stride + k) - 2 * static_cast<long>(geom.padding);
  if (oh <= 0 || ow <= 0) {
    throw ConfigError("deconv2d: non-positive output extent for input " + shape_str(x.shape()) + " and kernel " +
                      std::to_string(k));
  }
  // The output image plays the role of the im2col source; input pixels are
  // the patch positions.
  const Grid grid{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k, geom.stride, geom.padding, h, w};
  const std::size_t positions = h * w;
  const std::size_t patch = cout * k * k;
  const std::size_t out_img = cout * grid.height * grid.width;

  std::vector<double> out(batch * out_img, 0.0);
  std::vector<double> cols(patch * positions);
  ConstMap W(weight.data().data(), cin, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    ConstMap X(x.data().data() + b * cin * positions, cin, positions);
    MutMap C(cols.data(), patch, positions);
    C.noalias() = W.transpose() * X;
    double* dst = out.data() + b * out_img;
    col2im(cols.data(), grid, dst);
    if (bias.defined()) {
      const std::size_t plane = grid.height * grid.width;
      for (std::size_t c = 0; c < cout; ++c) {
        const double v = bias.data()[c];
        for (std::size_t i = 0; i < plane; ++i) dst[c * plane + i] += v;
      }
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op({batch, cout, grid.height, grid.width}, std::move(out), "deconv2d", inputs,
                 [grid, batch, cin, cout, patch, positions, out_img](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   std::vector<double> cols(patch * positions);
                   ConstMap W(pw.data.data(), cin, patch);
                   const std::size_t plane = grid.height * grid.width;
                   for (std::size_t b = 0; b < batch; ++b) {
                     const double* g = self.grad.data() + b * out_img;
                     im2col(g, grid, cols.data());
                     ConstMap GC(cols.data(), patch, positions);
                     if (px.requires_grad) {
                       MutMap GX(px.grad_buffer().data() + b * cin * positions, cin, positions);
                       GX.noalias() += W * GC;
                     }
                     if (pw.requires_grad) {
                       ConstMap X(px.data.data() + b * cin * positions, cin, positions);
                       MutMap GW(pw.grad_buffer().data(), cin, patch);
                       GW.noalias() += X * GC.transpose();
                     }
                     if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                       auto& gb = self.parents[2]->grad_buffer();
                       for (std::size_t c = 0; c < cout; ++c) {
                         double total = 0.0;
                         for (std::size_t i = 0; i < plane; ++i) total += g[c * plane + i];
                         gb[c] += total;
                       }
                     }
                   }
                 });
}

}  // namespace floodlora
