#include <Eigen/Core>
#include <stdexcept>

#include "feds/autograd.hpp"

namespace feds::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
  int channels, height, width;  // input side of the convolution
  int kh, kw, stride, pad_h, pad_w;
  int out_h, out_w;

  int rows() const { return channels * kh * kw; }
  int cols() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
        const double* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            for (int ox = 0; ox < g.out_w; ++ox) dst[ox] = 0.0;
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* x) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
        double* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = row + oy * g.out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad_h, int pad_w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: expected 4-D input and weight");
  if (xs[1] != ws[1]) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(xs[1]) + " != weight in-channels " +
                                std::to_string(ws[1]));
  }
  const int batch = xs[0], cout = ws[0];
  ConvGeom g{xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad_h, pad_w, 0, 0};
  g.out_h = (g.height + 2 * pad_h - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad_w - g.kw) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != cout)) {
    throw std::invalid_argument("conv2d: bias shape mismatch");
  }

  Tensor out(Shape{batch, cout, g.out_h, g.out_w});
  std::vector<double> col(static_cast<std::size_t>(g.rows()) * g.cols());
  ConstMapMat wm(w.value().data.data(), cout, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * g.cols();
  for (int n = 0; n < batch; ++n) {
    im2col(x.value().data.data() + n * in_stride, g, col.data());
    MapMat om(out.data.data() + n * out_stride, cout, g.cols());
    om.noalias() = wm * ConstMapMat(col.data(), g.rows(), g.cols());
    if (b.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data.data(), cout);
  }

  return make_result(std::move(out), {x, w, b}, [g, batch, cout, in_stride, out_stride](Node& self) {
    Tensor* gx = self.parents[0] && self.parents[0]->requires_grad ? &self.parents[0]->grad_buffer() : nullptr;
    Tensor* gw = self.parents[1] && self.parents[1]->requires_grad ? &self.parents[1]->grad_buffer() : nullptr;
    Tensor* gb = self.parents[2] && self.parents[2]->requires_grad ? &self.parents[2]->grad_buffer() : nullptr;
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    ConstMapMat wm(wv.data.data(), cout, g.rows());
    std::vector<double> col(static_cast<std::size_t>(g.rows()) * g.cols());
    for (int n = 0; n < batch; ++n) {
      ConstMapMat gy(self.grad.data.data() + n * out_stride, cout, g.cols());
      if (gw) {
        im2col(xv.data.data() + n * in_stride, g, col.data());
        MapMat(gw->data.data(), cout, g.rows()).noalias() += gy * ConstMapMat(col.data(), g.rows(), g.cols()).transpose();
      }
      if (gb) Eigen::Map<Eigen::VectorXd>(gb->data.data(), cout) += gy.rowwise().sum();
      if (gx) {
        MapMat cm(col.data(), g.rows(), g.cols());
        cm.noalias() = wm.transpose() * gy;
        col2im_add(col.data(), g, gx->data.data() + n * in_stride);
      }
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int output_pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv_transpose2d: expected 4-D tensors");
  if (xs[1] != ws[0]) throw std::invalid_argument("conv_transpose2d: input channel mismatch");
  if (output_pad >= stride) throw std::invalid_argument("conv_transpose2d: output_pad must be < stride");
  const int batch = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = ws[1], k = ws[2];
  const int out_h = (h - 1) * stride - 2 * pad + k + output_pad;
  const int out_w = (wd - 1) * stride - 2 * pad + k + output_pad;
  // Geometry of the adjoint convolution: output-space image -> input-space grid.
  ConvGeom g{cout, out_h, out_w, k, k, stride, pad, pad, h, wd};
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != cout)) {
    throw std::invalid_argument("conv_transpose2d: bias shape mismatch");
  }

  Tensor out(Shape{batch, cout, out_h, out_w});
  const std::size_t in_stride = static_cast<std::size_t>(cin) * h * wd;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * out_h * out_w;
  std::vector<double> col(static_cast<std::size_t>(g.rows()) * g.cols());
  ConstMapMat wm(w.value().data.data(), cin, g.rows());
  for (int n = 0; n < batch; ++n) {
    MapMat cm(col.data(), g.rows(), g.cols());
    cm.noalias() = wm.transpose() * ConstMapMat(x.value().data.data() + n * in_stride, cin, g.cols());
    double* dst = out.data.data() + n * out_stride;
    col2im_add(col.data(), g, dst);
    if (b.defined()) {
      for (int c = 0; c < cout; ++c) {
        const double bc = b.value().data[static_cast<std::size_t>(c)];
        double* plane = dst + static_cast<std::size_t>(c) * out_h * out_w;
        for (int i = 0; i < out_h * out_w; ++i) plane[i] += bc;
      }
    }
  }

  return make_result(std::move(out), {x, w, b}, [g, batch, cin, cout, in_stride, out_stride](Node& self) {
    Tensor* gx = self.parents[0] && self.parents[0]->requires_grad ? &self.parents[0]->grad_buffer() : nullptr;
    Tensor* gw = self.parents[1] && self.parents[1]->requires_grad ? &self.parents[1]->grad_buffer() : nullptr;
    Tensor* gb = self.parents[2] && self.parents[2]->requires_grad ? &self.parents[2]->grad_buffer() : nullptr;
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    ConstMapMat wm(wv.data.data(), cin, g.rows());
    std::vector<double> col(static_cast<std::size_t>(g.rows()) * g.cols());
    const int plane = g.height * g.width;
    for (int n = 0; n < batch; ++n) {
      const double* gy = self.grad.data.data() + n * out_stride;
      if (gb) {
        for (int c = 0; c < cout; ++c) {
          double acc = 0.0;
          for (int i = 0; i < plane; ++i) acc += gy[static_cast<std::size_t>(c) * plane + i];
          gb->data[static_cast<std::size_t>(c)] += acc;
        }
      }
      if (!gx && !gw) continue;
      im2col(gy, g, col.data());
      ConstMapMat cm(col.data(), g.rows(), g.cols());
      if (gx) MapMat(gx->data.data() + n * in_stride, cin, g.cols()).noalias() += wm * cm;
      if (gw) {
        MapMat(gw->data.data(), cin, g.rows()).noalias() +=
            ConstMapMat(xv.data.data() + n * in_stride, cin, g.cols()) * cm.transpose();
      }
    }
  });
}

}  // namespace feds::ops
