#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "feds/autograd.hpp"

namespace feds::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tensor* grad_if(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  return (p && p->requires_grad) ? &p->grad_buffer() : nullptr;
}

}  // namespace

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& ws = w.shape();
  if (ws.size() != 2) throw std::invalid_argument("linear: weight must be 2-D");
  const int in = ws[1], out_f = ws[0];
  if (x.shape().empty() || x.shape().back() != in) {
    throw std::invalid_argument("linear: input last dim " + shape_str(x.shape()) + " vs weight " + shape_str(ws));
  }
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in));
  Shape os = x.shape();
  os.back() = out_f;
  Tensor out(os);
  MapMat om(out.data.data(), rows, out_f);
  om.noalias() = ConstMapMat(x.value().data.data(), rows, in) * ConstMapMat(w.value().data.data(), out_f, in).transpose();
  if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data.data(), out_f);
  return make_result(std::move(out), {x, w, b}, [rows, in, out_f](Node& self) {
    ConstMapMat gy(self.grad.data.data(), rows, out_f);
    if (Tensor* gx = grad_if(self, 0)) {
      MapMat(gx->data.data(), rows, in).noalias() += gy * ConstMapMat(self.parents[1]->value.data.data(), out_f, in);
    }
    if (Tensor* gw = grad_if(self, 1)) {
      MapMat(gw->data.data(), out_f, in).noalias() +=
          gy.transpose() * ConstMapMat(self.parents[0]->value.data.data(), rows, in);
    }
    if (Tensor* gb = grad_if(self, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data.data(), out_f) += gy.colwise().sum();
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int d = x.shape().back();
  if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d)) {
    throw std::invalid_argument("layer_norm: affine parameter size mismatch");
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  const auto& xv = x.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = xv.data() + r * d;
    double m = 0.0;
    for (int i = 0; i < d; ++i) m += px[i];
    m /= d;
    double v = 0.0;
    for (int i = 0; i < d; ++i) v += (px[i] - m) * (px[i] - m);
    v /= d;
    const double is = 1.0 / std::sqrt(v + eps);
    inv_std[r] = is;
    for (int i = 0; i < d; ++i) {
      const double xh = (px[i] - m) * is;
      xhat.data[r * d + i] = xh;
      out.data[r * d + i] = xh * gamma.value().data[i] + beta.value().data[i];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Tensor* gx = grad_if(self, 0);
                       Tensor* gg = grad_if(self, 1);
                       Tensor* gbeta = grad_if(self, 2);
                       const auto& gam = self.parents[1]->value.data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gy = self.grad.data.data() + r * d;
                         const double* xh = xhat.data.data() + r * d;
                         if (gg || gbeta) {
                           for (int i = 0; i < d; ++i) {
                             if (gg) gg->data[i] += gy[i] * xh[i];
                             if (gbeta) gbeta->data[i] += gy[i];
                           }
                         }
                         if (!gx) continue;
                         double mean_g = 0.0, mean_gx = 0.0;
                         for (int i = 0; i < d; ++i) {
                           const double gi = gy[i] * gam[i];
                           mean_g += gi;
                           mean_gx += gi * xh[i];
                         }
                         mean_g /= d;
                         mean_gx /= d;
                         for (int i = 0; i < d; ++i) {
                           gx->data[r * d + i] += inv_std[r] * (gy[i] * gam[i] - mean_g - xh[i] * mean_gx);
                         }
                       }
                     });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) throw std::invalid_argument("bmm: expected [G,n,k] operands");
  const int groups = as[0], n = as[1], k = as[2];
  const int m = transpose_b ? bs[1] : bs[2];
  if ((transpose_b ? bs[2] : bs[1]) != k) throw std::invalid_argument("bmm: inner dimension mismatch");
  Tensor out(Shape{groups, n, m});
  const std::size_t sa = static_cast<std::size_t>(n) * k, sb = static_cast<std::size_t>(k) * m,
                    so = static_cast<std::size_t>(n) * m;
  for (int g = 0; g < groups; ++g) {
    ConstMapMat am(a.value().data.data() + g * sa, n, k);
    MapMat om(out.data.data() + g * so, n, m);
    if (transpose_b) {
      om.noalias() = am * ConstMapMat(b.value().data.data() + g * sb, m, k).transpose();
    } else {
      om.noalias() = am * ConstMapMat(b.value().data.data() + g * sb, k, m);
    }
  }
  return make_result(std::move(out), {a, b}, [groups, n, k, m, sa, sb, so, transpose_b](Node& self) {
    Tensor* ga = grad_if(self, 0);
    Tensor* gb = grad_if(self, 1);
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    for (int g = 0; g < groups; ++g) {
      ConstMapMat gy(self.grad.data.data() + g * so, n, m);
      if (transpose_b) {
        ConstMapMat bm(bv.data() + g * sb, m, k);
        if (ga) MapMat(ga->data.data() + g * sa, n, k).noalias() += gy * bm;
        if (gb) MapMat(gb->data.data() + g * sb, m, k).noalias() += gy.transpose() * ConstMapMat(av.data() + g * sa, n, k);
      } else {
        ConstMapMat bm(bv.data() + g * sb, k, m);
        if (ga) MapMat(ga->data.data() + g * sa, n, k).noalias() += gy * bm.transpose();
        if (gb) MapMat(gb->data.data() + g * sb, k, m).noalias() += ConstMapMat(av.data() + g * sa, n, k).transpose() * gy;
      }
    }
  });
}

Var normalize_rows(const Var& a, double eps) {
  const int d = a.shape().back();
  const std::size_t rows = a.numel() / static_cast<std::size_t>(d);
  Tensor out(a.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = a.value().data.data() + r * d;
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += p[i] * p[i];
    const double nrm = std::max(std::sqrt(s), eps);
    norms[r] = nrm;
    for (int i = 0; i < d; ++i) out.data[r * d + i] = p[i] / nrm;
  }
  return make_result(std::move(out), {a}, [rows, d, eps, norms = std::move(norms)](Node& self) {
    Tensor* ga = grad_if(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = self.grad.data.data() + r * d;
      const double* y = self.value.data.data() + r * d;
      double* gx = ga->data.data() + r * d;
      if (norms[r] <= eps) {
        for (int i = 0; i < d; ++i) gx[i] += gy[i] / eps;
        continue;
      }
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += y[i] * gy[i];
      for (int i = 0; i < d; ++i) gx[i] += (gy[i] - y[i] * dot) / norms[r];
    }
  });
}

Var softmax_rows(const Var& a) {
  const int d = a.shape().back();
  const std::size_t rows = a.numel() / static_cast<std::size_t>(d);
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = a.value().data.data() + r * d;
    double* o = out.data.data() + r * d;
    const double mx = *std::max_element(p, p + d);
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
      o[i] = std::exp(p[i] - mx);
      s += o[i];
    }
    for (int i = 0; i < d; ++i) o[i] /= s;
  }
  return make_result(std::move(out), {a}, [rows, d](Node& self) {
    Tensor* ga = grad_if(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = self.grad.data.data() + r * d;
      const double* y = self.value.data.data() + r * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += gy[i] * y[i];
      for (int i = 0; i < d; ++i) ga->data[r * d + i] += y[i] * (gy[i] - dot);
    }
  });
}

Var divide_groups(const Var& a, const Var& s) {
  const int groups = a.shape().at(0);
  const int period = static_cast<int>(s.numel());
  if (period <= 0 || groups % period != 0) throw std::invalid_argument("divide_groups: group count not a multiple of period");
  const std::size_t inner = a.numel() / static_cast<std::size_t>(groups);
  Tensor out(a.shape());
  for (int g = 0; g < groups; ++g) {
    const double sv = s.value().data[static_cast<std::size_t>(g % period)];
    for (std::size_t i = 0; i < inner; ++i) out.data[g * inner + i] = a.value().data[g * inner + i] / sv;
  }
  return make_result(std::move(out), {a, s}, [groups, period, inner](Node& self) {
    Tensor* ga = grad_if(self, 0);
    Tensor* gs = grad_if(self, 1);
    const auto& sv = self.parents[1]->value.data;
    for (int g = 0; g < groups; ++g) {
      const double sg = sv[static_cast<std::size_t>(g % period)];
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        const double gy = self.grad.data[g * inner + i];
        if (ga) ga->data[g * inner + i] += gy / sg;
        acc += gy * self.value.data[g * inner + i];
      }
      if (gs) gs->data[static_cast<std::size_t>(g % period)] -= acc / sg;
    }
  });
}

Var add_groups(const Var& a, const Var& b) {
  const int groups = a.shape().at(0);
  const int period = b.shape().at(0);
  if (period <= 0 || groups % period != 0) throw std::invalid_argument("add_groups: group count not a multiple of period");
  const std::size_t inner = a.numel() / static_cast<std::size_t>(groups);
  if (b.numel() != inner * static_cast<std::size_t>(period)) throw std::invalid_argument("add_groups: inner size mismatch");
  Tensor out(a.shape());
  for (int g = 0; g < groups; ++g) {
    const double* pb = b.value().data.data() + static_cast<std::size_t>(g % period) * inner;
    for (std::size_t i = 0; i < inner; ++i) out.data[g * inner + i] = a.value().data[g * inner + i] + pb[i];
  }
  return make_result(std::move(out), {a, b}, [groups, period, inner](Node& self) {
    Tensor* ga = grad_if(self, 0);
    Tensor* gb = grad_if(self, 1);
    for (int g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < inner; ++i) {
        const double gy = self.grad.data[g * inner + i];
        if (ga) ga->data[g * inner + i] += gy;
        if (gb) gb->data[static_cast<std::size_t>(g % period) * inner + i] += gy;
      }
    }
  });
}

}  // namespace feds::ops
