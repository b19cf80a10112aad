#pragma once

#include <Eigen/Core>

#include <vector>

#include "advspade/ops.hpp"

namespace advspade {

struct ConvOptions {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
    int cin, h, w, kh, kw, ho, wo;
    ConvOptions opt;

    [[nodiscard]] int rows() const { return cin * kh * kw; }
    [[nodiscard]] std::size_t out_plane() const { return static_cast<std::size_t>(ho) * wo; }
    [[nodiscard]] bool is_pointwise() const {
        return kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;
    }
};

// cols is rows() x (batch * out_plane), image-major along columns.
template <typename T>
void im2col(const T* x, int batch, const ConvGeometry& g, T* cols) {
    const std::size_t ncols = static_cast<std::size_t>(batch) * g.out_plane();
    for (int c = 0; c < g.cin; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                T* row = cols + (static_cast<std::size_t>(c * g.kh + ki) * g.kw + kj) * ncols;
                for (int n = 0; n < batch; ++n) {
                    const T* src = x + (static_cast<std::size_t>(n) * g.cin + c) * g.h * g.w;
                    T* dst = row + n * g.out_plane();
                    for (int oh = 0; oh < g.ho; ++oh) {
                        const int ih = oh * g.opt.stride - g.opt.padding + ki * g.opt.dilation;
                        T* drow = dst + static_cast<std::size_t>(oh) * g.wo;
                        if (ih < 0 || ih >= g.h) {
                            std::fill_n(drow, g.wo, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(ih) * g.w;
                        for (int ow = 0; ow < g.wo; ++ow) {
                            const int iw = ow * g.opt.stride - g.opt.padding + kj * g.opt.dilation;
                            drow[ow] = (iw >= 0 && iw < g.w) ? srow[iw] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, int batch, const ConvGeometry& g, T* dx) {
    const std::size_t ncols = static_cast<std::size_t>(batch) * g.out_plane();
    for (int c = 0; c < g.cin; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const T* row = cols + (static_cast<std::size_t>(c * g.kh + ki) * g.kw + kj) * ncols;
                for (int n = 0; n < batch; ++n) {
                    T* dst = dx + (static_cast<std::size_t>(n) * g.cin + c) * g.h * g.w;
                    const T* src = row + n * g.out_plane();
                    for (int oh = 0; oh < g.ho; ++oh) {
                        const int ih = oh * g.opt.stride - g.opt.padding + ki * g.opt.dilation;
                        if (ih < 0 || ih >= g.h) continue;
                        T* drow = dst + static_cast<std::size_t>(ih) * g.w;
                        const T* srow = src + static_cast<std::size_t>(oh) * g.wo;
                        for (int ow = 0; ow < g.wo; ++ow) {
                            const int iw = ow * g.opt.stride - g.opt.padding + kj * g.opt.dilation;
                            if (iw >= 0 && iw < g.w) drow[iw] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

// NCHW <-> (C, N*HW) layout shuffles around the single batched GEMM.
template <typename T>
void nchw_to_cm(const T* x, int batch, int channels, std::size_t plane, T* out) {
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c)
            std::copy_n(x + (static_cast<std::size_t>(n) * channels + c) * plane, plane,
                        out + static_cast<std::size_t>(c) * batch * plane + n * plane);
}

template <typename T>
void cm_to_nchw(const T* in, int batch, int channels, std::size_t plane, T* x) {
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c)
            std::copy_n(in + static_cast<std::size_t>(c) * batch * plane + n * plane, plane,
                        x + (static_cast<std::size_t>(n) * channels + c) * plane);
}

}  // namespace detail

/// 2-D cross-correlation. weight is (Cout, Cin, kh, kw); bias is (1, Cout, 1, 1)
/// or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvOptions opt = {}) {
    using detail::RowMatrix;
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    if (xs.c != ws.c) {
        throw ShapeError("conv2d: input channels " + std::to_string(xs.c) + " != weight " + ws.str());
    }
    const int eff_kh = (ws.h - 1) * opt.dilation + 1;
    const int eff_kw = (ws.w - 1) * opt.dilation + 1;
    const int ho = (xs.h + 2 * opt.padding - eff_kh) / opt.stride + 1;
    const int wo = (xs.w + 2 * opt.padding - eff_kw) / opt.stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + xs.str() + " too small for kernel");
    if (bias.defined() && bias.value().numel() != static_cast<std::size_t>(ws.n)) {
        throw ShapeError("conv2d: bias size mismatch " + bias.shape().str());
    }
    const detail::ConvGeometry geo{xs.c, xs.h, xs.w, ws.h, ws.w, ho, wo, opt};
    const int batch = xs.n;
    const int cout = ws.n;
    const Eigen::Index ncols = static_cast<Eigen::Index>(batch) * geo.out_plane();

    std::vector<T> cols(static_cast<std::size_t>(geo.rows()) * ncols);
    if (geo.is_pointwise()) {
        detail::nchw_to_cm(x.value().data(), batch, xs.c, geo.out_plane(), cols.data());
    } else {
        detail::im2col(x.value().data(), batch, geo, cols.data());
    }
    Eigen::Map<const RowMatrix<T>> wmat(weight.value().data(), cout, geo.rows());
    Eigen::Map<const RowMatrix<T>> cmat(cols.data(), geo.rows(), ncols);
    RowMatrix<T> prod(cout, ncols);
    prod.noalias() = wmat * cmat;
    if (bias.defined()) {
        for (int o = 0; o < cout; ++o) prod.row(o).array() += bias.value()[o];
    }
    Tensor<T> out(Shape{batch, cout, ho, wo});
    detail::cm_to_nchw(prod.data(), batch, cout, geo.out_plane(), out.data());

    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(
        std::move(out), std::move(inputs), "conv2d", [geo, batch, cout, ncols](Node<T>& self) {
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            RowMatrix<T> gout(cout, ncols);
            detail::nchw_to_cm(self.grad.data(), batch, cout, geo.out_plane(), gout.data());
            if (self.tracks(2)) {
                auto& db = self.inputs[2]->grad_buffer();
                for (int o = 0; o < cout; ++o) db[o] += gout.row(o).sum();
            }
            if (self.tracks(1)) {
                std::vector<T> cols(static_cast<std::size_t>(geo.rows()) * ncols);
                if (geo.is_pointwise()) {
                    detail::nchw_to_cm(nx.value.data(), batch, geo.cin, geo.out_plane(), cols.data());
                } else {
                    detail::im2col(nx.value.data(), batch, geo, cols.data());
                }
                Eigen::Map<const RowMatrix<T>> cmat(cols.data(), geo.rows(), ncols);
                Eigen::Map<RowMatrix<T>> dw(nw.grad_buffer().data(), cout, geo.rows());
                dw.noalias() += gout * cmat.transpose();
            }
            if (self.tracks(0)) {
                Eigen::Map<const RowMatrix<T>> wmat(nw.value.data(), cout, geo.rows());
                RowMatrix<T> dcols(geo.rows(), ncols);
                dcols.noalias() = wmat.transpose() * gout;
                T* dx = nx.grad_buffer().data();
                if (geo.is_pointwise()) {
                    std::vector<T> tmp(nx.value.numel());
                    detail::cm_to_nchw(dcols.data(), batch, geo.cin, geo.out_plane(), tmp.data());
                    for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
                } else {
                    detail::col2im_add(dcols.data(), batch, geo, dx);
                }
            }
        });
}

/// Per-channel standardization over (N, H, W). In training mode batch
/// statistics are used and returned through `batch_mean` / `batch_var`
/// (biased); otherwise the supplied running statistics are applied.
template <typename T>
Var<T> batch_standardize(const Var<T>& x, T eps, bool training, const Tensor<T>& running_mean,
                         const Tensor<T>& running_var, Tensor<T>* batch_mean = nullptr,
                         Tensor<T>* batch_var = nullptr) {
    const Shape s = x.shape();
    const std::size_t plane = s.plane();
    const std::size_t count = static_cast<std::size_t>(s.n) * plane;
    std::vector<T> mu(s.c), inv_std(s.c);
    const T* px = x.value().data();
    for (int c = 0; c < s.c; ++c) {
        if (training) {
            // two-pass in double for a stable variance
            double m = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = px + (static_cast<std::size_t>(n) * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<double>(count);
            double v = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = px + (static_cast<std::size_t>(n) * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= static_cast<double>(count);
            mu[c] = static_cast<T>(m);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            if (batch_mean) (*batch_mean)[c] = static_cast<T>(m);
            if (batch_var) (*batch_var)[c] = static_cast<T>(v);
        } else {
            mu[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) out[base + i] = (px[base + i] - mu[c]) * inv_std[c];
        }
    }
    return make_result<T>(std::move(out), {x}, "batch_standardize",
                          [inv_std, training, count](Node<T>& self) {
                              auto& nx = *self.inputs[0];
                              const Shape s = self.value.shape();
                              const std::size_t plane = s.plane();
                              const T* g = self.grad.data();
                              const T* y = self.value.data();
                              T* dx = nx.grad_buffer().data();
                              for (int c = 0; c < s.c; ++c) {
                                  T gm = 0;
                                  T gy = 0;
                                  if (training) {
                                      for (int n = 0; n < s.n; ++n) {
                                          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
                                          for (std::size_t i = 0; i < plane; ++i) {
                                              gm += g[base + i];
                                              gy += g[base + i] * y[base + i];
                                          }
                                      }
                                      gm /= static_cast<T>(count);
                                      gy /= static_cast<T>(count);
                                  }
                                  for (int n = 0; n < s.n; ++n) {
                                      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
                                      for (std::size_t i = 0; i < plane; ++i) {
                                          dx[base + i] += inv_std[c] * (g[base + i] - gm - y[base + i] * gy);
                                      }
                                  }
                              }
                          });
}

/// weight / sigma with sigma = u^T W v, u and v held constant. The caller
/// owns the power iteration that produces u and v.
template <typename T>
Var<T> spectral_normalize(const Var<T>& weight, const Tensor<T>& u, const Tensor<T>& v) {
    using detail::RowMatrix;
    const Shape ws = weight.shape();
    const Eigen::Index rows = ws.n;
    const Eigen::Index cols = static_cast<Eigen::Index>(ws.numel() / ws.n);
    Eigen::Map<const RowMatrix<T>> wm(weight.value().data(), rows, cols);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> uv(u.data(), rows);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vv(v.data(), cols);
    const T sigma = uv.dot(wm * vv);
    if (!(sigma > T(0)) || !std::isfinite(sigma)) {
        throw std::runtime_error("spectral_normalize: non-positive sigma estimate");
    }
    Tensor<T> out(ws);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = weight.value()[i] / sigma;
    return make_result<T>(std::move(out), {weight}, "spectral_normalize",
                          [sigma, u, v, rows, cols](Node<T>& self) {
                              auto& nw = *self.inputs[0];
                              const T* g = self.grad.data();
                              const T* wn = self.value.data();
                              T inner = 0;
                              for (std::size_t i = 0; i < self.value.numel(); ++i) inner += g[i] * wn[i];
                              T* dw = nw.grad_buffer().data();
                              for (Eigen::Index r = 0; r < rows; ++r) {
                                  for (Eigen::Index c = 0; c < cols; ++c) {
                                      const std::size_t i = r * cols + c;
                                      dw[i] += (g[i] - inner * u[r] * v[c]) / sigma;
                                  }
                              }
                          });
}

}  // namespace advspade
