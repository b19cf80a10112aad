#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "advspade/autograd.hpp"

namespace advspade {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    Shape out;
    for (int axis = 0; axis < 4; ++axis) {
        const int da = a.dim(axis);
        const int db = b.dim(axis);
        int d = 0;
        if (da == db) {
            d = da;
        } else if (da == 1) {
            d = db;
        } else if (db == 1) {
            d = da;
        } else {
            throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
        }
        switch (axis) {
            case 0: out.n = d; break;
            case 1: out.c = d; break;
            case 2: out.h = d; break;
            default: out.w = d; break;
        }
    }
    return out;
}

// Element strides of `s` when read under broadcast shape `out` (0 on broadcast axes).
inline std::array<std::size_t, 4> broadcast_strides(const Shape& s, const Shape& out) {
    const std::array<std::size_t, 4> dense = {static_cast<std::size_t>(s.c) * s.h * s.w,
                                              static_cast<std::size_t>(s.h) * s.w,
                                              static_cast<std::size_t>(s.w), 1};
    std::array<std::size_t, 4> st{};
    for (int axis = 0; axis < 4; ++axis) {
        st[axis] = (s.dim(axis) == 1 && out.dim(axis) != 1) ? 0 : dense[axis];
    }
    return st;
}

// Calls f(out_index, a_index, b_index) over the broadcast shape.
template <typename F>
void for_each_broadcast(const Shape& a, const Shape& b, const Shape& out, F&& f) {
    if (a == out && b == out) {
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    std::size_t o = 0;
    for (int n = 0; n < out.n; ++n) {
        for (int c = 0; c < out.c; ++c) {
            for (int h = 0; h < out.h; ++h) {
                std::size_t ia = n * sa[0] + c * sa[1] + h * sa[2];
                std::size_t ib = n * sb[0] + c * sb[1] + h * sb[2];
                for (int w = 0; w < out.w; ++w, ++o, ia += sa[3], ib += sb[3]) f(o, ia, ib);
            }
        }
    }
}

template <typename T, typename Fwd, typename GradA, typename GradB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, Fwd fwd, GradA ga, GradB gb) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const Shape out_shape = broadcast_shape(as, bs, name);
    Tensor<T> out(out_shape);
    {
        const T* pa = a.value().data();
        const T* pb = b.value().data();
        T* po = out.data();
        for_each_broadcast(as, bs, out_shape,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = fwd(pa[ia], pb[ib]); });
    }
    return make_result<T>(std::move(out), {a, b}, name, [ga, gb](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const T* pa = na.value.data();
        const T* pb = nb.value.data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        T* da = self.tracks(0) ? na.grad_buffer().data() : nullptr;
        T* db = self.tracks(1) ? nb.grad_buffer().data() : nullptr;
        for_each_broadcast(na.value.shape(), nb.value.shape(), self.value.shape(),
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                               if (da) da[ia] += g[o] * ga(pa[ia], pb[ib], y[o]);
                               if (db) db[ib] += g[o] * gb(pa[ia], pb[ib], y[o]);
                           });
    });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, const char* name, Fwd fwd, Deriv deriv) {
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    T* po = out.data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    return make_result<T>(std::move(out), {x}, name, [deriv](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const T* xv = nx.value.data();
        const T* y = self.value.data();
        const T* g = self.grad.data();
        T* dx = nx.grad_buffer().data();
        const std::size_t n = self.value.numel();
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * deriv(xv[i], y[i]);
    });
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> t) {
    return Var<T>(std::move(t), false);
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return detail::binary<T>(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    return detail::binary<T>(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    return detail::binary<T>(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
    return detail::binary<T>(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Var<T> operator*(const Var<T>& a, std::type_identity_t<T> s) {
    return detail::unary<T>(a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> operator*(std::type_identity_t<T> s, const Var<T>& a) {
    return a * s;
}

template <typename T>
Var<T> operator+(const Var<T>& a, std::type_identity_t<T> s) {
    return detail::unary<T>(a, "shift", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> operator-(const Var<T>& a) {
    return a * T(-1);
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, std::type_identity_t<T> slope) {
    return detail::unary<T>(
        x, "leaky_relu", [slope](T v) { return v > 0 ? v : v * slope; },
        [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return detail::unary<T>(
        x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    return detail::unary<T>(
        x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return detail::unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
    return detail::unary<T>(
        x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
    return detail::unary<T>(x, "square", [](T v) { return v * v; }, [](T v, T) { return 2 * v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
    return detail::unary<T>(
        x, "abs", [](T v) { return std::abs(v); },
        [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

/// Clamp with zero gradient outside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& x, std::type_identity_t<T> lo, std::type_identity_t<T> hi) {
    return detail::unary<T>(
        x, "clamp", [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
    return make_result<T>(x.value().reshaped(s), {x}, "reshape", [](Node<T>& self) {
        auto& nx = *self.inputs[0];
        Tensor<T>& dx = nx.grad_buffer();
        const T* g = self.grad.data();
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g[i];
    });
}

/// Sum over everything to a (1,1,1,1) scalar.
template <typename T>
Var<T> sum(const Var<T>& x) {
    return make_result<T>(Tensor<T>::scalar(x.value().sum()), {x}, "sum", [](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const T g = self.grad[0];
        for (auto& d : nx.grad_buffer().values()) d += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return sum(x) * (T(1) / static_cast<T>(x.value().numel()));
}

/// (N,C,H,W) -> (N,C,1,1)
template <typename T>
Var<T> sum_spatial(const Var<T>& x) {
    const Shape s = x.shape();
    Tensor<T> out(Shape{s.n, s.c, 1, 1});
    const std::size_t plane = s.plane();
    const T* px = x.value().data();
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += px[nc * plane + i];
        out[nc] = acc;
    }
    return make_result<T>(std::move(out), {x}, "sum_spatial", [plane](Node<T>& self) {
        auto& nx = *self.inputs[0];
        T* dx = nx.grad_buffer().data();
        for (std::size_t nc = 0; nc < self.value.numel(); ++nc) {
            const T g = self.grad[nc];
            for (std::size_t i = 0; i < plane; ++i) dx[nc * plane + i] += g;
        }
    });
}

/// (N,C,H,W) -> (N,1,H,W)
template <typename T>
Var<T> sum_channels(const Var<T>& x) {
    const Shape s = x.shape();
    Tensor<T> out(Shape{s.n, 1, s.h, s.w});
    const std::size_t plane = s.plane();
    const T* px = x.value().data();
    for (int n = 0; n < s.n; ++n) {
        T* po = out.data() + n * plane;
        for (int c = 0; c < s.c; ++c) {
            const T* src = px + (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) po[i] += src[i];
        }
    }
    return make_result<T>(std::move(out), {x}, "sum_channels", [](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const Shape s = nx.value.shape();
        const std::size_t plane = s.plane();
        T* dx = nx.grad_buffer().data();
        for (int n = 0; n < s.n; ++n) {
            const T* g = self.grad.data() + n * plane;
            for (int c = 0; c < s.c; ++c) {
                T* d = dx + (static_cast<std::size_t>(n) * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) d[i] += g[i];
            }
        }
    });
}

/// Softmax over the channel axis at each pixel.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    const Shape s = x.shape();
    const std::size_t plane = s.plane();
    Tensor<T> out(s);
    const T* px = x.value().data();
    T* po = out.data();
    for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            T m = px[base + p];
            for (int c = 1; c < s.c; ++c) m = std::max(m, px[base + c * plane + p]);
            T z = 0;
            for (int c = 0; c < s.c; ++c) {
                const T e = std::exp(px[base + c * plane + p] - m);
                po[base + c * plane + p] = e;
                z += e;
            }
            for (int c = 0; c < s.c; ++c) po[base + c * plane + p] /= z;
        }
    }
    return make_result<T>(std::move(out), {x}, "softmax", [](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const Shape s = self.value.shape();
        const std::size_t plane = s.plane();
        const T* y = self.value.data();
        const T* g = self.grad.data();
        T* dx = nx.grad_buffer().data();
        for (int n = 0; n < s.n; ++n) {
            const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                T dot = 0;
                for (int c = 0; c < s.c; ++c) dot += g[base + c * plane + p] * y[base + c * plane + p];
                for (int c = 0; c < s.c; ++c) {
                    const std::size_t i = base + c * plane + p;
                    dx[i] += y[i] * (g[i] - dot);
                }
            }
        }
    });
}

/// Mean per-pixel cross-entropy between channel logits and integer labels
/// (labels laid out N*H*W).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const Shape s = logits.shape();
    const std::size_t plane = s.plane();
    if (labels.size() != static_cast<std::size_t>(s.n) * plane) {
        throw ShapeError("cross_entropy: label count does not match logits " + s.str());
    }
    Tensor<T> probs(s);
    const T* px = logits.value().data();
    T loss = 0;
    for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            T m = px[base + p];
            for (int c = 1; c < s.c; ++c) m = std::max(m, px[base + c * plane + p]);
            T z = 0;
            for (int c = 0; c < s.c; ++c) {
                const T e = std::exp(px[base + c * plane + p] - m);
                probs[base + c * plane + p] = e;
                z += e;
            }
            for (int c = 0; c < s.c; ++c) probs[base + c * plane + p] /= z;
            const int label = labels[n * plane + p];
            if (label < 0 || label >= s.c) throw std::out_of_range("cross_entropy: label out of range");
            loss -= (px[base + label * plane + p] - m) - std::log(z);
        }
    }
    const T count = static_cast<T>(static_cast<std::size_t>(s.n) * plane);
    std::vector<int> kept(labels.begin(), labels.end());
    return make_result<T>(Tensor<T>::scalar(loss / count), {logits}, "cross_entropy",
                          [probs = std::move(probs), kept = std::move(kept), count](Node<T>& self) {
                              auto& nx = *self.inputs[0];
                              const Shape s = nx.value.shape();
                              const std::size_t plane = s.plane();
                              const T g = self.grad[0] / count;
                              T* dx = nx.grad_buffer().data();
                              for (std::size_t i = 0; i < probs.numel(); ++i) dx[i] += g * probs[i];
                              for (int n = 0; n < s.n; ++n) {
                                  for (std::size_t p = 0; p < plane; ++p) {
                                      const int label = kept[n * plane + p];
                                      dx[(static_cast<std::size_t>(n) * s.c + label) * plane + p] -= g;
                                  }
                              }
                          });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
    const Shape s = x.shape();
    const Shape os{s.n, s.c, s.h * factor, s.w * factor};
    Tensor<T> out(os);
    const T* px = x.value().data();
    T* po = out.data();
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
        for (int oh = 0; oh < os.h; ++oh) {
            const T* row = px + nc * s.plane() + (oh / factor) * s.w;
            T* orow = po + nc * os.plane() + static_cast<std::size_t>(oh) * os.w;
            for (int ow = 0; ow < os.w; ++ow) orow[ow] = row[ow / factor];
        }
    }
    return make_result<T>(std::move(out), {x}, "upsample", [factor](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const Shape s = nx.value.shape();
        const Shape os = self.value.shape();
        T* dx = nx.grad_buffer().data();
        const T* g = self.grad.data();
        for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
            for (int oh = 0; oh < os.h; ++oh) {
                T* row = dx + nc * s.plane() + (oh / factor) * s.w;
                const T* grow = g + nc * os.plane() + static_cast<std::size_t>(oh) * os.w;
                for (int ow = 0; ow < os.w; ++ow) row[ow / factor] += grow[ow];
            }
        }
    });
}

/// 2x2 average pooling with stride 2 (H and W must be even).
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avg_pool2 needs even spatial size, got " + s.str());
    const Shape os{s.n, s.c, s.h / 2, s.w / 2};
    Tensor<T> out(os);
    const T* px = x.value().data();
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
        for (int oh = 0; oh < os.h; ++oh) {
            for (int ow = 0; ow < os.w; ++ow) {
                const T* p = px + nc * s.plane() + static_cast<std::size_t>(2 * oh) * s.w + 2 * ow;
                out[nc * os.plane() + oh * os.w + ow] = (p[0] + p[1] + p[s.w] + p[s.w + 1]) * T(0.25);
            }
        }
    }
    return make_result<T>(std::move(out), {x}, "avg_pool2", [](Node<T>& self) {
        auto& nx = *self.inputs[0];
        const Shape s = nx.value.shape();
        const Shape os = self.value.shape();
        T* dx = nx.grad_buffer().data();
        for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
            for (int oh = 0; oh < os.h; ++oh) {
                for (int ow = 0; ow < os.w; ++ow) {
                    const T g = self.grad[nc * os.plane() + oh * os.w + ow] * T(0.25);
                    T* p = dx + nc * s.plane() + static_cast<std::size_t>(2 * oh) * s.w + 2 * ow;
                    p[0] += g;
                    p[1] += g;
                    p[s.w] += g;
                    p[s.w + 1] += g;
                }
            }
        }
    });
}

/// Concatenate along channels; batch and spatial sizes must agree.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw ShapeError("concat_channels mismatch " + sa.str() + " vs " + sb.str());
    }
    const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
    Tensor<T> out(os);
    const std::size_t ca = static_cast<std::size_t>(sa.c) * sa.plane();
    const std::size_t cb = static_cast<std::size_t>(sb.c) * sb.plane();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.value().data() + n * ca, ca, out.data() + n * (ca + cb));
        std::copy_n(b.value().data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
    }
    return make_result<T>(std::move(out), {a, b}, "concat", [ca, cb](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const int batch = self.value.shape().n;
        const T* g = self.grad.data();
        if (self.tracks(0)) {
            T* d = na.grad_buffer().data();
            for (int n = 0; n < batch; ++n)
                for (std::size_t i = 0; i < ca; ++i) d[n * ca + i] += g[n * (ca + cb) + i];
        }
        if (self.tracks(1)) {
            T* d = nb.grad_buffer().data();
            for (int n = 0; n < batch; ++n)
                for (std::size_t i = 0; i < cb; ++i) d[n * cb + i] += g[n * (ca + cb) + ca + i];
        }
    });
}

}  // namespace advspade
