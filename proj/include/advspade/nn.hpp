#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "advspade/conv.hpp"

namespace advspade {

using Rng = std::mt19937_64;

/// Container of named trainable parameters and persistent buffers.
/// Move-only: copies would alias parameter storage.
template <typename T>
class Module {
public:
    struct Entry {
        std::string name;
        Var<T> var;
        bool trainable;
    };

    Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;
    Module(Module&&) noexcept = default;
    Module& operator=(Module&&) noexcept = default;
    virtual ~Module() = default;

    [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }

    [[nodiscard]] std::vector<Var<T>> parameters() const {
        std::vector<Var<T>> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.var);
        return out;
    }

    [[nodiscard]] bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }

    /// Frozen modules still pass gradients to their inputs but never record
    /// gradients for their own parameters.
    void set_frozen(bool frozen) {
        for (auto& e : entries_)
            if (e.trainable) e.var.set_requires_grad(!frozen);
    }
    [[nodiscard]] bool frozen() const {
        for (const auto& e : entries_)
            if (e.trainable && e.var.requires_grad()) return false;
        return true;
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.zero_grad();
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.var.value().numel();
        return n;
    }

    Var<T> add_param(std::string name, Tensor<T> value) {
        Var<T> v(std::move(value), true);
        entries_.push_back({std::move(name), v, true});
        return v;
    }
    Var<T> add_buffer(std::string name, Tensor<T> value) {
        Var<T> v(std::move(value), false);
        entries_.push_back({std::move(name), v, false});
        return v;
    }

private:
    std::vector<Entry> entries_;
    bool training_ = true;
};

/// Scoped freeze of a module that may be shared as const; restores the
/// previous requires_grad flags on exit.
template <typename T>
class FreezeGuard {
public:
    explicit FreezeGuard(const Module<T>& m) {
        for (const auto& e : m.entries()) {
            if (!e.trainable) continue;
            Var<T> handle = e.var;
            saved_.emplace_back(handle, handle.requires_grad());
            handle.set_requires_grad(false);
        }
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;
    ~FreezeGuard() {
        for (auto& [v, flag] : saved_) v.set_requires_grad(flag);
    }

private:
    std::vector<std::pair<Var<T>, bool>> saved_;
};

/// Kaiming-uniform fill for leaky-ReLU fan-in scaling.
template <typename T>
Tensor<T> kaiming_uniform(Shape s, int fan_in, Rng& rng, double slope = 0.2) {
    const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(s);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
void normalize_vector(Tensor<T>& v) {
    double n = 0;
    for (T x : v.values()) n += static_cast<double>(x) * x;
    n = std::sqrt(n) + 1e-12;
    for (auto& x : v.values()) x = static_cast<T>(x / n);
}

struct ConvSpec {
    int in = 1;
    int out = 1;
    int kernel = 3;
    ConvOptions options{};
    bool bias = true;
    bool spectral = false;
};

/// Convolution layer whose storage lives in the owning Module.
template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(Module<T>& owner, const std::string& name, ConvSpec spec, Rng& rng) : spec_(spec) {
        const int fan_in = spec.in * spec.kernel * spec.kernel;
        weight_ = owner.add_param(name + ".weight",
                                  kaiming_uniform<T>(Shape{spec.out, spec.in, spec.kernel, spec.kernel}, fan_in, rng));
        if (spec.bias) bias_ = owner.add_param(name + ".bias", Tensor<T>(Shape{1, spec.out, 1, 1}));
        if (spec.spectral) {
            std::normal_distribution<double> nd;
            Tensor<T> u(Shape{spec.out, 1, 1, 1});
            for (auto& x : u.values()) x = static_cast<T>(nd(rng));
            normalize_vector(u);
            u_ = owner.add_buffer(name + ".sn_u", std::move(u));
            v_ = owner.add_buffer(name + ".sn_v", Tensor<T>(Shape{fan_in, 1, 1, 1}));
            for (int i = 0; i < 30; ++i) power_iteration();
        }
    }

    [[nodiscard]] Var<T> forward(const Var<T>& x, bool training) const {
        return conv2d(x, effective_weight(training), bias_, spec_.options);
    }

    /// Weight as used in the forward pass (spectrally normalized when enabled).
    [[nodiscard]] Var<T> effective_weight(bool training) const {
        if (!spec_.spectral) return weight_;
        if (training) power_iteration();
        return spectral_normalize(weight_, u_.value(), v_.value());
    }

    void power_iteration() const {
        using Mat = detail::RowMatrix<T>;
        using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
        const Shape ws = weight_.shape();
        const Eigen::Index rows = ws.n;
        const Eigen::Index cols = static_cast<Eigen::Index>(ws.numel() / ws.n);
        Eigen::Map<const Mat> w(weight_.value().data(), rows, cols);
        Eigen::Map<Vec> u(u_.mutable_value().data(), rows);
        Eigen::Map<Vec> v(v_.mutable_value().data(), cols);
        v = w.transpose() * u;
        v /= (v.norm() + T(1e-12));
        u = w * v;
        u /= (u.norm() + T(1e-12));
    }

    [[nodiscard]] const Var<T>& weight() const { return weight_; }
    [[nodiscard]] const Var<T>& bias() const { return bias_; }
    [[nodiscard]] const ConvSpec& spec() const { return spec_; }

private:
    ConvSpec spec_{};
    Var<T> weight_;
    Var<T> bias_;
    Var<T> u_;
    Var<T> v_;
};

/// Parameter-free per-channel standardization with running statistics.
template <typename T>
class BatchStandardizer {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    BatchStandardizer() = default;
    BatchStandardizer(Module<T>& owner, const std::string& name, int channels) {
        mean_ = owner.add_buffer(name + ".running_mean", Tensor<T>(Shape{channels, 1, 1, 1}, T(0)));
        var_ = owner.add_buffer(name + ".running_var", Tensor<T>(Shape{channels, 1, 1, 1}, T(1)));
    }

    [[nodiscard]] Var<T> forward(const Var<T>& x, bool training) const {
        const int c = x.shape().c;
        if (!training) {
            return batch_standardize<T>(x, T(kEps), false, mean_.value(), var_.value());
        }
        Tensor<T> bm(Shape{c, 1, 1, 1});
        Tensor<T> bv(Shape{c, 1, 1, 1});
        auto y = batch_standardize<T>(x, T(kEps), true, mean_.value(), var_.value(), &bm, &bv);
        const double count = static_cast<double>(x.shape().n) * x.shape().plane();
        const double unbias = count > 1 ? count / (count - 1) : 1.0;
        auto& rm = mean_.mutable_value();
        auto& rv = var_.mutable_value();
        for (int i = 0; i < c; ++i) {
            rm[i] = static_cast<T>((1 - kMomentum) * rm[i] + kMomentum * bm[i]);
            rv[i] = static_cast<T>((1 - kMomentum) * rv[i] + kMomentum * bv[i] * unbias);
        }
        return y;
    }

private:
    Var<T> mean_;
    Var<T> var_;
};

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, t_);
        const double c2 = 1.0 - std::pow(opt_.beta2, t_);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const auto& p = params_[k];
            if (p.node()->grad.empty()) continue;
            const T* g = p.node()->grad.data();
            T* w = p.mutable_value().data();
            T* m = m_[k].data();
            T* v = v_[k].data();
            for (std::size_t i = 0; i < p.value().numel(); ++i) {
                m[i] = static_cast<T>(opt_.beta1 * m[i] + (1 - opt_.beta1) * g[i]);
                v[i] = static_cast<T>(opt_.beta2 * v[i] + (1 - opt_.beta2) * g[i] * g[i]);
                const double mh = m[i] / c1;
                const double vh = v[i] / c2;
                w[i] = static_cast<T>(w[i] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(double lr) { opt_.lr = lr; }
    [[nodiscard]] const AdamOptions& options() const { return opt_; }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
    AdamOptions opt_;
    long t_ = 0;
};

}  // namespace advspade
