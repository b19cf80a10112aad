#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advspade/segnet.hpp"

namespace advspade {

/// Smallest iteration count used for a norm bound given on the 0-255 scale:
/// min(floor(eps + 4), ceil(1.25 eps)), never below 1.
inline int auto_iterations(double epsilon) {
    if (!(epsilon > 0)) throw std::invalid_argument("auto_iterations: epsilon must be > 0");
    const double a = std::floor(epsilon + 4.0);
    const double b = std::ceil(1.25 * epsilon);
    return std::max(1, static_cast<int>(std::min(a, b)));
}

/// Converts a 0-255 magnitude to the [-1, 1] image scale.
inline double to_unit_scale(double v255) { return 2.0 * v255 / 255.0; }

struct AttackConfig {
    double epsilon = 8.0;             // 0-255 scale
    std::optional<int> iterations;    // empty = auto
    std::optional<double> step_size;  // 0-255 scale; empty = 1, or epsilon when epsilon < 1
    std::string norm = "linf";

    void validate() const {
        if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack: epsilon must be >= 0");
        if (norm != "linf") throw std::invalid_argument("attack: only the linf norm is supported, got " + norm);
        if (iterations && *iterations < 0) throw std::invalid_argument("attack: iterations must be >= 0");
        if (step_size && !(*step_size > 0)) throw std::invalid_argument("attack: step size must be > 0");
    }

    [[nodiscard]] int resolved_iterations() const {
        if (iterations) return *iterations;
        return epsilon > 0 ? auto_iterations(epsilon) : 0;
    }

    [[nodiscard]] double resolved_step() const {
        if (step_size) return *step_size;
        return epsilon < 1.0 ? epsilon : 1.0;
    }
};

inline void to_json(json& j, const AttackConfig& c) {
    j = {{"epsilon", c.epsilon},
         {"iterations", c.iterations ? json(*c.iterations) : json("auto")},
         {"step_size", c.resolved_step()},
         {"norm", c.norm}};
}

struct AttackOutput {
    Tensor<float> images;             // (N, 3, H, W)
    std::vector<bool> zero_gradient;  // per image: every step saw an all-zero gradient
};

namespace detail {

/// d mean-CE / d x for a batch; segmenter parameters receive nothing.
inline Tensor<float> input_gradient(const Segmenter<float>& seg, const Tensor<float>& x, std::span<const int> labels) {
    FreezeGuard<float> freeze(seg);
    Var<float> in(x, true);
    cross_entropy(seg.logits(in), labels).backward();
    return in.grad();
}

}  // namespace detail

/// Projected signed-gradient ascent on per-pixel cross-entropy, starting at
/// the clean image. Every iterate stays inside the linf ball of radius
/// 2 eps / 255 and inside [-1, 1].
inline AttackOutput pgd(const Segmenter<float>& seg, const Tensor<float>& images, std::span<const int> labels,
                        const AttackConfig& cfg) {
    cfg.validate();
    const Shape s = images.shape();
    if (labels.size() != static_cast<std::size_t>(s.n) * s.plane()) throw ShapeError("attack: label count mismatch");
    AttackOutput out{images, std::vector<bool>(static_cast<std::size_t>(s.n), true)};
    const int iters = cfg.resolved_iterations();
    if (cfg.epsilon == 0 || iters == 0) {
        std::fill(out.zero_gradient.begin(), out.zero_gradient.end(), false);
        return out;
    }
    const auto radius = static_cast<float>(to_unit_scale(cfg.epsilon));
    const auto step = static_cast<float>(to_unit_scale(cfg.resolved_step()));
    const std::size_t per_image = static_cast<std::size_t>(s.c) * s.plane();
    Tensor<float>& x = out.images;
    for (int it = 0; it < iters; ++it) {
        const auto g = detail::input_gradient(seg, x, labels);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const float gi = g[i];
            if (gi == 0.0f) continue;
            out.zero_gradient[i / per_image] = false;
            const float x0 = images[i];
            float v = x[i] + (gi > 0 ? step : -step);
            v = std::clamp(v, x0 - radius, x0 + radius);
            x[i] = std::clamp(v, -1.0f, 1.0f);
        }
    }
    return out;
}

/// Single signed-gradient step of size 2 eps / 255.
inline AttackOutput fgsm(const Segmenter<float>& seg, const Tensor<float>& images, std::span<const int> labels,
                         const AttackConfig& cfg) {
    AttackConfig one = cfg;
    one.iterations = cfg.epsilon > 0 ? 1 : 0;
    if (cfg.epsilon > 0) one.step_size = cfg.epsilon;
    return pgd(seg, images, labels, one);
}

inline ImageTensor fgsm(const Segmenter<float>& seg, const ImageTensor& image, const LabelMap& label,
                        const AttackConfig& cfg) {
    const std::vector<int> l(label.classes.begin(), label.classes.end());
    return ImageTensor(fgsm(seg, image.data, l, cfg).images);
}

inline ImageTensor pgd(const Segmenter<float>& seg, const ImageTensor& image, const LabelMap& label,
                       const AttackConfig& cfg) {
    const std::vector<int> l(label.classes.begin(), label.classes.end());
    return ImageTensor(pgd(seg, image.data, l, cfg).images);
}

enum class AttackMethod { fgsm, pgd };

inline std::string to_string(AttackMethod m) { return m == AttackMethod::fgsm ? "fgsm" : "pgd"; }

inline AttackMethod attack_method_from_string(const std::string& s) {
    if (s == "fgsm") return AttackMethod::fgsm;
    if (s == "pgd") return AttackMethod::pgd;
    throw std::invalid_argument("unknown attack method '" + s + "'");
}

/// Attacks a list of images in chunks, preserving order.
inline std::vector<ImageTensor> attack_images(const Segmenter<float>& seg, std::span<const ImageTensor> images,
                                              std::span<const LabelMap> labels, AttackMethod method,
                                              const AttackConfig& cfg, std::size_t chunk = 25) {
    if (images.size() != labels.size()) throw std::invalid_argument("attack: image/label count mismatch");
    std::vector<ImageTensor> out;
    out.reserve(images.size());
    for (std::size_t first = 0; first < images.size(); first += chunk) {
        const std::size_t last = std::min(images.size(), first + chunk);
        std::vector<Tensor<float>> parts;
        std::vector<int> lab;
        for (std::size_t i = first; i < last; ++i) {
            parts.push_back(images[i].data);
            lab.insert(lab.end(), labels[i].classes.begin(), labels[i].classes.end());
        }
        const auto batch = stack_batch<float>(parts);
        const auto res = method == AttackMethod::fgsm ? fgsm(seg, batch, lab, cfg) : pgd(seg, batch, lab, cfg);
        for (int n = 0; n < res.images.shape().n; ++n) out.emplace_back(res.images.batch_slice(n, 1));
    }
    return out;
}

}  // namespace advspade
