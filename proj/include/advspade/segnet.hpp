#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advspade/checkpoint.hpp"
#include "advspade/dataio.hpp"
#include "advspade/metrics.hpp"
#include "advspade/nn.hpp"

namespace advspade {

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
const Var<T>& check_finite(const Var<T>& x, const std::string& where) {
    if (!x.value().all_finite()) throw NonFiniteError("non-finite activation in " + where);
    return x;
}

namespace seg_arch {
inline constexpr const char* kPlain = "seg_plain";
inline constexpr const char* kDilated = "seg_dilated";
inline constexpr const char* kEncDec = "seg_encdec";

inline std::vector<std::string> all() { return {kPlain, kDilated, kEncDec}; }
}  // namespace seg_arch

/// Small fully-convolutional segmenters. Three topologies with distinct
/// parameter shapes serve as white-box target and transfer models.
template <typename T>
class Segmenter : public Module<T> {
public:
    Segmenter(std::string arch, int num_classes, std::uint64_t seed = 0)
        : arch_(std::move(arch)), num_classes_(num_classes) {
        Rng rng(seed);
        auto conv = [&](const std::string& name, int in, int out, int k, ConvOptions o) {
            layers_.push_back({name, Conv2d<T>(*this, name, {in, out, k, o, true, false}, rng)});
        };
        if (arch_ == seg_arch::kPlain) {
            conv("conv1", 3, 16, 3, {1, 1, 1});
            conv("conv2", 16, 16, 3, {1, 1, 1});
            conv("conv3", 16, 16, 3, {1, 1, 1});
            conv("head", 16, num_classes, 1, {});
        } else if (arch_ == seg_arch::kDilated) {
            conv("conv1", 3, 16, 3, {1, 1, 1});
            conv("conv2", 16, 24, 3, {1, 2, 2});
            conv("conv3", 24, 24, 3, {1, 4, 4});
            conv("head", 24, num_classes, 1, {});
        } else if (arch_ == seg_arch::kEncDec) {
            conv("enc1", 3, 16, 3, {1, 1, 1});
            conv("enc2", 16, 32, 3, {2, 1, 1});
            conv("mid", 32, 32, 3, {1, 1, 1});
            conv("dec", 48, 16, 3, {1, 1, 1});
            conv("head", 16, num_classes, 1, {});
        } else {
            throw std::invalid_argument("unknown segmenter architecture '" + arch_ + "'");
        }
    }

    [[nodiscard]] const std::string& arch() const { return arch_; }
    [[nodiscard]] int num_classes() const { return num_classes_; }

    /// (N, 3, H, W) -> (N, C, H, W) logits.
    [[nodiscard]] Var<T> logits(const Var<T>& x) const {
        const Shape s = x.shape();
        if (s.c != 3) throw ShapeError("segmenter expects 3 input channels, got " + s.str());
        const bool tr = this->training();
        const T slope = T(0.2);
        if (arch_ == seg_arch::kEncDec) {
            if (s.h % 2 || s.w % 2) throw ShapeError("encdec segmenter needs even spatial size");
            auto skip = check_finite(leaky_relu(layer(0).forward(x, tr), slope), "enc1");
            auto h = check_finite(leaky_relu(layer(1).forward(skip, tr), slope), "enc2");
            h = check_finite(leaky_relu(layer(2).forward(h, tr), slope), "mid");
            h = concat_channels(upsample_nearest(h, 2), skip);
            h = check_finite(leaky_relu(layer(3).forward(h, tr), slope), "dec");
            return check_finite(layer(4).forward(h, tr), "head");
        }
        Var<T> h = x;
        for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
            h = check_finite(leaky_relu(layers_[i].conv.forward(h, tr), slope), layers_[i].name);
        }
        return check_finite(layers_.back().conv.forward(h, tr), layers_.back().name);
    }

private:
    struct Layer {
        std::string name;
        Conv2d<T> conv;
    };
    [[nodiscard]] const Conv2d<T>& layer(std::size_t i) const { return layers_[i].conv; }

    std::string arch_;
    int num_classes_;
    std::vector<Layer> layers_;
};

template <typename T = float>
ModelParams export_segmenter(const Segmenter<T>& s, json metrics = json::object()) {
    json meta{{"num_classes", s.num_classes()}, {"metrics", std::move(metrics)}};
    return export_module(s, Role::segmenter, s.arch(), std::move(meta));
}

template <typename T = float>
Segmenter<T> load_segmenter(const ModelParams& p) {
    if (p.role != Role::segmenter) throw CheckpointError("checkpoint role is " + to_string(p.role) + ", not segmenter");
    Segmenter<T> s(p.arch, p.meta.at("num_classes").get<int>());
    import_module(s, p);
    s.set_training(false);
    return s;
}

/// Per-pixel class probabilities (softmax over channels).
template <typename T>
Var<T> seg_forward(const Segmenter<T>& seg, const Var<T>& images) {
    return softmax_channels(seg.logits(images));
}

template <typename T>
Tensor<T> seg_forward(const Segmenter<T>& seg, const ImageTensor& image) {
    NoGradGuard ng;
    return seg_forward(seg, Var<T>(image.data.template cast<T>())).value();
}

/// Per-image soft dice loss, (N, 1, 1, 1): 1 - mean over target-present
/// classes of (2 sum p g + s) / (sum p^2 + sum g^2 + s).
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, T smooth = T(1e-6)) {
    probs.value().require_same(target);
    for (T v : probs.value().values()) {
        if (!(v >= T(0) && v <= T(1))) throw std::invalid_argument("dice_loss: probability outside [0,1]");
    }
    const Shape s = target.shape();
    Var<T> g(target);
    auto g_sum = sum_spatial(g).value();
    Tensor<T> mask(Shape{s.n, s.c, 1, 1});
    for (int n = 0; n < s.n; ++n) {
        int present = 0;
        for (int c = 0; c < s.c; ++c) present += g_sum[n * s.c + c] > T(0);
        if (present == 0) throw std::invalid_argument("dice_loss: target has no labelled pixels");
        for (int c = 0; c < s.c; ++c)
            mask[n * s.c + c] = g_sum[n * s.c + c] > T(0) ? T(1) / static_cast<T>(present) : T(0);
    }
    // one-hot targets: sum g^2 == sum g
    const Var<T> g_sq(g_sum);
    auto inter = sum_spatial(probs * g);
    auto p_sq = sum_spatial(square(probs));
    auto coeff = (inter * T(2) + smooth) / (p_sq + g_sq + smooth);
    auto mean_dice = sum_channels(coeff * Var<T>(mask));
    return mean_dice * T(-1) + T(1);
}

template <typename T>
T dice_loss_value(const Tensor<T>& probs, const Tensor<T>& target) {
    NoGradGuard ng;
    return mean(dice_loss(Var<T>(probs), target)).value()[0];
}

template <typename T>
LabelMap predict(const Segmenter<T>& seg, const ImageTensor& image) {
    return argmax_channels(seg_forward(seg, image));
}

/// Batched prediction on images (N, 3, H, W).
template <typename T>
std::vector<LabelMap> predict_batch(const Segmenter<T>& seg, std::span<const ImageTensor> images,
                                    std::size_t chunk = 32) {
    NoGradGuard ng;
    std::vector<LabelMap> out;
    out.reserve(images.size());
    for (std::size_t first = 0; first < images.size(); first += chunk) {
        std::vector<Tensor<float>> parts;
        for (std::size_t i = first; i < std::min(images.size(), first + chunk); ++i) parts.push_back(images[i].data);
        const auto probs = seg_forward(seg, Var<T>(stack_batch<float>(parts).template cast<T>())).value();
        for (int n = 0; n < probs.shape().n; ++n) out.push_back(argmax_channels(probs, n));
    }
    return out;
}

template <typename T>
double evaluate_miou(const Segmenter<T>& seg, const Dataset& ds) {
    std::vector<ImageTensor> images;
    std::vector<LabelMap> labels;
    for (const auto& s : ds.items) {
        images.push_back(s.image);
        labels.push_back(s.label);
    }
    const auto preds = predict_batch(seg, images);
    ConfusionMatrix m(ds.num_classes);
    for (std::size_t i = 0; i < preds.size(); ++i) m += confusion_matrix(preds[i], labels[i], ds.num_classes);
    return miou(m);
}

struct SegTrainConfig {
    std::string arch = seg_arch::kPlain;
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 0 || batch_size <= 0) throw std::invalid_argument("seg train: counts must be positive");
        if (!(lr > 0)) throw std::invalid_argument("seg train: learning rate must be > 0");
    }
};

inline void to_json(json& j, const SegTrainConfig& c) {
    j = {{"arch", c.arch},     {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
         {"beta1", c.beta1}, {"beta2", c.beta2}, {"seed", c.seed}};
}

inline void from_json(const json& j, SegTrainConfig& c) {
    SegTrainConfig d;
    c.arch = j.value("arch", d.arch);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.seed = j.value("seed", d.seed);
}

/// Raised when the training loss stops being finite; carries the last
/// checkpoint taken at an epoch boundary.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, ModelParams last_good)
        : std::runtime_error(what), last_good_(std::move(last_good)) {}
    [[nodiscard]] const ModelParams& last_good() const { return last_good_; }

private:
    ModelParams last_good_;
};

struct SegEpochLog {
    int epoch = 0;
    double loss = 0;
    double val_miou = 0;
};

/// Optional per-batch input rewrite (e.g. adversarial examples for robust
/// training). Receives the model in its current state.
using BatchTransform = std::function<Tensor<float>(const Segmenter<float>&, const Tensor<float>&,
                                                   const std::vector<int>&)>;

struct SegTrainResult {
    ModelParams params;
    std::vector<SegEpochLog> history;
};

/// Cross-entropy training with Adam.
inline SegTrainResult train_segnet(const Dataset& train, const Dataset& val, const SegTrainConfig& cfg,
                                   const BatchTransform& transform = {},
                                   const std::function<void(const SegEpochLog&)>& on_epoch = {}) {
    cfg.validate();
    if (train.empty() || val.empty()) throw std::invalid_argument("train_segnet: datasets must be non-empty");
    Segmenter<float> seg(cfg.arch, train.num_classes, cfg.seed);
    Adam<float> opt(seg.parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    SegTrainResult result;
    ModelParams last_good = export_segmenter(seg);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        int batches = 0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - first);
            std::span<const std::size_t> idx(order.data() + first, count);
            auto images = batch_images(train.items, idx);
            const auto labels = batch_labels(train.items, idx);
            if (transform) {
                seg.set_training(false);
                images = transform(seg, images, labels);
            }
            seg.set_training(true);
            opt.zero_grad();
            auto loss = cross_entropy(seg.logits(Var<float>(images)), labels);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                throw TrainingDiverged("segmenter loss became non-finite at epoch " + std::to_string(epoch), last_good);
            }
            loss.backward();
            opt.step();
            loss_sum += lv;
            ++batches;
        }
        seg.set_training(false);
        SegEpochLog log{epoch, loss_sum / std::max(1, batches), evaluate_miou(seg, val)};
        result.history.push_back(log);
        if (on_epoch) on_epoch(log);
        last_good = export_segmenter(seg);
    }
    seg.set_training(false);
    const double final_miou = result.history.empty() ? evaluate_miou(seg, val) : result.history.back().val_miou;
    json hist = json::array();
    for (const auto& h : result.history) hist.push_back({{"epoch", h.epoch}, {"loss", h.loss}, {"val_miou", h.val_miou}});
    json cfg_json = cfg;
    result.params = export_segmenter(seg, {{"val_miou", final_miou}, {"history", hist}, {"config", cfg_json}});
    return result;
}

}  // namespace advspade
