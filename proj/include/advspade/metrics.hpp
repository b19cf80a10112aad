#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advspade/checkpoint.hpp"
#include "advspade/dataio.hpp"
#include "advspade/nn.hpp"

namespace advspade {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Row = ground truth class, column = predicted class.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<std::int64_t> counts;

    explicit ConfusionMatrix(int c = 0) : num_classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}

    std::int64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
    [[nodiscard]] std::int64_t at(int gt, int pred) const {
        return counts[static_cast<std::size_t>(gt) * num_classes + pred];
    }
    [[nodiscard]] std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : counts) t += v;
        return t;
    }
    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes) throw MetricError("confusion matrix class count mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }
};

inline ConfusionMatrix confusion_matrix(const LabelMap& pred, const LabelMap& gt, int num_classes) {
    if (pred.height != gt.height || pred.width != gt.width) throw MetricError("confusion_matrix: dimension mismatch");
    ConfusionMatrix m(num_classes);
    for (std::size_t p = 0; p < gt.size(); ++p) {
        const int g = gt.classes[p];
        const int q = pred.classes[p];
        if (g >= num_classes || q >= num_classes) throw MetricError("confusion_matrix: class id out of range");
        ++m.at(g, q);
    }
    return m;
}

struct IouResult {
    double miou = 0;
    std::vector<double> per_class;  // NaN where the union is empty
};

/// Mean IoU over classes whose union is non-empty.
inline IouResult iou(const ConfusionMatrix& m) {
    if (m.total() == 0) throw MetricError("miou: empty confusion matrix");
    IouResult r;
    r.per_class.assign(m.num_classes, std::nan(""));
    double acc = 0;
    int present = 0;
    for (int c = 0; c < m.num_classes; ++c) {
        std::int64_t tp = m.at(c, c);
        std::int64_t fp = 0;
        std::int64_t fn = 0;
        for (int k = 0; k < m.num_classes; ++k) {
            if (k == c) continue;
            fp += m.at(k, c);
            fn += m.at(c, k);
        }
        const std::int64_t uni = tp + fp + fn;
        if (uni == 0) continue;
        r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
        acc += r.per_class[c];
        ++present;
    }
    r.miou = acc / present;
    return r;
}

inline double miou(const ConfusionMatrix& m) { return iou(m).miou; }

/// Fraction of pixels where prediction and oracle disagree.
inline double misclassification_rate(const LabelMap& pred, const LabelMap& oracle) {
    if (pred.height != oracle.height || pred.width != oracle.width) {
        throw MetricError("misclassification_rate: dimension mismatch");
    }
    std::size_t wrong = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) wrong += pred.classes[p] != oracle.classes[p];
    return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

struct EvalConfig {
    double theta = 0.95;
    int num_classes = 5;
    int fid_feature_dim = 64;

    void validate() const {
        if (!(theta >= 0.0 && theta <= 1.0)) throw MetricError("theta must lie in [0,1]");
    }
};

/// Image pair and bound for the norm-restricted success predicate.
struct RestrictedCheck {
    const ImageTensor* original = nullptr;
    const ImageTensor* candidate = nullptr;
    double epsilon = 0;  // 0-255 scale
};

inline double linf_distance(const ImageTensor& a, const ImageTensor& b) {
    a.data.require_same(b.data);
    double m = 0;
    for (std::size_t i = 0; i < a.data.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

/// Unrestricted: misclassification rate > theta. Restricted additionally
/// requires ||candidate - original||_inf < 2*epsilon/255.
inline bool is_adversarial_success(const LabelMap& pred, const LabelMap& oracle, const EvalConfig& cfg,
                                   std::optional<RestrictedCheck> restricted = std::nullopt) {
    cfg.validate();
    if (restricted) {
        if (restricted->original == nullptr || restricted->candidate == nullptr) {
            throw MetricError("restricted success check needs both original and candidate images");
        }
    }
    const bool fooled = misclassification_rate(pred, oracle) > cfg.theta;
    if (!restricted) return fooled;
    const double bound = 2.0 * restricted->epsilon / 255.0;
    return fooled && linf_distance(*restricted->original, *restricted->candidate) < bound;
}

/// Mean and covariance of embedded features.
struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    std::size_t count = 0;
};

inline FeatureStats feature_stats(const Eigen::MatrixXd& features) {  // rows = samples
    if (features.rows() < 2) throw MetricError("feature statistics need at least 2 samples");
    FeatureStats s;
    s.count = static_cast<std::size_t>(features.rows());
    s.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.covariance = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
    return s;
}

namespace detail {

// Symmetric PSD square root; eigenvalues below -tol are a hard error.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a, double tol, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -tol) throw MetricError(std::string(what) + " is not positive semi-definite");
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Frechet distance between two Gaussian fits. Tr((A B)^{1/2}) is evaluated
/// as Tr((A^{1/2} B A^{1/2})^{1/2}), which is symmetric and has the same
/// spectrum.
inline double fid(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size()) throw MetricError("fid: feature dimension mismatch");
    constexpr double kTol = 1e-6;
    const Eigen::MatrixXd ra = detail::psd_sqrt(a.covariance, kTol, "covariance a");
    detail::psd_sqrt(b.covariance, kTol, "covariance b");
    const Eigen::MatrixXd m = ra * b.covariance * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    double tr_sqrt = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double ev = es.eigenvalues()[i];
        if (ev < -kTol) throw MetricError("fid: cross term is not positive semi-definite");
        tr_sqrt += std::sqrt(std::max(ev, 0.0));
    }
    const double mean_term = (a.mean - b.mean).squaredNorm();
    return mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
}

/// Frozen random-weight conv pyramid with global average pooling, used as
/// the embedding for FID.
template <typename T>
class FidEmbedder : public Module<T> {
public:
    static constexpr const char* kArch = "fid_pyramid_v1";

    explicit FidEmbedder(int feature_dim = 64, std::uint64_t seed = 0) : feature_dim_(feature_dim) {
        Rng rng(seed);
        c1_ = Conv2d<T>(*this, "c1", {3, 16, 3, {2, 1, 1}, true, false}, rng);
        c2_ = Conv2d<T>(*this, "c2", {16, 32, 3, {2, 1, 1}, true, false}, rng);
        c3_ = Conv2d<T>(*this, "c3", {32, feature_dim, 3, {2, 1, 1}, true, false}, rng);
        this->set_frozen(true);
        this->set_training(false);
    }

    [[nodiscard]] int feature_dim() const { return feature_dim_; }

    /// (N, 3, H, W) -> (N, feature_dim) row-major features.
    [[nodiscard]] Eigen::MatrixXd embed(const Tensor<T>& images) const {
        NoGradGuard ng;
        Var<T> x(images);
        x = leaky_relu(c1_.forward(x, false), T(0.2));
        x = leaky_relu(c2_.forward(x, false), T(0.2));
        x = c3_.forward(x, false);
        auto pooled = sum_spatial(x);
        const Shape s = x.shape();
        Eigen::MatrixXd out(s.n, s.c);
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
                out(n, c) = static_cast<double>(pooled.value()[static_cast<std::size_t>(n) * s.c + c]) /
                            static_cast<double>(s.plane());
        return out;
    }

private:
    int feature_dim_;
    Conv2d<T> c1_, c2_, c3_;
};

inline FeatureStats embed_for_fid(std::span<const ImageTensor> images, const FidEmbedder<float>& embedder) {
    if (images.size() < 2) throw MetricError("embed_for_fid needs at least 2 images");
    Eigen::MatrixXd feats(static_cast<Eigen::Index>(images.size()), embedder.feature_dim());
    constexpr std::size_t kChunk = 32;
    for (std::size_t first = 0; first < images.size(); first += kChunk) {
        std::vector<Tensor<float>> parts;
        for (std::size_t i = first; i < std::min(images.size(), first + kChunk); ++i) parts.push_back(images[i].data);
        const auto block = embedder.embed(stack_batch<float>(parts));
        feats.middleRows(static_cast<Eigen::Index>(first), block.rows()) = block;
    }
    return feature_stats(feats);
}

/// Metric outputs for one evaluated image set.
struct EvalReport {
    double miou = 0;
    std::vector<double> per_class_iou;
    double attack_success_rate = 0;
    std::optional<double> fid;
    std::vector<double> per_image_misclassification;
    std::size_t images = 0;
};

inline json to_json_value(const EvalReport& r) {
    json j;
    j["miou"] = r.miou;
    json pc = json::array();
    for (double v : r.per_class_iou) pc.push_back(std::isnan(v) ? json(nullptr) : json(v));
    j["per_class_iou"] = pc;
    j["attack_success_rate"] = r.attack_success_rate;
    j["fid"] = r.fid ? json(*r.fid) : json(nullptr);
    j["per_image_misclassification"] = r.per_image_misclassification;
    j["images"] = r.images;
    return j;
}

/// Success rate = mean of per-image unrestricted decisions, mIoU from the
/// pooled confusion matrix.
inline EvalReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const LabelMap> oracles,
                                       const EvalConfig& cfg) {
    if (preds.size() != oracles.size() || preds.empty()) throw MetricError("evaluate: prediction/oracle count mismatch");
    ConfusionMatrix total(cfg.num_classes);
    EvalReport r;
    std::size_t successes = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        total += confusion_matrix(preds[i], oracles[i], cfg.num_classes);
        r.per_image_misclassification.push_back(misclassification_rate(preds[i], oracles[i]));
        successes += is_adversarial_success(preds[i], oracles[i], cfg) ? 1 : 0;
    }
    const auto res = iou(total);
    r.miou = res.miou;
    r.per_class_iou = res.per_class;
    r.attack_success_rate = static_cast<double>(successes) / static_cast<double>(preds.size());
    r.images = preds.size();
    return r;
}

}  // namespace advspade
