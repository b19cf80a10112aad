#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "advspade/checkpoint.hpp"
#include "advspade/dataio.hpp"
#include "advspade/nn.hpp"
#include "advspade/segnet.hpp"

namespace advspade {

/// Shape hyperparameters shared by generator, encoder and discriminator.
struct GanArch {
    int num_classes = 5;
    int image_size = 64;
    int z_dim = 64;
    std::vector<int> widths{64, 64, 32, 16, 16};  // seed width, then one per residual block
    int spade_hidden = 16;
    int disc_scales = 2;
    int disc_width = 32;

    [[nodiscard]] int blocks() const { return static_cast<int>(widths.size()) - 1; }
    [[nodiscard]] int seed_size() const { return image_size >> blocks(); }

    void validate() const {
        if (num_classes < 2 || z_dim < 1 || spade_hidden < 1 || disc_scales < 1 || disc_width < 1) {
            throw std::invalid_argument("gan arch: sizes must be positive");
        }
        if (widths.size() < 2) throw std::invalid_argument("gan arch: need at least one residual block");
        if (seed_size() < 1 || (seed_size() << blocks()) != image_size) {
            throw std::invalid_argument("gan arch: image size must be seed size times 2^blocks");
        }
    }
};

inline void to_json(json& j, const GanArch& a) {
    j = {{"num_classes", a.num_classes}, {"image_size", a.image_size}, {"z_dim", a.z_dim},
         {"widths", a.widths},           {"spade_hidden", a.spade_hidden}, {"disc_scales", a.disc_scales},
         {"disc_width", a.disc_width},   {"blocks", a.blocks()}};
}

inline void from_json(const json& j, GanArch& a) {
    GanArch d;
    a.num_classes = j.value("num_classes", d.num_classes);
    a.image_size = j.value("image_size", d.image_size);
    a.z_dim = j.value("z_dim", d.z_dim);
    a.widths = j.value("widths", d.widths);
    a.spade_hidden = j.value("spade_hidden", d.spade_hidden);
    a.disc_scales = j.value("disc_scales", d.disc_scales);
    a.disc_width = j.value("disc_width", d.disc_width);
}

/// Nearest-neighbour subsampling of a (N, C, H, W) one-hot batch to (h, w).
template <typename T>
Tensor<T> resize_one_hot(const Tensor<T>& oh, int h, int w) {
    const Shape s = oh.shape();
    if (s.h == h && s.w == w) return oh;
    Tensor<T> out(Shape{s.n, s.c, h, w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out.at(n, c, y, x) = oh.at(n, c, static_cast<int>(static_cast<long>(y) * s.h / h),
                                               static_cast<int>(static_cast<long>(x) * s.w / w));
    return out;
}

/// Spatially-adaptive denormalization: gamma(y) * standardize(x) + beta(y).
/// gamma and beta are 3x3 convs over a shared ReLU embedding of the one-hot
/// label. The gamma bias starts at 1 so a fresh layer is near identity.
template <typename T>
class SpadeNorm {
public:
    SpadeNorm() = default;
    SpadeNorm(Module<T>& owner, const std::string& name, int channels, int label_channels, int hidden, Rng& rng)
        : norm_(owner, name + ".bn", channels) {
        shared_ = Conv2d<T>(owner, name + ".shared", {label_channels, hidden, 3, {1, 1, 1}, true, false}, rng);
        gamma_ = Conv2d<T>(owner, name + ".gamma", {hidden, channels, 3, {1, 1, 1}, true, false}, rng);
        beta_ = Conv2d<T>(owner, name + ".beta", {hidden, channels, 3, {1, 1, 1}, true, false}, rng);
        gamma_.bias().mutable_value().fill(T(1));
    }

    [[nodiscard]] Var<T> forward(const Var<T>& x, const Var<T>& label, bool training) const {
        if (label.shape().h != x.shape().h || label.shape().w != x.shape().w || label.shape().n != x.shape().n) {
            throw ShapeError("spade_norm: label " + label.shape().str() + " does not match features " +
                             x.shape().str());
        }
        auto normalized = norm_.forward(x, training);
        auto h = relu(shared_.forward(label, training));
        return gamma_.forward(h, training) * normalized + beta_.forward(h, training);
    }

    [[nodiscard]] const Conv2d<T>& gamma() const { return gamma_; }
    [[nodiscard]] const Conv2d<T>& beta() const { return beta_; }
    [[nodiscard]] const Conv2d<T>& shared() const { return shared_; }

private:
    BatchStandardizer<T> norm_;
    Conv2d<T> shared_, gamma_, beta_;
};

template <typename T>
Var<T> spade_norm(const Var<T>& features, const Var<T>& label_one_hot, const SpadeNorm<T>& layer, bool training) {
    return layer.forward(features, label_one_hot, training);
}

/// Residual block: SPADE -> lrelu -> conv3x3, twice, with a learned SPADE +
/// 1x1 shortcut when the width changes.
template <typename T>
class SpadeResBlock {
public:
    SpadeResBlock() = default;
    SpadeResBlock(Module<T>& owner, const std::string& name, int in, int out, const GanArch& a, Rng& rng)
        : name_(name), learned_shortcut_(in != out) {
        const int mid = std::min(in, out);
        norm0_ = SpadeNorm<T>(owner, name + ".norm0", in, a.num_classes, a.spade_hidden, rng);
        conv0_ = Conv2d<T>(owner, name + ".conv0", {in, mid, 3, {1, 1, 1}, true, true}, rng);
        norm1_ = SpadeNorm<T>(owner, name + ".norm1", mid, a.num_classes, a.spade_hidden, rng);
        conv1_ = Conv2d<T>(owner, name + ".conv1", {mid, out, 3, {1, 1, 1}, true, true}, rng);
        if (learned_shortcut_) {
            norm_s_ = SpadeNorm<T>(owner, name + ".norm_s", in, a.num_classes, a.spade_hidden, rng);
            conv_s_ = Conv2d<T>(owner, name + ".conv_s", {in, out, 1, {}, false, true}, rng);
        }
    }

    [[nodiscard]] Var<T> forward(const Var<T>& x, const Var<T>& label, bool training) const {
        const T slope = T(0.2);
        auto dx = conv0_.forward(leaky_relu(norm0_.forward(x, label, training), slope), training);
        dx = conv1_.forward(leaky_relu(norm1_.forward(dx, label, training), slope), training);
        auto skip = learned_shortcut_ ? conv_s_.forward(norm_s_.forward(x, label, training), training) : x;
        return check_finite(skip + dx, name_);
    }

private:
    std::string name_;
    bool learned_shortcut_ = false;
    SpadeNorm<T> norm0_, norm1_, norm_s_;
    Conv2d<T> conv0_, conv1_, conv_s_;
};

/// G(z | y): z is projected to a seed map, then upsample + residual block
/// per stage, then conv to RGB and tanh.
template <typename T>
class Generator : public Module<T> {
public:
    static constexpr const char* kArch = "spade_gen_v1";

    explicit Generator(GanArch arch, std::uint64_t seed = 0) : arch_(std::move(arch)) {
        arch_.validate();
        Rng rng(seed);
        const int s = arch_.seed_size();
        project_ = Conv2d<T>(*this, "project", {arch_.z_dim, arch_.widths[0] * s * s, 1, {}, true, true}, rng);
        for (int b = 0; b < arch_.blocks(); ++b) {
            blocks_.emplace_back(*this, "block" + std::to_string(b), arch_.widths[b], arch_.widths[b + 1], arch_,
                                 rng);
        }
        to_rgb_ = Conv2d<T>(*this, "to_rgb", {arch_.widths.back(), 3, 3, {1, 1, 1}, true, true}, rng);
    }

    [[nodiscard]] const GanArch& arch() const { return arch_; }

    /// z: (N, Z, 1, 1); label: (N, C, H, W) one-hot. Output (N, 3, H, W) in [-1, 1].
    [[nodiscard]] Var<T> forward(const Var<T>& z, const Tensor<T>& label) const {
        const Shape zs = z.shape();
        const Shape ls = label.shape();
        if (zs.c != arch_.z_dim || zs.h != 1 || zs.w != 1) throw ShapeError("generator: bad latent shape " + zs.str());
        if (ls.n != zs.n || ls.c != arch_.num_classes || ls.h != arch_.image_size || ls.w != arch_.image_size) {
            throw ShapeError("generator: bad label shape " + ls.str());
        }
        const bool tr = this->training();
        const int s = arch_.seed_size();
        auto h = reshape(project_.forward(z, tr), Shape{zs.n, arch_.widths[0], s, s});
        h = check_finite(h, "project");
        for (int b = 0; b < arch_.blocks(); ++b) {
            h = upsample_nearest(h, 2);
            const int res = h.shape().h;
            h = blocks_[b].forward(h, Var<T>(resize_one_hot(label, res, res)), tr);
        }
        return check_finite(tanh(to_rgb_.forward(leaky_relu(h, T(0.2)), tr)), "to_rgb");
    }

private:
    GanArch arch_;
    Conv2d<T> project_;
    std::vector<SpadeResBlock<T>> blocks_;
    Conv2d<T> to_rgb_;
};

/// mu and sigma of q(z | x), each (N, Z, 1, 1). sigma = exp(logvar / 2).
template <typename T>
struct LatentMoments {
    Var<T> mu;
    Var<T> sigma;
};

template <typename T>
struct LatentSample {
    Var<T> z;
    Tensor<T> epsilon;
};

/// z = mu + sigma * epsilon.
template <typename T>
LatentSample<T> reparameterize(const LatentMoments<T>& m, Tensor<T> epsilon) {
    if (!(epsilon.shape() == m.mu.shape()) || !(m.sigma.shape() == m.mu.shape())) {
        throw ShapeError("reparameterize: dimension mismatch " + epsilon.shape().str() + " vs " + m.mu.shape().str());
    }
    auto z = m.mu + m.sigma * Var<T>(epsilon);
    return {z, std::move(epsilon)};
}

template <typename T>
Tensor<T> standard_normal(Shape s, Rng& rng) {
    std::normal_distribution<double> nd;
    Tensor<T> t(s);
    for (auto& v : t.values()) v = static_cast<T>(nd(rng));
    return t;
}

/// Image encoder E: four stride-2 convs, flatten, then 1x1 heads.
template <typename T>
class Encoder : public Module<T> {
public:
    static constexpr const char* kArch = "conv_encoder_v1";

    explicit Encoder(GanArch arch, std::uint64_t seed = 0) : arch_(std::move(arch)) {
        arch_.validate();
        if (arch_.image_size % 16) throw std::invalid_argument("encoder: image size must be a multiple of 16");
        Rng rng(seed);
        const int widths[5] = {3, 16, 32, 64, 64};
        for (int i = 0; i < 4; ++i) {
            convs_.emplace_back(*this, "conv" + std::to_string(i),
                                ConvSpec{widths[i], widths[i + 1], 3, {2, 1, 1}, true, false}, rng);
        }
        const int side = arch_.image_size / 16;
        flat_ = 64 * side * side;
        mu_ = Conv2d<T>(*this, "mu", {flat_, arch_.z_dim, 1, {}, true, false}, rng);
        logvar_ = Conv2d<T>(*this, "logvar", {flat_, arch_.z_dim, 1, {}, true, false}, rng);
    }

    [[nodiscard]] const GanArch& arch() const { return arch_; }

    [[nodiscard]] LatentMoments<T> forward(const Var<T>& images) const {
        const Shape s = images.shape();
        if (s.c != 3 || s.h != arch_.image_size || s.w != arch_.image_size) {
            throw ShapeError("encoder: bad image shape " + s.str());
        }
        const bool tr = this->training();
        Var<T> h = images;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            h = check_finite(leaky_relu(convs_[i].forward(h, tr), T(0.2)), "encoder.conv" + std::to_string(i));
        }
        h = reshape(h, Shape{s.n, flat_, 1, 1});
        auto mu = check_finite(mu_.forward(h, tr), "encoder.mu");
        auto sigma = check_finite(exp(logvar_.forward(h, tr) * T(0.5)), "encoder.sigma");
        return {mu, sigma};
    }

private:
    GanArch arch_;
    std::vector<Conv2d<T>> convs_;
    int flat_ = 0;
    Conv2d<T> mu_, logvar_;
};

template <typename T>
LatentMoments<T> encode(const Encoder<T>& enc, const ImageTensor& image) {
    NoGradGuard ng;
    return enc.forward(Var<T>(image.data.template cast<T>()));
}

/// Per-scale intermediate activations (T per scale) and the patch logits.
template <typename T>
struct DiscriminatorFeatures {
    struct Scale {
        std::vector<Var<T>> features;
        Var<T> logits;
    };
    std::vector<Scale> scales;
};

/// K patch discriminators on the (image, one-hot) concatenation at
/// resolutions H, H/2, ... H/2^(K-1).
template <typename T>
class MultiscaleDiscriminator : public Module<T> {
public:
    static constexpr const char* kArch = "multiscale_patch_v1";
    static constexpr int kLayers = 3;
    static constexpr int kMinSize = 8;

    explicit MultiscaleDiscriminator(GanArch arch, std::uint64_t seed = 0) : arch_(std::move(arch)) {
        arch_.validate();
        if ((arch_.image_size >> (arch_.disc_scales - 1)) < kMinSize) {
            throw std::invalid_argument("discriminator: image too small for " + std::to_string(arch_.disc_scales) +
                                        " scales");
        }
        Rng rng(seed);
        const int in = 3 + arch_.num_classes;
        const int w = arch_.disc_width;
        for (int k = 0; k < arch_.disc_scales; ++k) {
            const std::string p = "scale" + std::to_string(k) + ".";
            std::vector<Conv2d<T>> layers;
            layers.emplace_back(*this, p + "conv0", ConvSpec{in, w, 4, {2, 1, 1}, true, true}, rng);
            layers.emplace_back(*this, p + "conv1", ConvSpec{w, 2 * w, 4, {2, 1, 1}, true, true}, rng);
            layers.emplace_back(*this, p + "conv2", ConvSpec{2 * w, 2 * w, 3, {1, 1, 1}, true, true}, rng);
            layers.emplace_back(*this, p + "logits", ConvSpec{2 * w, 1, 3, {1, 1, 1}, true, true}, rng);
            scales_.push_back(std::move(layers));
        }
    }

    [[nodiscard]] const GanArch& arch() const { return arch_; }

    [[nodiscard]] DiscriminatorFeatures<T> forward(const Var<T>& images, const Tensor<T>& label) const {
        const Shape s = images.shape();
        if (s.h < (kMinSize << (arch_.disc_scales - 1)) || s.w < (kMinSize << (arch_.disc_scales - 1))) {
            throw ShapeError("discriminator: image " + s.str() + " smaller than minimum scale");
        }
        if (label.shape().n != s.n || label.shape().h != s.h || label.shape().w != s.w ||
            label.shape().c != arch_.num_classes) {
            throw ShapeError("discriminator: label " + label.shape().str() + " does not match " + s.str());
        }
        const bool tr = this->training();
        DiscriminatorFeatures<T> out;
        Var<T> x = concat_channels(images, Var<T>(label));
        for (int k = 0; k < arch_.disc_scales; ++k) {
            if (k > 0) x = avg_pool2(x);
            typename DiscriminatorFeatures<T>::Scale scale;
            Var<T> h = x;
            for (int i = 0; i < kLayers; ++i) {
                h = leaky_relu(scales_[k][i].forward(h, tr), T(0.2));
                scale.features.push_back(h);
            }
            scale.logits = check_finite(scales_[k][kLayers].forward(h, tr), "disc.scale" + std::to_string(k));
            out.scales.push_back(std::move(scale));
        }
        return out;
    }

private:
    GanArch arch_;
    std::vector<std::vector<Conv2d<T>>> scales_;
};

template <typename T>
DiscriminatorFeatures<T> discriminate(const MultiscaleDiscriminator<T>& d, const ImageTensor& image,
                                      const LabelMap& label) {
    NoGradGuard ng;
    const std::vector<LabelMap> one{label};
    return d.forward(Var<T>(image.data.template cast<T>()), batch_one_hot<T>(one));
}

template <typename T>
ModelParams export_gan_module(const Module<T>& m, Role role, const std::string& arch_id, const GanArch& arch,
                              json extra = json::object()) {
    json meta = extra;
    meta["gan_arch"] = arch;
    return export_module(m, role, arch_id, std::move(meta));
}

inline GanArch gan_arch_of(const ModelParams& p) {
    if (!p.meta.contains("gan_arch")) throw CheckpointError("checkpoint has no gan_arch metadata");
    return p.meta.at("gan_arch").get<GanArch>();
}

namespace detail {
template <typename M>
M load_gan_module(const ModelParams& p, Role role, const char* arch_id) {
    if (p.role != role) throw CheckpointError("checkpoint role is " + to_string(p.role) + ", expected " + to_string(role));
    if (p.arch != arch_id) throw CheckpointError("checkpoint architecture " + p.arch + " != " + arch_id);
    M m(gan_arch_of(p));
    import_module(m, p);
    m.set_training(false);
    return m;
}
}  // namespace detail

template <typename T = float>
Generator<T> load_generator(const ModelParams& p) {
    return detail::load_gan_module<Generator<T>>(p, Role::generator, Generator<T>::kArch);
}
template <typename T = float>
Encoder<T> load_encoder(const ModelParams& p) {
    return detail::load_gan_module<Encoder<T>>(p, Role::encoder, Encoder<T>::kArch);
}
template <typename T = float>
MultiscaleDiscriminator<T> load_discriminator(const ModelParams& p) {
    return detail::load_gan_module<MultiscaleDiscriminator<T>>(p, Role::discriminator,
                                                               MultiscaleDiscriminator<T>::kArch);
}

/// x' = G(z | y) for one latent sample and label.
template <typename T>
ImageTensor generate(const Generator<T>& gen, const LatentSample<T>& z, const LabelMap& label) {
    NoGradGuard ng;
    const std::vector<LabelMap> one{label};
    return ImageTensor(gen.forward(z.z, batch_one_hot<T>(one)).value().template cast<float>());
}

}  // namespace advspade
