#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "advspade/render.hpp"
#include "advspade/segnet.hpp"
#include "advspade/spadegen.hpp"

namespace advspade {

struct LossWeights {
    double lambda0 = 10.0;  // feature matching
    double lambda1 = 10.0;  // perceptual
    double lambda2 = 0.05;  // KL divergence
    double lambda3 = 10.0;  // unrestricted adversarial

    void validate() const {
        for (double v : {lambda0, lambda1, lambda2, lambda3}) {
            if (!std::isfinite(v) || v < 0) throw std::invalid_argument("loss weights must be finite and >= 0");
        }
    }
};

inline void to_json(json& j, const LossWeights& w) {
    j = {{"lambda0", w.lambda0}, {"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}};
}

inline void from_json(const json& j, LossWeights& w) {
    LossWeights d;
    w.lambda0 = j.value("lambda0", d.lambda0);
    w.lambda1 = j.value("lambda1", d.lambda1);
    w.lambda2 = j.value("lambda2", d.lambda2);
    w.lambda3 = j.value("lambda3", d.lambda3);
}

template <typename T>
struct HingeLosses {
    Var<T> g_loss;
    Var<T> d_loss;
};

namespace detail {
template <typename T>
void require_scales(const DiscriminatorFeatures<T>& f, std::size_t k, const char* what) {
    if (f.scales.size() != k || k == 0) throw std::invalid_argument(std::string(what) + ": scale count mismatch");
    for (const auto& s : f.scales) {
        if (!s.logits.defined()) throw std::invalid_argument(std::string(what) + ": missing logit map");
    }
}
}  // namespace detail

/// d: sum_k mean(relu(1 - real_k)) + mean(relu(1 + fake_k)).
template <typename T>
Var<T> hinge_d_loss(const DiscriminatorFeatures<T>& real, const DiscriminatorFeatures<T>& fake) {
    detail::require_scales(fake, real.scales.size(), "hinge loss");
    Var<T> total;
    for (std::size_t k = 0; k < real.scales.size(); ++k) {
        auto term = mean(relu(real.scales[k].logits * T(-1) + T(1))) + mean(relu(fake.scales[k].logits + T(1)));
        total = total.defined() ? total + term : term;
    }
    return total;
}

/// g: -sum_k mean(fake_k).
template <typename T>
Var<T> hinge_g_loss(const DiscriminatorFeatures<T>& fake) {
    detail::require_scales(fake, fake.scales.size(), "hinge loss");
    Var<T> total;
    for (const auto& s : fake.scales) {
        auto term = mean(s.logits) * T(-1);
        total = total.defined() ? total + term : term;
    }
    return total;
}

template <typename T>
HingeLosses<T> gan_hinge_losses(const DiscriminatorFeatures<T>& real, const DiscriminatorFeatures<T>& fake) {
    return {hinge_g_loss(fake), hinge_d_loss(real, fake)};
}

/// sum_k sum_i mean |D_k^i(real) - D_k^i(fake)|; the real branch is a constant.
template <typename T>
Var<T> feature_matching_loss(const DiscriminatorFeatures<T>& real, const DiscriminatorFeatures<T>& fake) {
    detail::require_scales(fake, real.scales.size(), "feature matching");
    Var<T> total;
    for (std::size_t k = 0; k < real.scales.size(); ++k) {
        const auto& rf = real.scales[k].features;
        const auto& ff = fake.scales[k].features;
        if (rf.size() != ff.size()) throw std::invalid_argument("feature matching: layer count mismatch");
        for (std::size_t i = 0; i < rf.size(); ++i) {
            if (!(rf[i].shape() == ff[i].shape())) throw ShapeError("feature matching: layer shape mismatch");
            auto term = mean(abs(ff[i] - rf[i].detach()));
            total = total.defined() ? total + term : term;
        }
    }
    return total;
}

/// Frozen random-weight conv pyramid standing in for a pretrained
/// perceptual network. Parameters never change after construction.
template <typename T>
class PerceptualExtractor : public Module<T> {
public:
    static constexpr const char* kArch = "perceptual_pyramid_v1";

    explicit PerceptualExtractor(std::uint64_t seed = 0) {
        Rng rng(seed);
        const int widths[4] = {3, 16, 32, 64};
        for (int i = 0; i < 3; ++i) {
            convs_.emplace_back(*this, "conv" + std::to_string(i),
                                ConvSpec{widths[i], widths[i + 1], 3, {2, 1, 1}, true, false}, rng);
        }
        this->set_frozen(true);
        this->set_training(false);
    }

    [[nodiscard]] std::vector<Var<T>> features(const Var<T>& images) const {
        std::vector<Var<T>> out;
        Var<T> h = images;
        for (const auto& c : convs_) {
            h = leaky_relu(c.forward(h, false), T(0.2));
            out.push_back(h);
        }
        return out;
    }

private:
    std::vector<Conv2d<T>> convs_;
};

/// sum_i mean |F^i(x) - F^i(x_gen)|.
template <typename T>
Var<T> perceptual_loss(const Var<T>& x, const Var<T>& x_gen, const PerceptualExtractor<T>& extractor) {
    if (!(x.shape() == x_gen.shape())) throw ShapeError("perceptual loss: " + x.shape().str() + " vs " + x_gen.shape().str());
    if (!extractor.frozen()) throw std::invalid_argument("perceptual loss: extractor must be frozen");
    const auto fx = extractor.features(x);
    const auto fg = extractor.features(x_gen);
    Var<T> total;
    for (std::size_t i = 0; i < fx.size(); ++i) {
        auto term = mean(abs(fx[i] - fg[i]));
        total = total.defined() ? total + term : term;
    }
    return total;
}

/// KL(N(mu, sigma^2) || N(0, I)) = 0.5 sum_d (mu^2 + sigma^2 - log sigma^2 - 1),
/// per image, then batch mean.
template <typename T>
Var<T> kld_loss(const LatentMoments<T>& m) {
    for (T s : m.sigma.value().values()) {
        if (!(s > T(0))) throw std::invalid_argument("kld_loss: sigma must be > 0");
    }
    const auto var = square(m.sigma);
    auto per_dim = square(m.mu) + var - log(var) + T(-1);
    return sum(per_dim) * T(0.5 / m.mu.shape().n);
}

inline constexpr double kAttackLossFloor = 1e-6;

/// -log(clamp(dice, 1e-6, 1)), batch mean of per-image values.
template <typename T>
Var<T> attack_loss_from_dice(const Var<T>& per_image_dice) {
    return mean(log(clamp(per_image_dice, T(kAttackLossFloor), T(1))) * T(-1));
}

/// The segmenter stays frozen; gradients reach the images only.
template <typename T>
Var<T> adversarial_attack_loss(const Segmenter<T>& seg, const Var<T>& x_gen, const Tensor<T>& target_one_hot) {
    FreezeGuard<T> freeze(seg);
    return attack_loss_from_dice(dice_loss(seg_forward(seg, x_gen), target_one_hot));
}

/// Individual generator-side terms. Undefined entries count as zero and
/// are only allowed when their weight is zero.
template <typename T>
struct GeneratorTerms {
    Var<T> g_gan;
    Var<T> feature_matching;
    Var<T> perceptual;
    Var<T> kld;
    Var<T> attack;
};

template <typename T>
Var<T> total_generator_objective(const GeneratorTerms<T>& t, const LossWeights& w) {
    w.validate();
    auto checked = [](const Var<T>& v, const char* name) -> const Var<T>& {
        if (v.defined() && !v.value().all_finite()) throw NonFiniteError(std::string("non-finite loss term ") + name);
        return v;
    };
    if (!t.g_gan.defined()) throw std::invalid_argument("generator objective needs the GAN term");
    Var<T> total = checked(t.g_gan, "g_gan");
    const std::pair<const Var<T>*, std::pair<double, const char*>> parts[] = {
        {&t.feature_matching, {w.lambda0, "feature_matching"}},
        {&t.perceptual, {w.lambda1, "perceptual"}},
        {&t.kld, {w.lambda2, "kld"}},
        {&t.attack, {w.lambda3, "attack"}}};
    for (const auto& [v, meta] : parts) {
        const auto [weight, name] = meta;
        if (!v->defined()) {
            if (weight != 0) throw std::invalid_argument(std::string("generator objective: missing term ") + name);
            continue;
        }
        total = total + checked(*v, name) * static_cast<T>(weight);
    }
    return total;
}

struct GanTrainConfig {
    GanArch arch;
    int epochs = 40;
    int batch_size = 8;
    double lr_g = 2e-4;
    double lr_d = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::uint64_t seed = 1;
    int grid_every = 10;

    void validate() const {
        arch.validate();
        if (epochs < 0 || batch_size < 2) throw std::invalid_argument("gan train: epochs >= 0 and batch >= 2");
        if (!(lr_g > 0) || !(lr_d > 0)) throw std::invalid_argument("gan train: learning rates must be > 0");
    }
};

inline void to_json(json& j, const GanTrainConfig& c) {
    j = {{"arch", c.arch},   {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr_g", c.lr_g},
         {"lr_d", c.lr_d},   {"beta1", c.beta1},   {"beta2", c.beta2},           {"seed", c.seed},
         {"grid_every", c.grid_every}};
}

inline void from_json(const json& j, GanTrainConfig& c) {
    GanTrainConfig d;
    c.arch = j.contains("arch") ? j.at("arch").get<GanArch>() : d.arch;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr_g = j.value("lr_g", d.lr_g);
    c.lr_d = j.value("lr_d", d.lr_d);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.seed = j.value("seed", d.seed);
    c.grid_every = j.value("grid_every", d.grid_every);
}

struct GanEpochLog {
    int epoch = 0;
    double g_gan = 0, feature_matching = 0, perceptual = 0, kld = 0, attack = 0, g_total = 0, d_loss = 0;
    double seconds = 0;
};

inline json to_json_value(const GanEpochLog& l) {
    return {{"epoch", l.epoch}, {"g_gan", l.g_gan},   {"feature_matching", l.feature_matching},
            {"perceptual", l.perceptual}, {"kld", l.kld}, {"attack", l.attack},
            {"g_total", l.g_total}, {"d_loss", l.d_loss}, {"seconds", l.seconds}};
}

struct GanTrainResult {
    ModelParams generator;
    ModelParams discriminator;
    ModelParams encoder;
    std::vector<GanEpochLog> history;
};

struct GanTrainHooks {
    /// When set: per-epoch checkpoints, a line-delimited loss log and PNG
    /// grids are written here.
    std::optional<std::filesystem::path> output_dir;
    std::function<void(const GanEpochLog&)> on_epoch;
    /// Timing fields are zeroed in the emitted log when true.
    bool deterministic_log = false;
};

/// Encoder-driven synthesis for a list of label/image pairs:
/// z = mu(E(x)) + sigma(E(x)) * eps with eps drawn from a seeded stream.
inline std::vector<ImageTensor> synthesize(const Generator<float>& gen, const Encoder<float>& enc,
                                           std::span<const Sample> items, std::uint64_t seed,
                                           std::size_t chunk = 25) {
    NoGradGuard ng;
    Rng rng(seed);
    std::vector<ImageTensor> out;
    out.reserve(items.size());
    for (std::size_t first = 0; first < items.size(); first += chunk) {
        const std::size_t last = std::min(items.size(), first + chunk);
        std::vector<Tensor<float>> imgs;
        std::vector<LabelMap> labels;
        for (std::size_t i = first; i < last; ++i) {
            imgs.push_back(items[i].image.data);
            labels.push_back(items[i].label);
        }
        const auto m = enc.forward(Var<float>(stack_batch<float>(imgs)));
        const auto z = reparameterize(m, standard_normal<float>(m.mu.shape(), rng));
        const auto x = gen.forward(z.z, batch_one_hot<float>(labels)).value();
        for (int n = 0; n < x.shape().n; ++n) out.emplace_back(x.batch_slice(n, 1));
    }
    return out;
}

namespace detail {

inline void write_gan_grid(const Generator<float>& gen, const Encoder<float>& enc, const Segmenter<float>& seg,
                           std::span<const Sample> items, std::uint64_t seed, const std::filesystem::path& path) {
    const auto fakes = synthesize(gen, enc, items, seed);
    const auto preds = predict_batch(seg, std::span<const ImageTensor>(fakes));
    std::vector<std::vector<ImageTensor>> rows;
    for (std::size_t i = 0; i < fakes.size(); ++i) {
        rows.push_back({items[i].image, label_to_image(items[i].label), fakes[i], label_to_image(preds[i])});
    }
    save_grid(rows, path);
}

}  // namespace detail

/// Alternating (G, E) step then D step per batch, Adam for both sides. The
/// target segmenter is frozen and verified bit-identical on exit.
inline GanTrainResult train_advspade(const Dataset& train, const Segmenter<float>& target, const LossWeights& weights,
                                     const GanTrainConfig& cfg, const GanTrainHooks& hooks = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    weights.validate();
    if (train.empty()) throw std::invalid_argument("train_advspade: empty training set");
    if (train.num_classes != cfg.arch.num_classes || train.image_size != cfg.arch.image_size) {
        throw std::invalid_argument("train_advspade: dataset does not match the configured architecture");
    }
    if (target.num_classes() != cfg.arch.num_classes) {
        throw std::invalid_argument("train_advspade: target segmenter class count mismatch");
    }
    const std::uint64_t target_hash = params_hash(export_segmenter(target));

    Generator<float> gen(cfg.arch, cfg.seed * 4 + 1);
    Encoder<float> enc(cfg.arch, cfg.seed * 4 + 2);
    MultiscaleDiscriminator<float> disc(cfg.arch, cfg.seed * 4 + 3);
    const PerceptualExtractor<float> extractor(0);
    std::vector<Var<float>> ge_params = gen.parameters();
    for (const auto& p : enc.parameters()) ge_params.push_back(p);
    Adam<float> opt_g(ge_params, {cfg.lr_g, cfg.beta1, cfg.beta2, 1e-8});
    Adam<float> opt_d(disc.parameters(), {cfg.lr_d, cfg.beta1, cfg.beta2, 1e-8});

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::ofstream log_file;
    if (hooks.output_dir) {
        fs::create_directories(*hooks.output_dir);
        log_file.open(*hooks.output_dir / "losses.jsonl", std::ios::trunc);
    }
    const std::size_t grid_count = std::min<std::size_t>(4, train.size());
    const std::span<const Sample> grid_items(train.items.data(), grid_count);

    auto snapshot = [&](json extra) {
        gen.set_training(false);
        enc.set_training(false);
        disc.set_training(false);
        json w = weights;
        extra["weights"] = w;
        GanTrainResult r{export_gan_module(gen, Role::generator, Generator<float>::kArch, cfg.arch, extra),
                         export_gan_module(disc, Role::discriminator, MultiscaleDiscriminator<float>::kArch,
                                           cfg.arch, extra),
                         export_gan_module(enc, Role::encoder, Encoder<float>::kArch, cfg.arch, extra),
                         {}};
        return r;
    };

    GanTrainResult result = snapshot({{"epoch", 0}});
    GanTrainResult last_good = result;
    const bool skip_attack = weights.lambda3 == 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        GanEpochLog log{epoch};
        int batches = 0;
        for (std::size_t first = 0; first + 1 < order.size(); first += cfg.batch_size) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - first);
            if (count < 2) break;  // batch statistics need two samples
            std::vector<Tensor<float>> imgs;
            std::vector<LabelMap> labels;
            for (std::size_t i = first; i < first + count; ++i) {
                imgs.push_back(train.items[order[i]].image.data);
                labels.push_back(train.items[order[i]].label);
            }
            const Var<float> real(stack_batch<float>(imgs));
            const auto onehot = batch_one_hot<float>(labels);
            gen.set_training(true);
            enc.set_training(true);
            disc.set_training(true);

            // (G, E) step
            opt_g.zero_grad();
            GeneratorTerms<float> terms;
            Var<float> fake;
            {
                FreezeGuard<float> freeze_d(disc);
                const auto moments = enc.forward(real);
                const auto z = reparameterize(moments, standard_normal<float>(moments.mu.shape(), rng));
                fake = gen.forward(z.z, onehot);
                const auto fake_feats = disc.forward(fake, onehot);
                DiscriminatorFeatures<float> real_feats;
                {
                    NoGradGuard ng;
                    real_feats = disc.forward(real, onehot);
                }
                terms.g_gan = hinge_g_loss(fake_feats);
                if (weights.lambda0 > 0) terms.feature_matching = feature_matching_loss(real_feats, fake_feats);
                if (weights.lambda1 > 0) terms.perceptual = perceptual_loss(real, fake, extractor);
                terms.kld = kld_loss(moments);
                if (!skip_attack) terms.attack = adversarial_attack_loss(target, fake, onehot);
                Var<float> total;
                try {
                    total = total_generator_objective(terms, weights);
                } catch (const NonFiniteError& e) {
                    throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch),
                                           last_good.generator);
                }
                total.backward();
                log.g_total += total.value()[0];
            }
            opt_g.step();

            // D step on the detached fake batch
            opt_d.zero_grad();
            const auto d_real = disc.forward(real, onehot);
            const auto d_fake = disc.forward(fake.detach(), onehot);
            auto d_loss = hinge_d_loss(d_real, d_fake);
            if (!std::isfinite(d_loss.value()[0])) {
                throw TrainingDiverged("non-finite discriminator loss at epoch " + std::to_string(epoch),
                                       last_good.generator);
            }
            d_loss.backward();
            opt_d.step();

            auto val = [](const Var<float>& v) { return v.defined() ? static_cast<double>(v.value()[0]) : 0.0; };
            log.g_gan += val(terms.g_gan);
            log.feature_matching += val(terms.feature_matching);
            log.perceptual += val(terms.perceptual);
            log.kld += val(terms.kld);
            log.attack += val(terms.attack);
            log.d_loss += d_loss.value()[0];
            ++batches;
        }
        const double inv = 1.0 / std::max(1, batches);
        for (double* f : {&log.g_gan, &log.feature_matching, &log.perceptual, &log.kld, &log.attack, &log.g_total,
                          &log.d_loss})
            *f *= inv;
        log.seconds = hooks.deterministic_log
                          ? 0.0
                          : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(log);

        last_good = snapshot({{"epoch", epoch}});
        if (hooks.output_dir) {
            log_file << to_json_value(log).dump() << '\n' << std::flush;
            save_checkpoint(last_good.generator, *hooks.output_dir / "generator_latest.ckpt");
            save_checkpoint(last_good.discriminator, *hooks.output_dir / "discriminator_latest.ckpt");
            save_checkpoint(last_good.encoder, *hooks.output_dir / "encoder_latest.ckpt");
            if (cfg.grid_every > 0 && (epoch % cfg.grid_every == 0 || epoch == cfg.epochs)) {
                char name[32];
                std::snprintf(name, sizeof(name), "grid_epoch%03d.png", epoch);
                detail::write_gan_grid(gen, enc, target, grid_items, cfg.seed, *hooks.output_dir / name);
            }
        }
        if (hooks.on_epoch) hooks.on_epoch(log);
    }

    if (params_hash(export_segmenter(target)) != target_hash) {
        throw std::logic_error("train_advspade: target segmenter parameters changed during training");
    }
    json hist = json::array();
    for (const auto& h : result.history) hist.push_back(to_json_value(h));
    json cfg_json = cfg;
    auto final_result = snapshot({{"epoch", cfg.epochs}, {"history", hist}, {"config", cfg_json},
                                  {"target_hash", hex64(target_hash)}});
    final_result.history = std::move(result.history);
    return final_result;
}

}  // namespace advspade
