#include <gtest/gtest.h>

#include "advspade/losses.hpp"
#include "grad_check.hpp"
#include "pins.hpp"

using namespace advspade;
using advspade::testing::gradient_error;
using advspade::testing::random_tensor;

namespace {

using Feats = DiscriminatorFeatures<double>;

/// K scales, T layers of (2, 3, 4, 4) features and (2, 1, 4, 4) logits.
Feats random_feats(std::uint64_t seed, int k = 2, int t = 3) {
    Feats f;
    for (int s = 0; s < k; ++s) {
        Feats::Scale scale;
        for (int i = 0; i < t; ++i) scale.features.emplace_back(random_tensor({2, 3, 4, 4}, seed * 100 + s * 10 + i));
        scale.logits = Var<double>(random_tensor({2, 1, 4, 4}, seed * 100 + s * 10 + 9, -2, 2));
        f.scales.push_back(scale);
    }
    return f;
}

Feats constant_logits(double v, int k = 2) {
    Feats f = random_feats(1, k);
    for (auto& s : f.scales) s.logits = Var<double>(Tensor<double>(Shape{2, 1, 4, 4}, v));
    return f;
}

double scalar(const Var<double>& v) { return v.value()[0]; }

TEST(Hinge, SatisfiedMarginsGiveZeroDiscriminatorLoss) {
    EXPECT_EQ(scalar(hinge_d_loss(constant_logits(1), constant_logits(-1))), 0.0);
}

TEST(Hinge, ZeroFakeLogitsGiveZeroGeneratorLoss) {
    EXPECT_EQ(scalar(gan_hinge_losses(constant_logits(3), constant_logits(0)).g_loss), 0.0);
}

TEST(Hinge, MatchesBruteForceSum) {
    const auto real = random_feats(2);
    const auto fake = random_feats(3);
    double d = 0, g = 0;
    for (std::size_t k = 0; k < 2; ++k) {
        const auto& r = real.scales[k].logits.value();
        const auto& f = fake.scales[k].logits.value();
        double dr = 0, df = 0, gf = 0;
        for (std::size_t i = 0; i < r.numel(); ++i) {
            dr += std::max(0.0, 1.0 - r[i]);
            df += std::max(0.0, 1.0 + f[i]);
            gf += f[i];
        }
        d += (dr + df) / static_cast<double>(r.numel());
        g -= gf / static_cast<double>(f.numel());
    }
    const auto h = gan_hinge_losses(real, fake);
    EXPECT_NEAR(scalar(h.d_loss), d, 1e-12);
    EXPECT_NEAR(scalar(h.g_loss), g, 1e-12);
}

TEST(Hinge, GradientsMatchFiniteDifferences) {
    const auto real = random_feats(4);
    const auto fake = random_feats(5);
    const auto real_logits = real.scales[1].logits.value();
    const auto fake_logits = fake.scales[0].logits.value();
    auto d_wrt_real = [&](const Var<double>& v) {
        auto r = real;
        r.scales[1].logits = v;
        return hinge_d_loss(r, fake);
    };
    auto d_wrt_fake = [&](const Var<double>& v) {
        auto f = fake;
        f.scales[0].logits = v;
        return hinge_d_loss(real, f);
    };
    auto g_wrt_fake = [&](const Var<double>& v) {
        auto f = fake;
        f.scales[0].logits = v;
        return hinge_g_loss(f);
    };
    EXPECT_LT(gradient_error(d_wrt_real, real_logits), 1e-4);
    EXPECT_LT(gradient_error(d_wrt_fake, fake_logits), 1e-4);
    EXPECT_LT(gradient_error(g_wrt_fake, fake_logits), 1e-4);
}

TEST(Hinge, RejectsScaleMismatch) {
    EXPECT_THROW(hinge_d_loss(random_feats(1, 2), random_feats(2, 1)), std::invalid_argument);
}

TEST(FeatureMatching, IdenticalFeaturesGiveZero) {
    const auto f = random_feats(6);
    EXPECT_EQ(scalar(feature_matching_loss(f, f)), 0.0);
}

TEST(FeatureMatching, UnitOffsetCountsLayers) {
    const auto real = random_feats(7);
    auto fake = real;
    for (auto& s : fake.scales)
        for (auto& v : s.features) v = Var<double>(v.value()) + 1.0;
    EXPECT_NEAR(scalar(feature_matching_loss(real, fake)), 2 * 3, 1e-12);
}

TEST(FeatureMatching, MatchesScalarRecomputation) {
    const auto real = random_feats(8);
    const auto fake = random_feats(9);
    double expected = 0;
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < 3; ++i) {
            const auto& r = real.scales[k].features[i].value();
            const auto& f = fake.scales[k].features[i].value();
            double acc = 0;
            for (std::size_t j = 0; j < r.numel(); ++j) acc += std::abs(r[j] - f[j]);
            expected += acc / static_cast<double>(r.numel());
        }
    EXPECT_NEAR(scalar(feature_matching_loss(real, fake)), expected, 1e-12);
}

TEST(FeatureMatching, GradientReachesFakeOnly) {
    const auto real = random_feats(10);
    const auto fake = random_feats(11);
    auto fn = [&](const Var<double>& v) {
        auto f = fake;
        f.scales[1].features[2] = v;
        return feature_matching_loss(real, f);
    };
    EXPECT_LT(gradient_error(fn, fake.scales[1].features[2].value()), 1e-4);
    auto r = real;
    Var<double> leaf(real.scales[0].features[0].value(), true);
    r.scales[0].features[0] = leaf;
    feature_matching_loss(r, fake).backward();
    EXPECT_EQ(leaf.grad().max_abs(), 0.0);
}

/// Direct-loop forward of the extractor: 3x3, stride 2, pad 1, leaky 0.2.
std::vector<Tensor<double>> naive_features(const PerceptualExtractor<double>& ex, const Tensor<double>& x) {
    std::map<std::string, Tensor<double>> p;
    for (const auto& e : ex.entries()) p[e.name] = e.var.value();
    std::vector<Tensor<double>> out;
    Tensor<double> h = x;
    for (int layer = 0; layer < 3; ++layer) {
        const auto& w = p.at("conv" + std::to_string(layer) + ".weight");
        const auto& b = p.at("conv" + std::to_string(layer) + ".bias");
        const Shape s = h.shape();
        const int oh = (s.h + 2 - 3) / 2 + 1, ow = (s.w + 2 - 3) / 2 + 1;
        Tensor<double> o(Shape{s.n, w.shape().n, oh, ow});
        for (int n = 0; n < s.n; ++n)
            for (int co = 0; co < w.shape().n; ++co)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        double acc = b[co];
                        for (int ci = 0; ci < s.c; ++ci)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int iy = 2 * y - 1 + ky, ix = 2 * xx - 1 + kx;
                                    if (iy < 0 || ix < 0 || iy >= s.h || ix >= s.w) continue;
                                    acc += w.at(co, ci, ky, kx) * h.at(n, ci, iy, ix);
                                }
                        o.at(n, co, y, xx) = acc > 0 ? acc : 0.2 * acc;
                    }
        out.push_back(o);
        h = o;
    }
    return out;
}

TEST(Perceptual, IdenticalInputsGiveZeroAndSymmetric) {
    const PerceptualExtractor<double> ex;
    const auto a = random_tensor({2, 3, 8, 8}, 1);
    const auto b = random_tensor({2, 3, 8, 8}, 2);
    EXPECT_EQ(scalar(perceptual_loss(Var<double>(a), Var<double>(a), ex)), 0.0);
    EXPECT_EQ(scalar(perceptual_loss(Var<double>(a), Var<double>(b), ex)),
              scalar(perceptual_loss(Var<double>(b), Var<double>(a), ex)));
}

TEST(Perceptual, MatchesDirectLoopRecomputationAndPin) {
    const PerceptualExtractor<double> ex;
    const auto a = random_tensor({1, 3, 8, 8}, 3);
    const auto b = random_tensor({1, 3, 8, 8}, 4);
    const auto fa = naive_features(ex, a);
    const auto fb = naive_features(ex, b);
    double expected = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < fa[i].numel(); ++j) acc += std::abs(fa[i][j] - fb[i][j]);
        expected += acc / static_cast<double>(fa[i].numel());
    }
    const double got = scalar(perceptual_loss(Var<double>(a), Var<double>(b), ex));
    EXPECT_NEAR(got, expected, 1e-10);
    EXPECT_NEAR(got, pins::kPerceptualSeed0, 1e-9);
}

TEST(Perceptual, GradientAndFrozenExtractor) {
    const PerceptualExtractor<double> ex;
    const auto a = random_tensor({1, 3, 8, 8}, 5);
    auto fn = [&](const Var<double>& v) { return perceptual_loss(Var<double>(a), v, ex); };
    EXPECT_LT(gradient_error(fn, random_tensor({1, 3, 8, 8}, 6)), 1e-4);
    EXPECT_TRUE(ex.frozen());
}

LatentMoments<double> moments(Tensor<double> mu, Tensor<double> sigma) { return {Var<double>(mu), Var<double>(sigma)}; }

TEST(Kld, StandardNormalIsZero) {
    EXPECT_NEAR(scalar(kld_loss(moments(Tensor<double>(Shape{3, 8, 1, 1}), Tensor<double>(Shape{3, 8, 1, 1}, 1.0)))),
                0.0, 1e-15);
}

TEST(Kld, UnitMeanShiftIsHalf) {
    Tensor<double> mu(Shape{1, 8, 1, 1});
    mu[0] = 1;
    EXPECT_NEAR(scalar(kld_loss(moments(mu, Tensor<double>(Shape{1, 8, 1, 1}, 1.0)))), 0.5, 1e-12);
}

/// KL(q || N(0, I)) by midpoint quadrature on a 2-D grid.
double quadrature_kl(const std::array<double, 2>& mu, const std::array<double, 2>& sigma) {
    constexpr int kSteps = 1200;
    const double lo0 = mu[0] - 10 * sigma[0], hi0 = mu[0] + 10 * sigma[0];
    const double lo1 = mu[1] - 10 * sigma[1], hi1 = mu[1] + 10 * sigma[1];
    const double d0 = (hi0 - lo0) / kSteps, d1 = (hi1 - lo1) / kSteps;
    double acc = 0;
    for (int i = 0; i < kSteps; ++i) {
        const double x = lo0 + (i + 0.5) * d0;
        for (int j = 0; j < kSteps; ++j) {
            const double y = lo1 + (j + 0.5) * d1;
            const double zq0 = (x - mu[0]) / sigma[0], zq1 = (y - mu[1]) / sigma[1];
            const double log_q = -0.5 * (zq0 * zq0 + zq1 * zq1) - std::log(2 * M_PI * sigma[0] * sigma[1]);
            const double log_p = -0.5 * (x * x + y * y) - std::log(2 * M_PI);
            acc += std::exp(log_q) * (log_q - log_p);
        }
    }
    return acc * d0 * d1;
}

TEST(Kld, MatchesQuadratureAtDimTwo) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> um(-1.5, 1.5), us(0.4, 1.8);
    for (int trial = 0; trial < 4; ++trial) {
        const std::array<double, 2> mu{um(rng), um(rng)}, sigma{us(rng), us(rng)};
        Tensor<double> m(Shape{1, 2, 1, 1}), s(Shape{1, 2, 1, 1});
        for (int d = 0; d < 2; ++d) m[d] = mu[d], s[d] = sigma[d];
        EXPECT_NEAR(scalar(kld_loss(moments(m, s))), quadrature_kl(mu, sigma), 1e-3);
    }
}

TEST(Kld, NonNegativeWithGradientAndRejectsZeroSigma) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        EXPECT_GE(scalar(kld_loss(moments(random_tensor({2, 4, 1, 1}, seed), random_tensor({2, 4, 1, 1}, seed + 50, 0.2, 2)))),
                  0.0);
    }
    const auto sigma = random_tensor({2, 4, 1, 1}, 8, 0.3, 2);
    const auto mu = random_tensor({2, 4, 1, 1}, 9);
    EXPECT_LT(gradient_error([&](const Var<double>& v) { return kld_loss(LatentMoments<double>{v, Var<double>(sigma)}); }, mu), 1e-4);
    EXPECT_LT(gradient_error([&](const Var<double>& v) { return kld_loss(LatentMoments<double>{Var<double>(mu), v}); }, sigma), 1e-4);
    EXPECT_THROW(kld_loss(moments(mu, Tensor<double>(mu.shape()))), std::invalid_argument);
}

double attack_value(double dice) {
    return scalar(attack_loss_from_dice(Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, dice))));
}

TEST(AttackLoss, ClosedFormValues) {
    EXPECT_EQ(attack_value(1.0), 0.0);
    EXPECT_NEAR(attack_value(std::exp(-1.0)), 1.0, 1e-12);
    EXPECT_NEAR(attack_value(1e-9), 13.8155, 1e-4);
    EXPECT_NEAR(attack_value(0.0), -std::log(kAttackLossFloor), 1e-12);
}

TEST(AttackLoss, MonotoneNonIncreasingAboveFloor) {
    double prev = std::numeric_limits<double>::infinity();
    for (double d = 2e-6; d <= 1.0; d *= 1.37) {
        const double v = attack_value(d);
        EXPECT_LE(v, prev) << d;
        prev = v;
    }
}

TEST(AttackLoss, BatchMeanAndGradient) {
    Tensor<double> dice(Shape{3, 1, 1, 1});
    dice[0] = 0.2, dice[1] = 0.5, dice[2] = 0.9;
    EXPECT_NEAR(scalar(attack_loss_from_dice(Var<double>(dice))),
                -(std::log(0.2) + std::log(0.5) + std::log(0.9)) / 3, 1e-12);
    EXPECT_LT(gradient_error([](const Var<double>& v) { return attack_loss_from_dice(v); }, dice), 1e-4);
}

TEST(AttackLoss, SegmenterPathGradientAndFrozenTarget) {
    const Segmenter<double> seg(seg_arch::kPlain, 3, 2);
    std::mt19937_64 rng(3);
    std::vector<LabelMap> labels(1, LabelMap(3, 8, 8));
    for (auto& v : labels[0].classes) v = static_cast<std::uint8_t>(rng() % 3);
    const auto target = batch_one_hot<double>(labels);
    auto fn = [&](const Var<double>& v) { return adversarial_attack_loss(seg, v, target); };
    const auto x = random_tensor({1, 3, 8, 8}, 12);
    // step kept below the spacing of leaky-relu kinks
    EXPECT_LT(gradient_error(fn, x, 7, 1e-6), 1e-4);
    for (const auto& e : seg.entries()) EXPECT_EQ(e.var.grad().max_abs(), 0.0) << e.name;
    EXPECT_FALSE(seg.frozen());
}

GeneratorTerms<double> unit_terms() {
    auto one = [] { return Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, 1.0)); };
    return {one(), one(), one(), one(), one()};
}

TEST(Objective, DefaultWeightsWithUnitTerms) {
    EXPECT_NEAR(scalar(total_generator_objective(unit_terms(), LossWeights{})), 31.05, 1e-12);
}

TEST(Objective, ZeroAttackWeightIsVanillaAndZeroWeightsIsGanOnly) {
    auto t = unit_terms();
    LossWeights w;
    w.lambda3 = 0;
    t.attack = Var<double>();
    EXPECT_NEAR(scalar(total_generator_objective(t, w)), 21.05, 1e-12);
    const LossWeights none{0, 0, 0, 0};
    EXPECT_EQ(scalar(total_generator_objective(GeneratorTerms<double>{unit_terms().g_gan, {}, {}, {}, {}}, none)), 1.0);
}

TEST(Objective, LinearInEachWeight) {
    GeneratorTerms<double> t{};
    const std::array<double, 5> vals{0.7, 1.3, 2.1, 0.4, 5.5};
    auto make = [](double v) { return Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, v)); };
    t = {make(vals[0]), make(vals[1]), make(vals[2]), make(vals[3]), make(vals[4])};
    for (int k = 0; k < 4; ++k) {
        auto at = [&](double lambda) {
            LossWeights w;
            std::array<double*, 4> f{&w.lambda0, &w.lambda1, &w.lambda2, &w.lambda3};
            *f[k] = lambda;
            return scalar(total_generator_objective(t, w));
        };
        const double f0 = at(0), f1 = at(1), f3 = at(3);
        EXPECT_NEAR(f1 - f0, vals[k + 1], 1e-12);
        EXPECT_NEAR(f3 - f0, 3 * vals[k + 1], 1e-12);
    }
}

TEST(Objective, MissingOrNonFiniteTermsAreRejected) {
    auto t = unit_terms();
    t.perceptual = Var<double>();
    EXPECT_THROW(total_generator_objective(t, LossWeights{}), std::invalid_argument);
    t = unit_terms();
    t.kld = Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, std::numeric_limits<double>::quiet_NaN()));
    try {
        (void)total_generator_objective(t, LossWeights{});
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("kld"), std::string::npos);
    }
    LossWeights neg;
    neg.lambda1 = -1;
    EXPECT_THROW(total_generator_objective(unit_terms(), neg), std::invalid_argument);
}

TEST(Losses, DoNotMutateInputs) {
    const auto real = random_feats(20);
    const auto fake = random_feats(21);
    std::vector<std::vector<double>> before;
    for (const auto* f : {&real, &fake})
        for (const auto& s : f->scales) {
            before.push_back(s.logits.value().storage());
            for (const auto& v : s.features) before.push_back(v.value().storage());
        }
    (void)gan_hinge_losses(real, fake);
    (void)feature_matching_loss(real, fake);
    std::size_t i = 0;
    for (const auto* f : {&real, &fake})
        for (const auto& s : f->scales) {
            EXPECT_EQ(s.logits.value().storage(), before[i++]);
            for (const auto& v : s.features) EXPECT_EQ(v.value().storage(), before[i++]);
        }
    const auto mu = random_tensor({1, 4, 1, 1}, 1);
    const auto sigma = random_tensor({1, 4, 1, 1}, 2, 0.5, 1.5);
    const auto m = moments(mu, sigma);
    (void)kld_loss(m);
    EXPECT_EQ(m.mu.value().storage(), mu.storage());
    EXPECT_EQ(m.sigma.value().storage(), sigma.storage());
}

TEST(LossWeights, JsonRoundTripAndValidation) {
    const LossWeights w{1, 2, 3, 4};
    const json j = w;
    const auto back = j.get<LossWeights>();
    EXPECT_EQ(back.lambda0, 1);
    EXPECT_EQ(back.lambda3, 4);
    EXPECT_THROW((LossWeights{0, 0, std::nan(""), 0}.validate()), std::invalid_argument);
}

TEST(TrainAdvspade, TargetUnchangedAndAblationTogglesRun) {
    SceneConfig sc;
    sc.seed = 0;
    const auto train = generate_dataset(sc, 8);
    const Segmenter<float> target(seg_arch::kPlain, 5, 3);
    const auto before = params_hash(export_segmenter(target));
    GanTrainConfig cfg;
    cfg.epochs = 1;
    for (const auto& w : {LossWeights{}, LossWeights{0, 10, 0.05, 10}, LossWeights{10, 0, 0.05, 10}}) {
        const auto r = train_advspade(train, target, w, cfg);
        ASSERT_EQ(r.history.size(), 1u);
        EXPECT_TRUE(std::isfinite(r.history[0].g_total));
        EXPECT_EQ(r.generator.meta.at("target_hash").get<std::string>(), hex64(before));
    }
    EXPECT_EQ(params_hash(export_segmenter(target)), before);
    EXPECT_FALSE(target.frozen());
}

}  // namespace
