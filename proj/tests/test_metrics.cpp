#include <gtest/gtest.h>

#include <random>
#include <set>

#include "advspade/metrics.hpp"
#include "oracles.hpp"

using namespace advspade;

namespace {

LabelMap random_map(int c, int h, int w, std::mt19937_64& rng) {
    LabelMap l(c, h, w);
    for (auto& v : l.classes) v = static_cast<std::uint8_t>(rng() % c);
    return l;
}

TEST(ConfusionMatrix, PerfectPredictionIsDiagonal) {
    std::mt19937_64 rng(1);
    const auto gt = random_map(4, 8, 8, rng);
    const auto m = confusion_matrix(gt, gt, 4);
    std::int64_t trace = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            if (i == j) trace += m.at(i, j);
            else EXPECT_EQ(m.at(i, j), 0);
        }
    EXPECT_EQ(trace, 64);
}

TEST(ConfusionMatrix, EntriesSumToPixelCountAndMatchNaiveLoop) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto gt = random_map(3, 8, 8, rng);
        const auto pred = random_map(3, 8, 8, rng);
        const auto m = confusion_matrix(pred, gt, 3);
        EXPECT_EQ(m.total(), 64);
        EXPECT_EQ(m.counts, oracles::naive_confusion(pred, gt, 3));
    }
}

TEST(ConfusionMatrix, RejectsMismatch) {
    EXPECT_THROW(confusion_matrix(LabelMap(3, 4, 4), LabelMap(3, 4, 5), 3), MetricError);
    LabelMap bad(3, 2, 2);
    bad.classes[0] = 7;
    EXPECT_THROW(confusion_matrix(bad, LabelMap(3, 2, 2), 3), MetricError);
}

TEST(Miou, PerfectAndDisjoint) {
    std::mt19937_64 rng(3);
    const auto gt = random_map(3, 8, 8, rng);
    EXPECT_DOUBLE_EQ(miou(confusion_matrix(gt, gt, 3)), 1.0);
    LabelMap a(2, 4, 4), b(2, 4, 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.classes[i] = i % 2;
        b.classes[i] = 1 - a.classes[i];
    }
    EXPECT_DOUBLE_EQ(miou(confusion_matrix(b, a, 2)), 0.0);
}

TEST(Miou, MatchesPixelSetOracle) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const auto gt = random_map(3, 8, 8, rng);
        const auto pred = random_map(3, 8, 8, rng);
        EXPECT_EQ(miou(confusion_matrix(pred, gt, 3)), oracles::set_miou(pred, gt, 3));
    }
}

TEST(Miou, AbsentClassesAreSkipped) {
    LabelMap gt(4, 2, 2, 0), pred(4, 2, 2, 0);
    gt.classes = {0, 0, 1, 1};
    pred.classes = {0, 0, 1, 1};
    const auto r = iou(confusion_matrix(pred, gt, 4));
    EXPECT_DOUBLE_EQ(r.miou, 1.0);
    EXPECT_TRUE(std::isnan(r.per_class[2]));
}

TEST(Miou, RejectsEmptyMatrix) { EXPECT_THROW(miou(ConfusionMatrix(3)), MetricError); }

TEST(Miou, InvariantUnderJointClassPermutation) {
    std::mt19937_64 rng(5);
    const std::array<std::uint8_t, 3> perm{2, 0, 1};
    for (int trial = 0; trial < 20; ++trial) {
        auto gt = random_map(3, 8, 8, rng);
        auto pred = random_map(3, 8, 8, rng);
        const double before = miou(confusion_matrix(pred, gt, 3));
        for (auto& v : gt.classes) v = perm[v];
        for (auto& v : pred.classes) v = perm[v];
        EXPECT_NEAR(miou(confusion_matrix(pred, gt, 3)), before, 1e-12);
    }
}

TEST(Misclassification, Counting) {
    std::mt19937_64 rng(6);
    const auto o = random_map(5, 64, 64, rng);
    EXPECT_EQ(misclassification_rate(o, o), 0.0);
    auto shifted = o;
    for (auto& v : shifted.classes) v = static_cast<std::uint8_t>((v + 1) % 5);
    EXPECT_EQ(misclassification_rate(shifted, o), 1.0);
    auto one = o;
    one.classes[100] = static_cast<std::uint8_t>((one.classes[100] + 1) % 5);
    EXPECT_EQ(misclassification_rate(one, o), 1.0 / 4096.0);
    EXPECT_THROW(misclassification_rate(LabelMap(5, 2, 2), o), MetricError);
}

/// 100x1 map with `wrong` mispredicted pixels.
std::pair<LabelMap, LabelMap> with_rate(int wrong) {
    LabelMap o(2, 1, 100, 0), p(2, 1, 100, 0);
    for (int i = 0; i < wrong; ++i) p.classes[i] = 1;
    return {p, o};
}

TEST(AdversarialSuccess, StrictThreshold) {
    const EvalConfig cfg;
    auto [p96, o96] = with_rate(96);
    EXPECT_TRUE(is_adversarial_success(p96, o96, cfg));
    auto [p95, o95] = with_rate(95);
    EXPECT_FALSE(is_adversarial_success(p95, o95, cfg));
}

TEST(AdversarialSuccess, MonotoneInTheta) {
    for (int wrong = 0; wrong <= 100; wrong += 7) {
        auto [p, o] = with_rate(wrong);
        bool prev = true;
        for (double theta = 0.0; theta <= 1.0; theta += 0.05) {
            EvalConfig cfg;
            cfg.theta = theta;
            const bool now = is_adversarial_success(p, o, cfg);
            EXPECT_FALSE(now && !prev);
            prev = now;
        }
    }
}

TEST(AdversarialSuccess, RestrictedBoundIsStrict) {
    const EvalConfig cfg;
    auto [p, o] = with_rate(100);
    ImageTensor a(1, 1), b(1, 1);
    const double eps = 7.96875;  // 2 eps / 255 = 0.0625, exact in binary
    b.data.fill(0.0625f);
    const RestrictedCheck rc{&a, &b, eps};
    EXPECT_FALSE(is_adversarial_success(p, o, cfg, rc));
    b.data.fill(0.06f);
    EXPECT_TRUE(is_adversarial_success(p, o, cfg, rc));
    auto [p2, o2] = with_rate(10);
    EXPECT_FALSE(is_adversarial_success(p2, o2, cfg, rc));
}

TEST(AdversarialSuccess, RestrictedNeedsImagePair) {
    auto [p, o] = with_rate(100);
    RestrictedCheck rc{nullptr, nullptr, 8};
    EXPECT_THROW(is_adversarial_success(p, o, EvalConfig{}, rc), MetricError);
}

TEST(SuccessRate, IsMeanOfPerImageDecisions) {
    std::vector<LabelMap> preds, oracles;
    int expected = 0;
    for (int wrong : {0, 96, 100, 50, 99, 95}) {
        auto [p, o] = with_rate(wrong);
        preds.push_back(p);
        oracles.push_back(o);
        expected += wrong > 95;
    }
    const auto r = evaluate_predictions(preds, oracles, EvalConfig{0.95, 2});
    EXPECT_EQ(r.attack_success_rate, expected / 6.0);
}

FeatureStats stats_1d(double mu, double var) {
    return {Eigen::VectorXd::Constant(1, mu), Eigen::MatrixXd::Constant(1, 1, var), 10};
}

TEST(Fid, IdenticalStatsGiveZero) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd f(50, 6);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = nd(rng);
    const auto s = feature_stats(f);
    EXPECT_NEAR(fid(s, s), 0.0, 1e-6);
}

TEST(Fid, MeanShiftWithEqualCovariance) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd f(40, 4);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = nd(rng);
    auto a = feature_stats(f);
    auto b = a;
    Eigen::VectorXd d(4);
    d << 1.0, -2.0, 0.5, 3.0;
    b.mean += d;
    EXPECT_NEAR(fid(a, b), d.squaredNorm(), 1e-6);
}

TEST(Fid, OneDimensionalClosedForm) {
    for (auto [m1, v1, m2, v2] : {std::array<double, 4>{0, 1, 1, 4}, {2.5, 0.3, -1, 0.7}, {0, 9, 0, 0}}) {
        const double expected = (m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2);
        EXPECT_NEAR(fid(stats_1d(m1, v1), stats_1d(m2, v2)), expected, 1e-6);
    }
}

TEST(Fid, SymmetricAndNonNegative) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::MatrixXd fa(30, 5), fb(30, 5);
        for (Eigen::Index i = 0; i < fa.size(); ++i) {
            fa.data()[i] = nd(rng);
            fb.data()[i] = 0.5 * nd(rng) + 0.3;
        }
        const auto a = feature_stats(fa);
        const auto b = feature_stats(fb);
        EXPECT_NEAR(fid(a, b), fid(b, a), 1e-6);
        EXPECT_GE(fid(a, b), -1e-6);
    }
}

TEST(Fid, RejectsNonPsdAndDimMismatch) {
    EXPECT_THROW(fid(stats_1d(0, -1), stats_1d(0, 1)), MetricError);
    FeatureStats two{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), 5};
    EXPECT_THROW(fid(two, stats_1d(0, 1)), MetricError);
}

TEST(EmbedForFid, DuplicatesGiveZeroCovariance) {
    const FidEmbedder<float> emb;
    ImageTensor img(16, 16);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<float> u(-1, 1);
    for (auto& v : img.data.values()) v = u(rng);
    const std::vector<ImageTensor> dup(5, img);
    const auto s = embed_for_fid(dup, emb);
    EXPECT_EQ(s.mean.size(), 64);
    EXPECT_LT(s.covariance.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(embed_for_fid(std::vector<ImageTensor>(1, img), emb), MetricError);
}

TEST(EmbedForFid, DeterministicAndPsd) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<float> u(-1, 1);
    std::vector<ImageTensor> imgs;
    for (int i = 0; i < 100; ++i) {
        ImageTensor img(16, 16);
        for (auto& v : img.data.values()) v = u(rng);
        imgs.push_back(img);
    }
    const auto a = embed_for_fid(imgs, FidEmbedder<float>(64, 0));
    const auto b = embed_for_fid(imgs, FidEmbedder<float>(64, 0));
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.covariance, b.covariance);
    EXPECT_LT((a.covariance - a.covariance.transpose()).cwiseAbs().maxCoeff(), 1e-8);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a.covariance);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
}

}  // namespace
