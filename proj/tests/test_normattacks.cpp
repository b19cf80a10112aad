#include <gtest/gtest.h>

#include "advspade/normattacks.hpp"

using namespace advspade;

namespace {

TEST(AutoIterations, FormulaValues) {
    EXPECT_EQ(auto_iterations(8), 10);
    EXPECT_EQ(auto_iterations(32), 36);
    EXPECT_EQ(auto_iterations(0.25), 1);
    EXPECT_EQ(auto_iterations(1), 2);
    EXPECT_THROW(auto_iterations(0), std::invalid_argument);
    EXPECT_THROW(auto_iterations(-1), std::invalid_argument);
}

TEST(AttackConfig, Validation) {
    AttackConfig c;
    c.epsilon = -1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.step_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.norm = "l2";
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = AttackConfig{};
    c.epsilon = 0.25;
    EXPECT_EQ(c.resolved_step(), 0.25);
    EXPECT_EQ(c.resolved_iterations(), 1);
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
    return m;
}

bool in_range(const Tensor<float>& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](float v) { return v >= -1.0f && v <= 1.0f; });
}

/// Small trained segmenter shared by the end-to-end cases.
class Trained : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        SceneConfig sc;
        sc.seed = 0;
        const auto train = generate_dataset(sc, 100);
        val_ = new Dataset(generate_dataset(sc, 20, 500));
        SegTrainConfig cfg;
        cfg.epochs = 6;
        params_ = new ModelParams(train_segnet(train, *val_, cfg).params);
    }
    static void TearDownTestSuite() {
        delete val_;
        delete params_;
    }

    static Segmenter<float> seg() { return load_segmenter<float>(*params_); }

    static std::pair<Tensor<float>, std::vector<int>> batch(std::size_t n) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        return {batch_images(val_->items, idx), batch_labels(val_->items, idx)};
    }

    static inline Dataset* val_ = nullptr;
    static inline ModelParams* params_ = nullptr;
};

TEST_F(Trained, ZeroEpsilonIsIdentity) {
    const auto s = seg();
    auto [x, y] = batch(2);
    AttackConfig c;
    c.epsilon = 0;
    EXPECT_EQ(fgsm(s, x, y, c).images.storage(), x.storage());
    EXPECT_EQ(pgd(s, x, y, c).images.storage(), x.storage());
}

TEST_F(Trained, PerturbationStaysInBallAndRange) {
    const auto s = seg();
    auto [x, y] = batch(2);
    for (double eps : {0.25, 1.0, 8.0, 32.0}) {
        AttackConfig c;
        c.epsilon = eps;
        for (const auto& out : {fgsm(s, x, y, c).images, pgd(s, x, y, c).images}) {
            EXPECT_LE(max_abs_diff(out, x), 2 * eps / 255 + 1e-6) << eps;
            EXPECT_TRUE(in_range(out)) << eps;
        }
    }
}

TEST_F(Trained, SingleStepPgdEqualsFgsm) {
    const auto s = seg();
    auto [x, y] = batch(3);
    for (double eps : {0.25, 8.0, 32.0}) {
        AttackConfig c;
        c.epsilon = eps;
        c.iterations = 1;
        c.step_size = eps;
        EXPECT_EQ(pgd(s, x, y, c).images.storage(), fgsm(s, x, y, AttackConfig{eps}).images.storage());
    }
}

TEST_F(Trained, ContainmentAfterEveryIteration) {
    const auto s = seg();
    auto [x, y] = batch(2);
    AttackConfig c;
    c.epsilon = 4;
    c.step_size = 1.5;
    for (int k = 1; k <= 8; ++k) {
        c.iterations = k;
        const auto out = pgd(s, x, y, c).images;
        ASSERT_LE(max_abs_diff(out, x), 2 * 4.0 / 255 + 1e-6) << "iteration " << k;
        ASSERT_TRUE(in_range(out)) << "iteration " << k;
    }
}

TEST_F(Trained, DeterministicAndNonMutating) {
    const auto s = seg();
    auto [x, y] = batch(2);
    const auto x_copy = x;
    const auto before = params_hash(export_segmenter(s));
    const auto a = pgd(s, x, y, AttackConfig{8}).images;
    const auto b = pgd(s, x, y, AttackConfig{8}).images;
    EXPECT_EQ(a.storage(), b.storage());
    EXPECT_EQ(x.storage(), x_copy.storage());
    EXPECT_EQ(params_hash(export_segmenter(s)), before);
    for (const auto& e : s.entries()) EXPECT_EQ(e.var.grad().max_abs(), 0.0f) << e.name;
}

double mean_dice(const Segmenter<float>& s, const Tensor<float>& x, const Dataset& ds, std::size_t n) {
    std::vector<LabelMap> l;
    for (std::size_t i = 0; i < n; ++i) l.push_back(ds.items[i].label);
    NoGradGuard ng;
    return dice_loss_value(seg_forward(s, Var<float>(x)).value(), batch_one_hot<float>(l));
}

double mean_ce(const Segmenter<float>& s, const Tensor<float>& x, const std::vector<int>& y) {
    NoGradGuard ng;
    return cross_entropy(s.logits(Var<float>(x)), y).value()[0];
}

TEST_F(Trained, LargerFgsmBoundRaisesDice) {
    const auto s = seg();
    auto [x, y] = batch(20);
    const double small = mean_dice(s, fgsm(s, x, y, AttackConfig{0.25}).images, *val_, 20);
    const double large = mean_dice(s, fgsm(s, x, y, AttackConfig{32}).images, *val_, 20);
    EXPECT_GT(large, small);
}

TEST_F(Trained, PgdAtLeastAsStrongAsFgsm) {
    const auto s = seg();
    auto [x, y] = batch(20);
    EXPECT_GE(mean_ce(s, pgd(s, x, y, AttackConfig{8}).images, y), mean_ce(s, fgsm(s, x, y, AttackConfig{8}).images, y));
}

TEST_F(Trained, ImageOverloadsMatchBatch) {
    const auto s = seg();
    const auto& sample = val_->items[0];
    const std::vector<int> y(sample.label.classes.begin(), sample.label.classes.end());
    EXPECT_EQ(pgd(s, sample.image, sample.label, AttackConfig{8}).data.storage(),
              pgd(s, sample.image.data, y, AttackConfig{8}).images.storage());
    std::vector<ImageTensor> imgs{val_->items[0].image, val_->items[1].image, val_->items[2].image};
    std::vector<LabelMap> labs{val_->items[0].label, val_->items[1].label, val_->items[2].label};
    const auto out = attack_images(s, imgs, labs, AttackMethod::fgsm, AttackConfig{8}, 2);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[2].data.storage(), fgsm(s, imgs[2], labs[2], AttackConfig{8}).data.storage());
}

TEST(ZeroGradient, FlagSetAndInputReturned) {
    Segmenter<float> s(seg_arch::kPlain, 5);
    for (const auto& e : s.entries()) e.var.mutable_value().fill(0.0f);
    s.set_training(false);
    Tensor<float> x(Shape{2, 3, 16, 16}, 0.3f);
    const std::vector<int> y(2 * 16 * 16, 1);
    const auto out = pgd(s, x, y, AttackConfig{8});
    EXPECT_EQ(out.images.storage(), x.storage());
    EXPECT_EQ(out.zero_gradient, (std::vector<bool>{true, true}));
}

TEST(AttackMethod, RoundTrip) {
    EXPECT_EQ(attack_method_from_string(to_string(AttackMethod::pgd)), AttackMethod::pgd);
    EXPECT_EQ(attack_method_from_string("fgsm"), AttackMethod::fgsm);
    EXPECT_THROW(attack_method_from_string("cw"), std::invalid_argument);
}

}  // namespace
