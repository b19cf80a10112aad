// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Trained models and evaluations are cached as
// stage markers under the run directory, so a rerun only re-evaluates.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "advspade/harness.hpp"
#include "oracles.hpp"

using namespace advspade;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, sep);)
        if (!item.empty()) out.push_back(item);
    return out;
}

Outcome unit_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> failed;
    const auto binaries = split(ADVSPADE_UNIT_TESTS, ';');
    for (const auto& bin : binaries) {
        const std::string cmd = "\"" + bin + "\" --gtest_brief=1 > /dev/null 2>&1";
        if (std::system(cmd.c_str()) != 0) failed.push_back(fs::path(bin).filename().string());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string d = fmt("%zu binaries, %.1fs (limit 300s)", binaries.size(), secs);
    for (const auto& f : failed) d += ", failed: " + f;
    return {failed.empty() && !binaries.empty() && secs < 300, d};
}

Outcome oracle_equivalence() {
    std::mt19937_64 rng(2024);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        LabelMap gt(3, 8, 8), pred(3, 8, 8);
        for (auto& v : gt.classes) v = static_cast<std::uint8_t>(rng() % 3);
        for (auto& v : pred.classes) v = static_cast<std::uint8_t>(rng() % 3);
        const auto cm = confusion_matrix(pred, gt, 3);
        if (cm.counts != oracles::naive_confusion(pred, gt, 3)) ++mismatches;
        if (miou(cm) != oracles::set_miou(pred, gt, 3)) ++mismatches;
    }
    std::uniform_real_distribution<double> mu(-5, 5), var(0, 10);
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const double m1 = mu(rng), m2 = mu(rng), v1 = var(rng), v2 = var(rng);
        const FeatureStats a{Eigen::VectorXd::Constant(1, m1), Eigen::MatrixXd::Constant(1, 1, v1), 10};
        const FeatureStats b{Eigen::VectorXd::Constant(1, m2), Eigen::MatrixXd::Constant(1, 1, v2), 10};
        const double closed = (m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2);
        worst = std::max(worst, std::abs(fid(a, b) - closed));
    }
    return {mismatches == 0 && worst <= 1e-6,
            fmt("200 label pairs: %d mismatches; 1-D FID max error %.2e", mismatches, worst)};
}

Outcome iteration_formula() {
    const std::vector<std::pair<double, int>> want{{0.25, 1}, {1, 2}, {8, 10}, {32, 36}};
    std::string d;
    bool ok = true;
    for (auto [eps, n] : want) {
        const int got = auto_iterations(eps);
        ok = ok && got == n;
        d += fmt("eps=%g->%d ", eps, got);
    }
    return {ok, d};
}

Outcome segmenter_sanity(Run& run, const SegmenterHandle& target) {
    const double val_miou = target.params.meta.at("metrics").at("val_miou").get<double>();
    const double secs = run.stage_seconds("seg_target").value_or(0);
    return {val_miou >= 0.85 && run.spec().seg.epochs <= 30 && secs < 3 * 3600,
            fmt("val mIoU %.4f after %d epochs on %zu scenes, %.0fs (limit 3h CPU)", val_miou, run.spec().seg.epochs,
                run.train().size(), secs)};
}

double sweep_value(const json& sweep, const std::string& method, double eps, const char* field) {
    for (const auto& r : sweep.at("rows"))
        if (r.at("method") == method && r.at("epsilon").get<double>() == eps) return r.at(field).get<double>();
    throw std::runtime_error("sweep row missing: " + method);
}

Outcome attack_ordering(const json& sweep) {
    const double pgd8 = sweep_value(sweep, "pgd", 8, "miou");
    const double fgsm8 = sweep_value(sweep, "fgsm", 8, "miou");
    bool monotone = true;
    std::string d = fmt("PGD8 %.4f < FGSM8 %.4f;", pgd8, fgsm8);
    for (const std::string m : {"fgsm", "pgd"}) {
        double prev = 2;
        d += " " + m + ":";
        for (double eps : {0.25, 1.0, 8.0, 32.0}) {
            const double v = sweep_value(sweep, m, eps, "miou");
            monotone = monotone && v <= prev + 0.02;
            prev = v;
            d += fmt(" %.4f", v);
        }
    }
    return {pgd8 < fgsm8 && monotone, d};
}

Outcome core_claim(Run& run, const json& wb, const json& sweep) {
    const double adv = wb.at("advspade_miou").get<double>();
    const double van = wb.at("vanilla_miou").get<double>();
    const double succ = wb.at("advspade_success_rate").get<double>();
    const double r025 = sweep_value(sweep, "pgd", 0.25, "restricted_success_rate");
    const double r1 = sweep_value(sweep, "pgd", 1, "restricted_success_rate");
    const double secs = run.stage_seconds("gan_full").value_or(0);
    return {adv < 0.5 * van && succ > r025 && succ > r1 && secs < 4 * 3600,
            fmt("AdvSPADE mIoU %.4f < 0.5 x vanilla %.4f; success %.3f > PGD restricted %.3f (eps 0.25), %.3f (eps 1); "
                "training %.0fs",
                adv, van, succ, r025, r1, secs)};
}

Outcome quality_retention(const json& wb) {
    const double a = wb.at("advspade_fid").get<double>();
    const double v = wb.at("vanilla_fid").get<double>();
    return {a <= 1.5 * v, fmt("FID AdvSPADE %.4f <= 1.5 x vanilla %.4f (ratio %.3f)", a, v, a / v)};
}

Outcome ablation_ordering(const json& ab) {
    std::map<std::string, double> succ;
    for (const auto& r : ab.at("rows")) succ[r.at("tag").get<std::string>()] = r.at("success_rate").get<double>();
    return {succ.at("no_adv") < 0.02 && succ.at("full") > succ.at("no_fm") && succ.at("full") > succ.at("no_vgg"),
            fmt("success: full %.3f, lambda0=0 %.3f, lambda1=0 %.3f, lambda3=0 %.3f (< 0.02)", succ.at("full"),
                succ.at("no_fm"), succ.at("no_vgg"), succ.at("no_adv"))};
}

Outcome robustness_ordering(const json& rb) {
    std::map<std::string, json> rows;
    for (const auto& r : rb.at("rows")) rows[r.at("model").get<std::string>()] = r;
    const auto& und = rows.at("undefended");
    const auto& rob = rows.at("pgd_robust");
    const auto& aug = rows.at("advspade_augmented");
    const double gap = rob.at("pgd_miou").get<double>() - und.at("pgd_miou").get<double>();
    const double adv_rob = rob.at("advspade_miou").get<double>();
    const double pgd_rob = rob.at("pgd_miou").get<double>();
    const double s_und = und.at("pgd_strong_success_rate").get<double>();
    const double s_aug = aug.at("pgd_strong_success_rate").get<double>();
    return {gap > 0.1 && adv_rob < pgd_rob && s_aug < s_und,
            fmt("PGD(eps %g) mIoU robust - undefended = %.4f (> 0.1); AdvSPADE on robust %.4f < PGD on robust %.4f; "
                "PGD(eps %g) success augmented %.3f < undefended %.3f",
                rob.at("pgd_epsilon").get<double>(), gap, adv_rob, pgd_rob,
                und.at("pgd_strong_epsilon").get<double>(), s_aug, s_und)};
}

Outcome norm_ball_safety() {
    std::mt19937_64 rng(77);
    std::vector<Segmenter<float>> models;
    for (const auto& arch : seg_arch::all()) {
        models.emplace_back(arch, 5, 11);
        models.back().set_training(false);
    }
    const std::vector<double> grid{0, 0.25, 1, 8, 32};
    std::uniform_real_distribution<float> pix(-1.0f, 1.0f);
    std::uniform_real_distribution<double> unit(0, 1);
    int violations = 0;
    for (int call = 0; call < 1000; ++call) {
        const auto& seg = models[rng() % models.size()];
        const int n = 1 + static_cast<int>(rng() % 2);
        Tensor<float> x(Shape{n, 3, 16, 16});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double r = unit(rng);
            x[i] = r < 0.1 ? -1.0f : r < 0.2 ? 1.0f : pix(rng);  // saturated pixels probe range clipping
        }
        std::vector<int> y(static_cast<std::size_t>(n) * 256);
        for (auto& v : y) v = static_cast<int>(rng() % 5);
        AttackConfig cfg;
        cfg.epsilon = rng() % 3 == 0 ? unit(rng) * 40 : grid[rng() % grid.size()];
        if (rng() % 2 == 0) cfg.iterations = static_cast<int>(rng() % 13);
        if (rng() % 2 == 0) cfg.step_size = 0.1 + unit(rng) * 10;
        const bool use_fgsm = rng() % 2 == 0;
        const auto out = use_fgsm ? fgsm(seg, x, y, cfg).images : pgd(seg, x, y, cfg).images;
        const double bound = 2 * cfg.epsilon / 255 + 1e-6;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (std::abs(static_cast<double>(out[i]) - x[i]) > bound || out[i] < -1.0f || out[i] > 1.0f) {
                ++violations;
                break;
            }
        }
    }
    return {violations == 0, fmt("1000 randomized fgsm/pgd calls, %d violations", violations)};
}

}  // namespace

int main() {
    ExperimentSpec spec;
    const char* dir = std::getenv("ADVSPADE_ACCEPTANCE_DIR");
    spec.output_dir = dir ? fs::path(dir) : fs::path(ADVSPADE_ACCEPTANCE_DEFAULT_DIR);
    spec.pipeline = "acceptance";

    int failures = 0;
    auto report = [&](int id, const std::function<Outcome()>& check) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error [") + to_string(classify(e)) + "]: " + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << "CRITERION " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    };

    report(1, unit_suite);
    report(2, oracle_equivalence);
    report(3, iteration_formula);

    std::optional<Run> run;
    json wb, sweep, ab, rb;
    std::string setup_error;
    try {
        run.emplace(spec);
        wb = run_whitebox(*run);
        sweep = run_norm_sweep(*run);
        ab = run_ablation(*run);
        rb = run_robustness(*run);
        report_render(run->dir());
    } catch (const std::exception& e) {
        setup_error = std::string("pipeline error [") + to_string(classify(e)) + "]: " + e.what();
    }
    auto needs = [&](const json& j, const std::function<Outcome()>& f) {
        return [&, f]() -> Outcome {
            if (j.is_null()) return {false, setup_error};
            return f();
        };
    };
    report(4, [&]() -> Outcome {
        if (!run) return {false, setup_error};
        return segmenter_sanity(*run, run->target());
    });
    report(5, needs(sweep, [&] { return attack_ordering(sweep); }));
    report(6, needs(sweep, [&] { return core_claim(*run, wb, sweep); }));
    report(7, needs(wb, [&] { return quality_retention(wb); }));
    report(8, needs(ab, [&] { return ablation_ordering(ab); }));
    report(9, needs(rb, [&] { return robustness_ordering(rb); }));
    report(10, norm_ball_safety);

    std::cout << (failures == 0 ? "ALL CRITERIA PASS" : fmt("%d CRITERIA FAIL", failures)) << std::endl;
    return failures == 0 ? 0 : 1;
}
