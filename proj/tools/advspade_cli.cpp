#include <cstdio>
#include <cstring>
#include <iostream>

#include <CLI11.hpp>

#include "advspade/harness.hpp"

using namespace advspade;

namespace {

// Optional<T> flags need a staging value and an explicit "was it given" check.
struct OptionalFlags {
    std::string target, generator, encoder, vanilla_generator, vanilla_encoder, data_dir;
    int iterations = -1;
    double step_size = -1;
};

void add_spec_flags(CLI::App& app, ExperimentSpec& s, OptionalFlags& o) {
    app.add_option("--output-dir,-o", s.output_dir, "Run directory (locked while in use)");
    app.add_option("--data-dir", o.data_dir, "Dataset written by gen-data; generated in memory when absent");
    app.add_option("--train-count", s.data.train_count);
    app.add_option("--val-count", s.data.val_count);
    app.add_option("--num-classes", s.data.scenes.num_classes);
    app.add_option("--image-size", s.data.scenes.image_size);
    app.add_option("--min-shapes", s.data.scenes.min_shapes);
    app.add_option("--max-shapes", s.data.scenes.max_shapes);
    app.add_option("--color-jitter", s.data.scenes.color_jitter);
    app.add_option("--texture-amplitude", s.data.scenes.texture_amplitude);
    app.add_option("--noise-amplitude", s.data.scenes.noise_amplitude);
    app.add_option("--palette-scale", s.data.scenes.palette_scale);
    app.add_option("--data-seed", s.data.scenes.seed);

    app.add_option("--target", o.target, "Segmenter checkpoint to attack");
    app.add_option("--generator", o.generator, "AdvSPADE generator checkpoint");
    app.add_option("--encoder", o.encoder, "AdvSPADE encoder checkpoint");
    app.add_option("--vanilla-generator", o.vanilla_generator, "Generator trained without the attack term");
    app.add_option("--vanilla-encoder", o.vanilla_encoder);
    app.add_option("--transfer-model", s.transfer_models, "Extra segmenter checkpoint (repeatable)");
    app.add_option("--transfer-arch", s.transfer_archs, "Architectures trained for the transfer matrix")
        ->delimiter(',');

    app.add_option("--epsilon", s.attack.epsilon, "Linf bound on the 0-255 scale");
    app.add_option("--epsilons", s.epsilons, "Sweep grid")->delimiter(',');
    app.add_option("--iterations", o.iterations, "PGD iterations; automatic when omitted");
    app.add_option("--step-size", o.step_size, "PGD step on the 0-255 scale");
    app.add_option("--norm", s.attack.norm);
    app.add_option("--sweep-source", s.sweep_source)->check(CLI::IsMember({"real", "generated"}));

    app.add_option("--lambda0", s.weights.lambda0, "Feature matching weight");
    app.add_option("--lambda1", s.weights.lambda1, "Perceptual weight");
    app.add_option("--lambda2", s.weights.lambda2, "KL weight");
    app.add_option("--lambda3", s.weights.lambda3, "Attack weight");

    app.add_option("--seg-arch", s.seg.arch)->check(CLI::IsMember(seg_arch::all()));
    app.add_option("--seg-epochs", s.seg.epochs);
    app.add_option("--seg-batch-size", s.seg.batch_size);
    app.add_option("--seg-lr", s.seg.lr);
    app.add_option("--seg-beta1", s.seg.beta1);
    app.add_option("--seg-beta2", s.seg.beta2);
    app.add_option("--seg-seed", s.seg.seed);

    app.add_option("--gan-epochs", s.gan.epochs);
    app.add_option("--gan-batch-size", s.gan.batch_size);
    app.add_option("--lr-g", s.gan.lr_g);
    app.add_option("--lr-d", s.gan.lr_d);
    app.add_option("--gan-beta1", s.gan.beta1);
    app.add_option("--gan-beta2", s.gan.beta2);
    app.add_option("--gan-seed", s.gan.seed);
    app.add_option("--grid-every", s.gan.grid_every);
    app.add_option("--z-dim", s.gan.arch.z_dim);
    app.add_option("--gen-widths", s.gan.arch.widths)->delimiter(',');
    app.add_option("--spade-hidden", s.gan.arch.spade_hidden);
    app.add_option("--disc-scales", s.gan.arch.disc_scales);
    app.add_option("--disc-width", s.gan.arch.disc_width);

    app.add_option("--theta", s.eval.theta, "Per-image misclassification threshold");
    app.add_option("--fid-dim", s.eval.fid_feature_dim);
    app.add_option("--eval-seed", s.eval_seed);
    app.add_option("--grid-rows", s.grid_rows);

    app.add_option("--robust-epsilon", s.robust.train_epsilon);
    app.add_option("--robust-iterations", s.robust.train_iterations);
    app.add_option("--robust-step", s.robust.train_step);
    app.add_option("--robust-epochs", s.robust.epochs);
    app.add_option("--robust-eval-epsilon", s.robust.eval_epsilon);
    app.add_option("--augmented-eval-epsilon", s.robust.augmented_epsilon);
}

void apply_optional(const CLI::App& app, ExperimentSpec& s, const OptionalFlags& o) {
    auto set = [&](const char* flag, const std::string& v, std::optional<fs::path>& dst) {
        if (app.count(flag) > 0) dst = fs::path(v);
    };
    set("--target", o.target, s.target);
    set("--generator", o.generator, s.generator);
    set("--encoder", o.encoder, s.encoder);
    set("--vanilla-generator", o.vanilla_generator, s.vanilla_generator);
    set("--vanilla-encoder", o.vanilla_encoder, s.vanilla_encoder);
    set("--data-dir", o.data_dir, s.data.dir);
    if (app.count("--iterations") > 0) s.attack.iterations = o.iterations;
    if (app.count("--step-size") > 0) s.attack.step_size = o.step_size;
    s.eval.num_classes = s.data.scenes.num_classes;
    s.gan.arch.num_classes = s.data.scenes.num_classes;
    s.gan.arch.image_size = s.data.scenes.image_size;
}

/// A spec file, when given, supplies defaults that command-line flags
/// override; it is read before parsing so flag values win.
ExperimentSpec initial_spec(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::strcmp(argv[i], "--spec") == 0) return read_json(argv[i + 1]).get<ExperimentSpec>();
    }
    return {};
}

void print_error(ErrorClass cls, const std::string& msg) {
    json e = {{"error", to_string(cls)}, {"message", msg}};
    std::cerr << e.dump() << "\n";
}

int run_command(const std::string& cmd, ExperimentSpec spec) {
    if (cmd == "gen-data") {
        if (!spec.data.dir) throw HarnessError(ErrorClass::usage, "gen-data needs --data-dir");
        spec.data.scenes.validate();
        const auto ds = generate_split_dataset(spec.data);
        save_dataset(ds, *spec.data.dir);
        std::cout << json{{"dataset", spec.data.dir->string()}, {"train", spec.data.train_count},
                          {"val", spec.data.val_count}}.dump()
                  << "\n";
        return 0;
    }
    if (cmd == "report") {
        for (const auto& p : report_render(spec.output_dir)) std::cout << p.string() << "\n";
        return 0;
    }
    spec.pipeline = cmd;
    Run run(spec);
    json out;
    if (cmd == "train-seg") {
        const auto h = run.target();
        out = {{"checkpoint", spec.target ? spec.target->string() : (run.dir() / "models" / "target.ckpt").string()},
               {"hash", h.hash},
               {"val_miou", h.params.meta.value("metrics", json::object()).value("val_miou", json(nullptr))}};
    } else if (cmd == "train-gan") {
        const auto g = run.advspade(run.target());
        out = {{"generator", (run.dir() / "gan" / "full" / "generator.ckpt").string()},
               {"encoder", (run.dir() / "gan" / "full" / "encoder.ckpt").string()},
               {"hash", g.hash}};
    } else {
        const json report = run_pipeline(run);
        out = {{"report", (run.dir() / "reports").string()}, {"pipeline", report.at("pipeline")}};
    }
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        ExperimentSpec spec = initial_spec(argc, argv);
        OptionalFlags opt;
        CLI::App app{"Unrestricted adversarial examples for segmentation on synthetic scenes"};
        app.require_subcommand(1);
        app.fallthrough();
        std::string spec_file;
        app.add_option("--spec", spec_file, "JSON experiment spec; flags override its fields");
        const std::vector<std::pair<std::string, std::string>> commands{
            {"gen-data", "Write a synthetic dataset with train/val splits"},
            {"train-seg", "Train the target segmenter"},
            {"train-gan", "Train AdvSPADE against the target"},
            {"attack-norm", "FGSM/PGD sweep over epsilons"},
            {"attack-gan", "Generate AdvSPADE examples"},
            {"eval", "White-box evaluation: real, vanilla, AdvSPADE"},
            {"transfer", "Transfer matrix across segmenters"},
            {"ablate", "Loss ablation runs"},
            {"robust", "Adversarial and augmented training evaluation"},
            {"report", "Render markdown tables and grids from reports"}};
        std::vector<CLI::App*> subs;
        for (const auto& [name, help] : commands) {
            auto* sub = app.add_subcommand(name, help);
            add_spec_flags(*sub, spec, opt);
            subs.push_back(sub);
        }
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            print_error(ErrorClass::usage, e.what());
            return exit_code(ErrorClass::usage);
        }
        for (auto* sub : subs) {
            if (sub->parsed()) {
                apply_optional(*sub, spec, opt);
                return run_command(sub->get_name(), spec);
            }
        }
        print_error(ErrorClass::usage, "no subcommand");
        return exit_code(ErrorClass::usage);
    } catch (const std::exception& e) {
        const auto cls = classify(e);
        print_error(cls, e.what());
        return exit_code(cls);
    }
}
