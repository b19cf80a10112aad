#pragma once

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include "advspade/losses.hpp"
#include "advspade/metrics.hpp"
#include "advspade/normattacks.hpp"

namespace advspade {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Errors

enum class ErrorClass { usage, config, data, checkpoint, training, io, locked, internal };

inline std::string to_string(ErrorClass c) {
    switch (c) {
        case ErrorClass::usage: return "usage";
        case ErrorClass::config: return "config";
        case ErrorClass::data: return "data";
        case ErrorClass::checkpoint: return "checkpoint";
        case ErrorClass::training: return "training";
        case ErrorClass::io: return "io";
        case ErrorClass::locked: return "locked";
        case ErrorClass::internal: return "internal";
    }
    return "internal";
}

/// Process exit status per error class; 0 is reserved for success.
inline int exit_code(ErrorClass c) {
    switch (c) {
        case ErrorClass::usage: return 2;
        case ErrorClass::config: return 3;
        case ErrorClass::data: return 4;
        case ErrorClass::checkpoint: return 5;
        case ErrorClass::training: return 6;
        case ErrorClass::io: return 7;
        case ErrorClass::locked: return 8;
        case ErrorClass::internal: return 1;
    }
    return 1;
}

class HarnessError : public std::runtime_error {
public:
    HarnessError(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
    [[nodiscard]] ErrorClass error_class() const { return cls_; }

private:
    ErrorClass cls_;
};

inline ErrorClass classify(const std::exception& e) {
    if (const auto* h = dynamic_cast<const HarnessError*>(&e)) return h->error_class();
    if (dynamic_cast<const DataError*>(&e)) return ErrorClass::data;
    if (dynamic_cast<const CheckpointError*>(&e)) return ErrorClass::checkpoint;
    if (dynamic_cast<const TrainingDiverged*>(&e) || dynamic_cast<const NonFiniteError*>(&e)) {
        return ErrorClass::training;
    }
    if (dynamic_cast<const fs::filesystem_error*>(&e) || dynamic_cast<const std::ios_base::failure*>(&e)) {
        return ErrorClass::io;
    }
    if (dynamic_cast<const json::exception*>(&e) || dynamic_cast<const std::invalid_argument*>(&e)) {
        return ErrorClass::config;
    }
    return ErrorClass::internal;
}

// ---------------------------------------------------------------------------
// Determinism mode

inline constexpr const char* kDeterminismEnv = "ADVSPADE_DETERMINISTIC";

/// On when the variable is set to anything other than "" or "0". Reports
/// then carry no wall-clock values, so reruns are byte-identical.
inline bool determinism_mode() {
    const char* v = std::getenv(kDeterminismEnv);
    return v != nullptr && *v != '\0' && std::string(v) != "0";
}

// ---------------------------------------------------------------------------
// Experiment specification

struct DataSpec {
    SceneConfig scenes;
    std::size_t train_count = 500;
    std::size_t val_count = 100;
    std::optional<fs::path> dir;  // on-disk dataset with "train" and "val" splits
};

struct RobustSpec {
    double train_epsilon = 8;
    int train_iterations = 10;
    double train_step = 1;
    int epochs = 30;
    double eval_epsilon = 8;         // robust vs undefended PGD comparison
    double augmented_epsilon = 32;   // PGD success-rate comparison for augmented training
};

struct ExperimentSpec {
    std::string pipeline = "whitebox";
    DataSpec data;
    std::optional<fs::path> target;             // segmenter under attack
    std::optional<fs::path> generator;          // AdvSPADE generator
    std::optional<fs::path> encoder;            // AdvSPADE encoder
    std::optional<fs::path> vanilla_generator;  // lambda3 = 0 generator
    std::optional<fs::path> vanilla_encoder;
    std::vector<fs::path> transfer_models;
    std::vector<std::string> transfer_archs{seg_arch::kDilated, seg_arch::kEncDec};
    AttackConfig attack;
    std::vector<double> epsilons{0.25, 1, 8, 32};
    std::string sweep_source = "real";  // real | generated (vanilla generator)
    LossWeights weights;
    SegTrainConfig seg;
    GanTrainConfig gan;
    EvalConfig eval;
    RobustSpec robust;
    std::uint64_t eval_seed = 123;
    std::size_t grid_rows = 4;
    fs::path output_dir = "runs/default";

    /// Launch-time checks; every referenced path must exist.
    void validate() const {
        auto must_exist = [](const std::optional<fs::path>& p, const char* what) {
            if (p && !fs::exists(*p)) {
                throw HarnessError(ErrorClass::checkpoint, std::string(what) + " not found: " + p->string());
            }
        };
        must_exist(target, "target checkpoint");
        must_exist(generator, "generator checkpoint");
        must_exist(encoder, "encoder checkpoint");
        must_exist(vanilla_generator, "vanilla generator checkpoint");
        must_exist(vanilla_encoder, "vanilla encoder checkpoint");
        if (generator.has_value() != encoder.has_value()) {
            throw HarnessError(ErrorClass::config, "generator and encoder checkpoints must be given together");
        }
        if (vanilla_generator.has_value() != vanilla_encoder.has_value()) {
            throw HarnessError(ErrorClass::config, "vanilla generator and encoder checkpoints must be given together");
        }
        for (const auto& p : transfer_models) must_exist(p, "transfer model");
        if (data.dir && !fs::exists(*data.dir / "meta.json")) {
            throw HarnessError(ErrorClass::data, "dataset directory has no meta.json: " + data.dir->string());
        }
        if (epsilons.empty()) throw HarnessError(ErrorClass::config, "epsilon list is empty");
        for (double e : epsilons) {
            if (!(e > 0)) throw HarnessError(ErrorClass::config, "epsilons must be > 0");
        }
        if (sweep_source != "real" && sweep_source != "generated") {
            throw HarnessError(ErrorClass::config, "sweep source must be real or generated, got " + sweep_source);
        }
        if (data.train_count == 0 || data.val_count < 2) {
            throw HarnessError(ErrorClass::config, "need at least 1 training and 2 validation scenes");
        }
        attack.validate();
        weights.validate();
        seg.validate();
        gan.validate();
        eval.validate();
    }
};

namespace detail {
inline std::string eps_tag(double eps) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", eps);
    return buf;
}
inline json opt_path(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }
inline std::optional<fs::path> path_opt(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return fs::path(j.at(key).get<std::string>());
}
}  // namespace detail

inline void to_json(json& j, const ExperimentSpec& s) {
    std::vector<std::string> models;
    for (const auto& p : s.transfer_models) models.push_back(p.string());
    json scenes = s.data.scenes;
    json attack = s.attack;
    json weights = s.weights;
    json seg = s.seg;
    json gan = s.gan;
    j = {{"pipeline", s.pipeline},
         {"data",
          {{"scenes", scenes},
           {"train_count", s.data.train_count},
           {"val_count", s.data.val_count},
           {"dir", detail::opt_path(s.data.dir)}}},
         {"target", detail::opt_path(s.target)},
         {"generator", detail::opt_path(s.generator)},
         {"encoder", detail::opt_path(s.encoder)},
         {"vanilla_generator", detail::opt_path(s.vanilla_generator)},
         {"vanilla_encoder", detail::opt_path(s.vanilla_encoder)},
         {"transfer_models", models},
         {"transfer_archs", s.transfer_archs},
         {"attack", attack},
         {"epsilons", s.epsilons},
         {"sweep_source", s.sweep_source},
         {"weights", weights},
         {"seg", seg},
         {"gan", gan},
         {"eval", {{"theta", s.eval.theta}, {"num_classes", s.eval.num_classes}, {"fid_feature_dim", s.eval.fid_feature_dim}}},
         {"robust",
          {{"train_epsilon", s.robust.train_epsilon},
           {"train_iterations", s.robust.train_iterations},
           {"train_step", s.robust.train_step},
           {"epochs", s.robust.epochs},
           {"eval_epsilon", s.robust.eval_epsilon},
           {"augmented_epsilon", s.robust.augmented_epsilon}}},
         {"eval_seed", s.eval_seed},
         {"grid_rows", s.grid_rows},
         {"output_dir", s.output_dir.string()}};
}

/// Missing keys keep their defaults, so partial spec files are accepted.
inline void from_json(const json& j, ExperimentSpec& s) {
    s.pipeline = j.value("pipeline", s.pipeline);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (d.contains("scenes")) s.data.scenes = d.at("scenes").get<SceneConfig>();
        s.data.train_count = d.value("train_count", s.data.train_count);
        s.data.val_count = d.value("val_count", s.data.val_count);
        s.data.dir = detail::path_opt(d, "dir");
    }
    s.target = detail::path_opt(j, "target");
    s.generator = detail::path_opt(j, "generator");
    s.encoder = detail::path_opt(j, "encoder");
    s.vanilla_generator = detail::path_opt(j, "vanilla_generator");
    s.vanilla_encoder = detail::path_opt(j, "vanilla_encoder");
    if (j.contains("transfer_models")) {
        s.transfer_models.clear();
        for (const auto& p : j.at("transfer_models")) s.transfer_models.emplace_back(p.get<std::string>());
    }
    if (j.contains("transfer_archs")) s.transfer_archs = j.at("transfer_archs").get<std::vector<std::string>>();
    if (j.contains("attack")) {
        const auto& a = j.at("attack");
        s.attack.epsilon = a.value("epsilon", s.attack.epsilon);
        if (a.contains("iterations") && a.at("iterations").is_number()) s.attack.iterations = a.at("iterations").get<int>();
        if (a.contains("step_size")) s.attack.step_size = a.at("step_size").get<double>();
        s.attack.norm = a.value("norm", s.attack.norm);
    }
    if (j.contains("epsilons")) s.epsilons = j.at("epsilons").get<std::vector<double>>();
    s.sweep_source = j.value("sweep_source", s.sweep_source);
    if (j.contains("weights")) s.weights = j.at("weights").get<LossWeights>();
    if (j.contains("seg")) s.seg = j.at("seg").get<SegTrainConfig>();
    if (j.contains("gan")) s.gan = j.at("gan").get<GanTrainConfig>();
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        s.eval.theta = e.value("theta", s.eval.theta);
        s.eval.num_classes = e.value("num_classes", s.eval.num_classes);
        s.eval.fid_feature_dim = e.value("fid_feature_dim", s.eval.fid_feature_dim);
    }
    if (j.contains("robust")) {
        const auto& r = j.at("robust");
        s.robust.train_epsilon = r.value("train_epsilon", s.robust.train_epsilon);
        s.robust.train_iterations = r.value("train_iterations", s.robust.train_iterations);
        s.robust.train_step = r.value("train_step", s.robust.train_step);
        s.robust.epochs = r.value("epochs", s.robust.epochs);
        s.robust.eval_epsilon = r.value("eval_epsilon", s.robust.eval_epsilon);
        s.robust.augmented_epsilon = r.value("augmented_epsilon", s.robust.augmented_epsilon);
    }
    s.eval_seed = j.value("eval_seed", s.eval_seed);
    s.grid_rows = j.value("grid_rows", s.grid_rows);
    if (j.contains("output_dir")) s.output_dir = j.at("output_dir").get<std::string>();
}

/// Train and val scenes with index-disjoint seeds, as one dataset with
/// "train" and "val" split manifests.
inline Dataset generate_split_dataset(const DataSpec& d) {
    Dataset ds = generate_dataset(d.scenes, d.train_count + d.val_count, 0);
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        ds.splits[i < d.train_count ? "train" : "val"].push_back(ds.items[i].id);
    }
    return ds;
}

inline std::uint64_t json_hash(const json& j) {
    const std::string s = j.dump();
    return fnv1a(s.data(), s.size());
}

inline std::uint64_t file_hash(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw HarnessError(ErrorClass::io, "cannot read " + p.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a(bytes.data(), bytes.size());
}

/// Writes via a temporary sibling and rename, so readers never see a
/// partial file.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw HarnessError(ErrorClass::io, "cannot write " + tmp.string());
        out << text;
        if (!out) throw HarnessError(ErrorClass::io, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw HarnessError(ErrorClass::io, "cannot read " + path.string());
    return json::parse(in);
}

// ---------------------------------------------------------------------------
// Run context: lock, stage markers, provenance

/// Exclusive claim on an output directory. A lock left by a dead process is
/// taken over.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const std::string pid = std::to_string(::getpid());
                [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                held_ = true;
                return;
            }
            if (holder_alive()) break;
            fs::remove(path_);
        }
        throw HarnessError(ErrorClass::locked, "output directory is in use by another run: " + dir.string());
    }
    ~DirectoryLock() {
        if (held_) {
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    [[nodiscard]] bool holder_alive() const {
        std::ifstream in(path_);
        long pid = 0;
        if (!(in >> pid) || pid <= 0) return false;
        return ::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM;
    }

    fs::path path_;
    bool held_ = false;
};

struct SegmenterHandle {
    ModelParams params;
    std::string hash;
};

struct GanHandle {
    ModelParams generator;
    ModelParams encoder;
    std::string hash;
};

class Run {
public:
    explicit Run(ExperimentSpec spec) : spec_(std::move(spec)), lock_((spec_.validate(), spec_.output_dir)) {
        json sj = spec_;
        json keyed = sj;
        keyed.erase("output_dir");
        config_hash_ = hex64(json_hash(keyed));
        write_text_atomic(dir() / "spec.json", sj.dump(2) + "\n");
        for (const auto& [name, p] : input_paths()) input_hashes_[name] = file_hash(p);
    }

    Run(const Run&) = delete;
    Run& operator=(const Run&) = delete;

    [[nodiscard]] const ExperimentSpec& spec() const { return spec_; }
    [[nodiscard]] const fs::path& dir() const { return spec_.output_dir; }
    [[nodiscard]] const std::string& config_hash() const { return config_hash_; }

    const Dataset& train() {
        load_data();
        return *train_;
    }
    const Dataset& val() {
        load_data();
        return *val_;
    }

    /// Runs `fn` unless a completion marker for `name` exists. The marker
    /// stores the stage result and the key it was computed under; a marker
    /// with a different key is an error rather than silently reused.
    template <typename Fn>
    json stage(const std::string& name, const json& key, Fn&& fn) {
        const fs::path marker = dir() / "stages" / (name + ".json");
        const std::string key_hash = hex64(json_hash(key));
        if (fs::exists(marker)) {
            const json m = read_json(marker);
            if (m.at("key_hash").get<std::string>() != key_hash) {
                throw HarnessError(ErrorClass::config, "stage '" + name + "' in " + dir().string() +
                                                           " was completed under a different configuration");
            }
            stages_resumed_.push_back(name);
            return m.at("result");
        }
        const auto t0 = std::chrono::steady_clock::now();
        json result = fn();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timing_[name] = secs;
        write_text_atomic(marker, json{{"stage", name}, {"key_hash", key_hash}, {"result", result}}.dump(2) + "\n");
        write_timing();
        return result;
    }

    [[nodiscard]] const std::vector<std::string>& resumed_stages() const { return stages_resumed_; }

    /// Seconds recorded for a stage in this or an earlier invocation.
    [[nodiscard]] std::optional<double> stage_seconds(const std::string& name) const {
        const auto t = read_timing();
        if (t.contains(name)) return t.at(name).get<double>();
        return std::nullopt;
    }

    void note_checkpoint(const std::string& name, const std::string& hash) { checkpoint_hashes_[name] = hash; }

    json provenance() const {
        json seeds = {{"scenes", spec_.data.scenes.seed},
                      {"segmenter", spec_.seg.seed},
                      {"gan", spec_.gan.seed},
                      {"eval", spec_.eval_seed}};
        json hashes = json::object();
        for (const auto& [k, v] : checkpoint_hashes_) hashes[k] = v;
        json inputs = json::object();
        for (const auto& [k, v] : input_hashes_) inputs[k] = hex64(v);
        return {{"seeds", seeds},
                {"config_hash", config_hash_},
                {"checkpoint_hashes", hashes},
                {"input_file_hashes", inputs},
                {"determinism_mode", determinism_mode()}};
    }

    /// Writes reports/<name>.json. Wall-clock is included only outside
    /// determinism mode; timing.json always has it.
    fs::path write_report(const std::string& name, json report) {
        verify_inputs_unchanged();
        report["provenance"] = provenance();
        if (!determinism_mode()) report["wall_clock_seconds"] = read_timing();
        const fs::path p = dir() / "reports" / (name + ".json");
        write_text_atomic(p, report.dump(2) + "\n");
        return p;
    }

    // -- shared model stages ------------------------------------------------

    SegmenterHandle target() {
        if (spec_.target) return load_segmenter_file("target", *spec_.target);
        return train_segmenter("target", spec_.seg, train());
    }

    SegmenterHandle train_segmenter(const std::string& tag, const SegTrainConfig& cfg, const Dataset& data,
                                    const BatchTransform& transform = {}, const json& extra_key = json::object()) {
        json cfg_json = cfg;
        const json key{{"config", cfg_json}, {"data", data_key()}, {"extra", extra_key}};
        const fs::path path = dir() / "models" / (tag + ".ckpt");
        stage("seg_" + tag, key, [&] {
            auto r = train_segnet(data, val(), cfg, transform);
            save_checkpoint(r.params, path);
            return json{{"path", path.string()},
                        {"hash", hex64(params_hash(r.params))},
                        {"val_miou", r.params.meta.at("metrics").at("val_miou")}};
        });
        return load_segmenter_file(tag, path);
    }

    /// AdvSPADE training against `target`; tag names the stage and folder.
    GanHandle train_gan(const std::string& tag, const LossWeights& w, const SegmenterHandle& target) {
        json wj = w;
        json gj = spec_.gan;
        const json key{{"weights", wj}, {"gan", gj}, {"target", target.hash}, {"data", data_key()}};
        const fs::path out = dir() / "gan" / tag;
        stage("gan_" + tag, key, [&] {
            fs::create_directories(out);
            const auto seg = load_segmenter<float>(target.params);
            GanTrainHooks hooks;
            hooks.output_dir = out;
            hooks.deterministic_log = determinism_mode();
            auto r = train_advspade(train(), seg, w, spec_.gan, hooks);
            save_checkpoint(r.generator, out / "generator.ckpt");
            save_checkpoint(r.encoder, out / "encoder.ckpt");
            save_checkpoint(r.discriminator, out / "discriminator.ckpt");
            return json{{"generator", (out / "generator.ckpt").string()},
                        {"encoder", (out / "encoder.ckpt").string()},
                        {"hash", hex64(params_hash(r.generator))}};
        });
        return load_gan_files(tag, out / "generator.ckpt", out / "encoder.ckpt");
    }

    GanHandle advspade(const SegmenterHandle& target) {
        if (spec_.generator) return load_gan_files("advspade", *spec_.generator, *spec_.encoder);
        return train_gan("full", spec_.weights, target);
    }

    GanHandle vanilla(const SegmenterHandle& target) {
        if (spec_.vanilla_generator) return load_gan_files("vanilla", *spec_.vanilla_generator, *spec_.vanilla_encoder);
        LossWeights w = spec_.weights;
        w.lambda3 = 0;
        return train_gan("no_adv", w, target);
    }

    SegmenterHandle load_segmenter_file(const std::string& name, const fs::path& p) {
        if (!fs::exists(p)) throw HarnessError(ErrorClass::checkpoint, name + " checkpoint not found: " + p.string());
        auto params = load_checkpoint(p);
        if (params.role != Role::segmenter) {
            throw HarnessError(ErrorClass::checkpoint, name + " checkpoint " + p.string() + " is not a segmenter");
        }
        const std::string h = hex64(params_hash(params));
        note_checkpoint(name, h);
        return {std::move(params), h};
    }

    GanHandle load_gan_files(const std::string& name, const fs::path& g, const fs::path& e) {
        for (const auto& p : {g, e}) {
            if (!fs::exists(p)) throw HarnessError(ErrorClass::checkpoint, name + " checkpoint not found: " + p.string());
        }
        GanHandle h{load_checkpoint(g), load_checkpoint(e), {}};
        if (h.generator.role != Role::generator || h.encoder.role != Role::encoder) {
            throw HarnessError(ErrorClass::checkpoint, name + ": expected generator and encoder checkpoints");
        }
        h.hash = hex64(params_hash(h.generator));
        note_checkpoint(name + ".generator", h.hash);
        note_checkpoint(name + ".encoder", hex64(params_hash(h.encoder)));
        return h;
    }

    [[nodiscard]] json data_key() const {
        if (spec_.data.dir) return {{"dir", spec_.data.dir->string()}, {"hash", input_hashes_.count("dataset") ? hex64(input_hashes_.at("dataset")) : ""}};
        json sc = spec_.data.scenes;
        return {{"scenes", sc}, {"train", spec_.data.train_count}, {"val", spec_.data.val_count}};
    }

private:
    [[nodiscard]] std::map<std::string, fs::path> input_paths() const {
        std::map<std::string, fs::path> out;
        if (spec_.target) out["target"] = *spec_.target;
        if (spec_.generator) out["generator"] = *spec_.generator;
        if (spec_.encoder) out["encoder"] = *spec_.encoder;
        if (spec_.vanilla_generator) out["vanilla_generator"] = *spec_.vanilla_generator;
        if (spec_.vanilla_encoder) out["vanilla_encoder"] = *spec_.vanilla_encoder;
        for (std::size_t i = 0; i < spec_.transfer_models.size(); ++i) {
            out["transfer_" + std::to_string(i)] = spec_.transfer_models[i];
        }
        if (spec_.data.dir) out["dataset"] = *spec_.data.dir / "meta.json";
        return out;
    }

    void verify_inputs_unchanged() const {
        for (const auto& [name, p] : input_paths()) {
            if (file_hash(p) != input_hashes_.at(name)) {
                throw HarnessError(ErrorClass::internal, "input " + name + " changed during the run: " + p.string());
            }
        }
    }

    void load_data() {
        if (train_) return;
        if (spec_.data.dir) {
            const auto ds = load_dataset(*spec_.data.dir);
            train_ = ds.subset("train");
            val_ = ds.subset("val");
        } else {
            train_ = generate_dataset(spec_.data.scenes, spec_.data.train_count, 0);
            val_ = generate_dataset(spec_.data.scenes, spec_.data.val_count, spec_.data.train_count);
        }
        if (train_->empty() || val_->size() < 2) throw HarnessError(ErrorClass::data, "dataset splits are too small");
    }

    [[nodiscard]] json read_timing() const {
        const fs::path p = dir() / "timing.json";
        json t = fs::exists(p) ? read_json(p) : json::object();
        for (const auto& [k, v] : timing_) t[k] = v;
        return t;
    }

    void write_timing() const { write_text_atomic(dir() / "timing.json", read_timing().dump(2) + "\n"); }

    ExperimentSpec spec_;
    DirectoryLock lock_;
    std::string config_hash_;
    std::optional<Dataset> train_, val_;
    std::map<std::string, double> timing_;
    std::map<std::string, std::string> checkpoint_hashes_;
    std::map<std::string, std::uint64_t> input_hashes_;
    std::vector<std::string> stages_resumed_;
};

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<ImageTensor> images_of(const Dataset& ds) {
    std::vector<ImageTensor> out;
    out.reserve(ds.size());
    for (const auto& s : ds.items) out.push_back(s.image);
    return out;
}

inline std::vector<LabelMap> labels_of(const Dataset& ds) {
    std::vector<LabelMap> out;
    out.reserve(ds.size());
    for (const auto& s : ds.items) out.push_back(s.label);
    return out;
}

/// FID reference statistics for one real image set.
struct FidReference {
    FidEmbedder<float> embedder;
    FeatureStats real;

    FidReference(std::span<const ImageTensor> real_images, int feature_dim)
        : embedder(feature_dim, 0), real(embed_for_fid(real_images, embedder)) {}

    [[nodiscard]] double operator()(std::span<const ImageTensor> images) const {
        return fid(real, embed_for_fid(images, embedder));
    }
};

/// mIoU, unrestricted success rate and (optionally) FID for an image set.
inline json evaluate_set(const Segmenter<float>& seg, std::span<const ImageTensor> images,
                         std::span<const LabelMap> oracles, const EvalConfig& cfg, const FidReference* ref = nullptr) {
    const auto preds = predict_batch(seg, images);
    auto r = evaluate_predictions(preds, oracles, cfg);
    if (ref) r.fid = (*ref)(images);
    json j = to_json_value(r);
    j.erase("per_image_misclassification");
    double sum = 0;
    for (double v : r.per_image_misclassification) sum += v;
    j["mean_misclassification"] = sum / static_cast<double>(r.per_image_misclassification.size());
    return j;
}

/// Success rate under the norm-restricted predicate. The bound gets a 1e-4
/// slack on the 0-255 scale because projected attacks land on the ball
/// surface while the predicate is strict.
inline double restricted_success_rate(std::span<const LabelMap> preds, std::span<const LabelMap> oracles,
                                      std::span<const ImageTensor> originals, std::span<const ImageTensor> adv,
                                      const EvalConfig& cfg, double epsilon) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const RestrictedCheck rc{&originals[i], &adv[i], epsilon + 1e-4};
        hits += is_adversarial_success(preds[i], oracles[i], cfg, rc) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline std::vector<ImageTensor> synthesize_for(const GanHandle& g, const Dataset& ds, std::uint64_t seed) {
    const auto gen = load_generator<float>(g.generator);
    const auto enc = load_encoder<float>(g.encoder);
    return synthesize(gen, enc, ds.items, seed);
}

/// Saves the first rows of each method's images and predictions for
/// report_render; returns the sample manifest with paths relative to root.
inline json save_samples(const fs::path& root, const fs::path& sub, const std::vector<std::pair<std::string, std::vector<ImageTensor>>>& methods,
                         const Segmenter<float>& seg, std::span<const LabelMap> labels, std::size_t rows) {
    rows = std::min(rows, labels.size());
    const fs::path dir = root / sub;
    json manifest = {{"rows", rows}, {"labels", json::array()}, {"methods", json::array()}};
    for (std::size_t i = 0; i < rows; ++i) {
        const auto p = dir / "labels" / (std::to_string(i) + ".png");
        fs::create_directories(p.parent_path());
        save_image_png(label_to_image(labels[i]), p);
        manifest["labels"].push_back(fs::relative(p, root).string());
    }
    for (const auto& [name, images] : methods) {
        json m = {{"name", name}, {"images", json::array()}, {"predictions", json::array()}};
        const std::vector<ImageTensor> head(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(rows));
        const auto preds = predict_batch(seg, std::span<const ImageTensor>(head));
        for (std::size_t i = 0; i < rows; ++i) {
            const auto ip = dir / name / ("image_" + std::to_string(i) + ".png");
            const auto pp = dir / name / ("pred_" + std::to_string(i) + ".png");
            fs::create_directories(ip.parent_path());
            save_image_png(head[i], ip);
            save_image_png(label_to_image(preds[i]), pp);
            m["images"].push_back(fs::relative(ip, root).string());
            m["predictions"].push_back(fs::relative(pp, root).string());
        }
        manifest["methods"].push_back(m);
    }
    return manifest;
}

// ---------------------------------------------------------------------------
// Pipelines

/// Real, vanilla-generator and AdvSPADE sets against the white-box target.
inline json run_whitebox(Run& run) {
    const auto& spec = run.spec();
    const auto target = run.target();
    const auto adv = run.advspade(target);
    const auto van = run.vanilla(target);
    const json key{{"target", target.hash}, {"advspade", adv.hash}, {"vanilla", van.hash},
                   {"eval_seed", spec.eval_seed}, {"theta", spec.eval.theta}, {"data", run.data_key()}};
    const json result = run.stage("eval_whitebox", key, [&] {
        const auto seg = load_segmenter<float>(target.params);
        const auto& val = run.val();
        const auto reals = images_of(val);
        const auto labels = labels_of(val);
        const FidReference ref(reals, spec.eval.fid_feature_dim);
        const auto adv_imgs = synthesize_for(adv, val, spec.eval_seed);
        const auto van_imgs = synthesize_for(van, val, spec.eval_seed);
        json r;
        r["real"] = evaluate_set(seg, reals, labels, spec.eval);
        r["vanilla"] = evaluate_set(seg, van_imgs, labels, spec.eval, &ref);
        r["advspade"] = evaluate_set(seg, adv_imgs, labels, spec.eval, &ref);
        r["samples"] = save_samples(run.dir(), fs::path("samples") / "whitebox",
                                    {{"real", reals}, {"vanilla", van_imgs}, {"advspade", adv_imgs}}, seg, labels,
                                    spec.grid_rows);
        return r;
    });
    json report = {{"pipeline", "whitebox"},
                   {"target_arch", target.params.arch},
                   {"images", run.val().size()},
                   {"theta", spec.eval.theta},
                   {"real_miou", result["real"]["miou"]},
                   {"vanilla_miou", result["vanilla"]["miou"]},
                   {"advspade_miou", result["advspade"]["miou"]},
                   {"vanilla_success_rate", result["vanilla"]["attack_success_rate"]},
                   {"advspade_success_rate", result["advspade"]["attack_success_rate"]},
                   {"vanilla_fid", result["vanilla"]["fid"]},
                   {"advspade_fid", result["advspade"]["fid"]},
                   {"sets", result}};
    run.write_report("whitebox", report);
    return report;
}

/// Every model scored on the same AdvSPADE and vanilla sets, which were
/// generated against the white-box target only.
inline json run_transfer_matrix(Run& run) {
    const auto& spec = run.spec();
    const auto target = run.target();
    const auto adv = run.advspade(target);
    const auto van = run.vanilla(target);
    std::vector<std::pair<std::string, SegmenterHandle>> models{{"target", target}};
    for (std::size_t i = 0; i < spec.transfer_models.size(); ++i) {
        models.emplace_back("model" + std::to_string(i),
                            run.load_segmenter_file("transfer_" + std::to_string(i), spec.transfer_models[i]));
    }
    if (spec.transfer_models.empty()) {
        for (const auto& arch : spec.transfer_archs) {
            SegTrainConfig cfg = spec.seg;
            cfg.arch = arch;
            models.emplace_back(arch, run.train_segmenter("transfer_" + arch, cfg, run.train()));
        }
    }
    if (models.size() < 2) throw HarnessError(ErrorClass::config, "transfer matrix needs at least two models");
    json warnings = json::array();
    std::map<std::string, int> arch_count;
    for (const auto& [name, m] : models) {
        if (++arch_count[m.params.arch] == 2) warnings.push_back("duplicate architecture id " + m.params.arch);
    }
    json hashes = json::array();
    for (const auto& [name, m] : models) hashes.push_back(m.hash);
    const json key{{"models", hashes}, {"advspade", adv.hash}, {"vanilla", van.hash}, {"eval_seed", spec.eval_seed},
                   {"theta", spec.eval.theta}, {"data", run.data_key()}};
    const json rows = run.stage("eval_transfer", key, [&] {
        const auto& val = run.val();
        const auto labels = labels_of(val);
        const auto reals = images_of(val);
        const auto adv_imgs = synthesize_for(adv, val, spec.eval_seed);
        const auto van_imgs = synthesize_for(van, val, spec.eval_seed);
        json out = json::array();
        for (std::size_t i = 0; i < models.size(); ++i) {
            const auto seg = load_segmenter<float>(models[i].second.params);
            const auto a = evaluate_set(seg, adv_imgs, labels, spec.eval);
            const auto v = evaluate_set(seg, van_imgs, labels, spec.eval);
            const auto r = evaluate_set(seg, reals, labels, spec.eval);
            out.push_back({{"model", models[i].first},
                           {"arch", models[i].second.params.arch},
                           {"whitebox", i == 0},
                           {"real_miou", r["miou"]},
                           {"vanilla_miou", v["miou"]},
                           {"advspade_miou", a["miou"]},
                           {"advspade_success_rate", a["attack_success_rate"]}});
        }
        return out;
    });
    json report = {{"pipeline", "transfer"},
                   {"images", run.val().size()},
                   {"metrics", {"real_miou", "vanilla_miou", "advspade_miou", "advspade_success_rate"}},
                   {"rows", rows},
                   {"warnings", warnings}};
    run.write_report("transfer", report);
    return report;
}

/// FGSM and PGD at each epsilon against the target, on real or vanilla
/// generated images, plus the AdvSPADE row for comparison when available.
inline json run_norm_sweep(Run& run, bool include_advspade = true) {
    const auto& spec = run.spec();
    const auto target = run.target();
    std::optional<GanHandle> van;
    if (spec.sweep_source == "generated") van = run.vanilla(target);
    const json key{{"target", target.hash}, {"epsilons", spec.epsilons}, {"source", spec.sweep_source},
                   {"vanilla", van ? van->hash : ""}, {"eval_seed", spec.eval_seed}, {"theta", spec.eval.theta},
                   {"iterations", spec.attack.iterations ? json(*spec.attack.iterations) : json("auto")},
                   {"step", spec.attack.step_size ? json(*spec.attack.step_size) : json("default")},
                   {"data", run.data_key()}};
    const json rows = run.stage("norm_sweep_" + spec.sweep_source, key, [&] {
        const auto seg = load_segmenter<float>(target.params);
        const auto& val = run.val();
        const auto labels = labels_of(val);
        const auto reals = images_of(val);
        const auto source = van ? synthesize_for(*van, val, spec.eval_seed) : reals;
        const FidReference ref(reals, spec.eval.fid_feature_dim);
        json out = json::array();
        for (const auto method : {AttackMethod::fgsm, AttackMethod::pgd}) {
            for (double eps : spec.epsilons) {
                AttackConfig cfg = spec.attack;
                cfg.epsilon = eps;
                const auto adv = attack_images(seg, source, labels, method, cfg);
                const fs::path png_dir = run.dir() / "adv_norm" / (to_string(method) + "_eps" + detail::eps_tag(eps));
                json manifest = json::array();
                for (std::size_t i = 0; i < adv.size(); ++i) {
                    const auto p = png_dir / (val.items[i].id + ".png");
                    save_image_png(adv[i], p);
                    manifest.push_back({{"id", val.items[i].id}, {"image", p.filename().string()}});
                }
                write_text_atomic(png_dir / "manifest.json", manifest.dump(2) + "\n");
                auto r = evaluate_set(seg, adv, labels, spec.eval, &ref);
                const auto preds = predict_batch(seg, std::span<const ImageTensor>(adv));
                r["restricted_success_rate"] = restricted_success_rate(preds, labels, source, adv, spec.eval, eps);
                r["method"] = to_string(method);
                r["epsilon"] = eps;
                r["iterations"] = method == AttackMethod::fgsm ? 1 : cfg.resolved_iterations();
                r["examples_dir"] = fs::relative(png_dir, run.dir()).string();
                out.push_back(r);
            }
        }
        return out;
    });
    json report = {{"pipeline", "norm_sweep"},
                   {"source", spec.sweep_source},
                   {"images", run.val().size()},
                   {"epsilons", spec.epsilons},
                   {"rows", rows}};
    if (include_advspade && (spec.generator || fs::exists(run.dir() / "stages" / "gan_full.json"))) {
        const auto adv = run.advspade(target);
        const json akey{{"target", target.hash}, {"advspade", adv.hash}, {"eval_seed", spec.eval_seed},
                        {"theta", spec.eval.theta}, {"data", run.data_key()}};
        report["advspade"] = run.stage("eval_advspade_only", akey, [&] {
            const auto seg = load_segmenter<float>(target.params);
            const auto& val = run.val();
            const auto reals = images_of(val);
            const FidReference ref(reals, spec.eval.fid_feature_dim);
            return evaluate_set(seg, synthesize_for(adv, val, spec.eval_seed), labels_of(val), spec.eval, &ref);
        });
    }
    run.write_report("norm_sweep", report);
    return report;
}

/// Full model and the three single-term ablations.
inline json run_ablation(Run& run) {
    const auto& spec = run.spec();
    const auto target = run.target();
    struct Variant {
        std::string tag, label;
        LossWeights w;
    };
    std::vector<Variant> variants;
    variants.push_back({"full", "full", spec.weights});
    auto zeroed = [&](double LossWeights::*field) {
        LossWeights w = spec.weights;
        w.*field = 0;
        return w;
    };
    variants.push_back({"no_fm", "lambda0=0", zeroed(&LossWeights::lambda0)});
    variants.push_back({"no_vgg", "lambda1=0", zeroed(&LossWeights::lambda1)});
    variants.push_back({"no_adv", "lambda3=0", zeroed(&LossWeights::lambda3)});
    json rows = json::array();
    for (const auto& v : variants) {
        const auto g = run.train_gan(v.tag, v.w, target);
        const json key{{"target", target.hash}, {"generator", g.hash}, {"eval_seed", spec.eval_seed},
                       {"theta", spec.eval.theta}, {"data", run.data_key()}};
        auto r = run.stage("eval_ablation_" + v.tag, key, [&] {
            const auto seg = load_segmenter<float>(target.params);
            const auto& val = run.val();
            const auto reals = images_of(val);
            const FidReference ref(reals, spec.eval.fid_feature_dim);
            return evaluate_set(seg, synthesize_for(g, val, spec.eval_seed), labels_of(val), spec.eval, &ref);
        });
        json wj = v.w;
        rows.push_back({{"variant", v.label},
                        {"tag", v.tag},
                        {"weights", wj},
                        {"fid", r["fid"]},
                        {"miou", r["miou"]},
                        {"success_rate", r["attack_success_rate"]},
                        {"mean_misclassification", r["mean_misclassification"]}});
    }
    json report = {{"pipeline", "ablation"}, {"images", run.val().size()}, {"rows", rows}};
    run.write_report("ablation", report);
    return report;
}

/// PGD adversarial training, AdvSPADE against the robust model, and
/// AdvSPADE-augmented training.
inline json run_robustness(Run& run) {
    const auto& spec = run.spec();
    const auto& rs = spec.robust;
    const auto target = run.target();

    AttackConfig train_attack;
    train_attack.epsilon = rs.train_epsilon;
    train_attack.iterations = rs.train_iterations;
    train_attack.step_size = rs.train_step;
    SegTrainConfig robust_cfg = spec.seg;
    robust_cfg.epochs = rs.epochs;
    const BatchTransform pgd_transform = [train_attack](const Segmenter<float>& seg, const Tensor<float>& x,
                                                       const std::vector<int>& y) {
        return pgd(seg, x, y, train_attack).images;
    };
    json tk = train_attack;
    const auto robust = run.train_segmenter("robust", robust_cfg, run.train(), pgd_transform, {{"pgd", tk}});
    const auto adv_vs_robust = run.train_gan("vs_robust", spec.weights, robust);

    // augmented training set: real scenes plus AdvSPADE scenes drawn against
    // the undefended target with the same labels
    const auto adv_target = run.advspade(target);
    const json aug_key{{"generator", adv_target.hash}, {"seed", spec.eval_seed}};
    Dataset augmented = run.train();
    {
        const auto fakes = synthesize_for(adv_target, run.train(), spec.eval_seed + 1);
        for (std::size_t i = 0; i < fakes.size(); ++i) {
            augmented.items.push_back({run.train().items[i].id + "_adv", fakes[i], run.train().items[i].label});
        }
    }
    const auto aug = run.train_segmenter("augmented", spec.seg, augmented, {}, aug_key);

    AttackConfig eval_attack = spec.attack;
    eval_attack.epsilon = rs.eval_epsilon;
    AttackConfig aug_attack = spec.attack;
    aug_attack.epsilon = rs.augmented_epsilon;
    json ek = eval_attack, ak = aug_attack;
    const json key{{"target", target.hash}, {"robust", robust.hash}, {"augmented", aug.hash},
                   {"adv_vs_robust", adv_vs_robust.hash}, {"eval_attack", ek}, {"aug_attack", ak},
                   {"eval_seed", spec.eval_seed}, {"theta", spec.eval.theta}, {"data", run.data_key()}};
    const json rows = run.stage("eval_robustness", key, [&] {
        const auto& val = run.val();
        const auto labels = labels_of(val);
        const auto reals = images_of(val);
        const auto adv_robust_imgs = synthesize_for(adv_vs_robust, val, spec.eval_seed);
        const auto adv_target_imgs = synthesize_for(adv_target, val, spec.eval_seed);
        json out = json::array();
        const std::vector<std::pair<std::string, const SegmenterHandle*>> models{
            {"undefended", &target}, {"pgd_robust", &robust}, {"advspade_augmented", &aug}};
        for (const auto& [name, h] : models) {
            const auto seg = load_segmenter<float>(h->params);
            const auto pgd_eval = attack_images(seg, reals, labels, AttackMethod::pgd, eval_attack);
            const auto pgd_aug = attack_images(seg, reals, labels, AttackMethod::pgd, aug_attack);
            const auto p_eval = predict_batch(seg, std::span<const ImageTensor>(pgd_eval));
            const auto p_aug = predict_batch(seg, std::span<const ImageTensor>(pgd_aug));
            json row = {{"model", name},
                        {"clean_miou", evaluate_set(seg, reals, labels, spec.eval)["miou"]},
                        {"pgd_miou", evaluate_set(seg, pgd_eval, labels, spec.eval)["miou"]},
                        {"pgd_epsilon", rs.eval_epsilon},
                        {"pgd_success_rate",
                         restricted_success_rate(p_eval, labels, reals, pgd_eval, spec.eval, rs.eval_epsilon)},
                        {"pgd_strong_epsilon", rs.augmented_epsilon},
                        {"pgd_strong_miou", evaluate_set(seg, pgd_aug, labels, spec.eval)["miou"]},
                        {"pgd_strong_success_rate",
                         restricted_success_rate(p_aug, labels, reals, pgd_aug, spec.eval, rs.augmented_epsilon)}};
            // AdvSPADE examples made white-box against this very model
            const auto& own = name == "pgd_robust" ? adv_robust_imgs : adv_target_imgs;
            const auto ev = evaluate_set(seg, own, labels, spec.eval);
            row["advspade_miou"] = ev["miou"];
            row["advspade_success_rate"] = ev["attack_success_rate"];
            row["advspade_source"] = name == "pgd_robust" ? "trained against pgd_robust" : "trained against undefended";
            out.push_back(row);
        }
        return out;
    });
    json report = {{"pipeline", "robustness"},
                   {"images", run.val().size()},
                   {"train_attack", tk},
                   {"robust_epochs", rs.epochs},
                   {"rows", rows}};
    run.write_report("robustness", report);
    return report;
}

/// Adversarial examples from a trained (or freshly trained) AdvSPADE model,
/// written as PNGs with their evaluation.
inline json run_attack_gan(Run& run) {
    const auto& spec = run.spec();
    const auto target = run.target();
    const auto adv = run.advspade(target);
    const json key{{"target", target.hash}, {"advspade", adv.hash}, {"eval_seed", spec.eval_seed},
                   {"theta", spec.eval.theta}, {"data", run.data_key()}};
    const json r = run.stage("attack_gan", key, [&] {
        const auto seg = load_segmenter<float>(target.params);
        const auto& val = run.val();
        const auto fakes = synthesize_for(adv, val, spec.eval_seed);
        for (std::size_t i = 0; i < fakes.size(); ++i) {
            save_image_png(fakes[i], run.dir() / "adv_examples" / (val.items[i].id + ".png"));
        }
        const FidReference ref(images_of(val), spec.eval.fid_feature_dim);
        return evaluate_set(seg, fakes, labels_of(val), spec.eval, &ref);
    });
    json report = {{"pipeline", "attack_gan"}, {"images", run.val().size()}, {"advspade", r},
                   {"examples_dir", "adv_examples"}};
    run.write_report("attack_gan", report);
    return report;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string fmt(const json& v, int digits = 3) {
    if (v.is_null()) return "n/a";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v.get<double>());
    return buf;
}

inline std::string pct(const json& v) {
    if (v.is_null()) return "n/a";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f%%", 100.0 * v.get<double>());
    return buf;
}

inline ImageTensor stack_vertical(const std::vector<ImageTensor>& cells) {
    std::vector<std::vector<ImageTensor>> rows;
    for (const auto& c : cells) rows.push_back({c});
    return compose_grid(rows);
}

}  // namespace detail

/// One column per compared method; each cell stacks the image, the
/// target's prediction for it and the conditioning label.
inline fs::path render_sample_grid(const fs::path& root, const json& samples, const fs::path& path) {
    std::vector<std::vector<ImageTensor>> rows;
    const std::size_t n = samples.at("rows").get<std::size_t>();
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = bitmap_to_image(read_png(root / samples.at("labels").at(i).get<std::string>(), 3));
        std::vector<ImageTensor> row;
        for (const auto& m : samples.at("methods")) {
            const auto img = bitmap_to_image(read_png(root / m.at("images").at(i).get<std::string>(), 3));
            const auto pred = bitmap_to_image(read_png(root / m.at("predictions").at(i).get<std::string>(), 3));
            row.push_back(detail::stack_vertical({img, pred, label}));
        }
        rows.push_back(std::move(row));
    }
    save_grid(rows, path);
    return path;
}

/// Markdown tables from report JSON only; every number printed is a field of
/// the input reports. Returns the markdown text.
inline std::string render_markdown(const std::vector<json>& reports) {
    std::string md = "# Results\n";
    for (const auto& r : reports) {
        const std::string p = r.at("pipeline").get<std::string>();
        md += "\n";
        if (p == "whitebox") {
            md += "## White-box attack (" + std::to_string(r.at("images").get<int>()) + " val scenes, target " +
                  r.at("target_arch").get<std::string>() + ")\n\n";
            md += "| Set | mIoU | Success rate (theta " + detail::fmt(r.at("theta"), 2) + ") | FID |\n";
            md += "|---|---|---|---|\n";
            md += "| Real | " + detail::fmt(r.at("real_miou")) + " | " +
                  detail::pct(r.at("sets").at("real").at("attack_success_rate")) + " | n/a |\n";
            md += "| Vanilla generator | " + detail::fmt(r.at("vanilla_miou")) + " | " +
                  detail::pct(r.at("vanilla_success_rate")) + " | " + detail::fmt(r.at("vanilla_fid"), 4) + " |\n";
            md += "| AdvSPADE | " + detail::fmt(r.at("advspade_miou")) + " | " +
                  detail::pct(r.at("advspade_success_rate")) + " | " + detail::fmt(r.at("advspade_fid"), 4) + " |\n";
        } else if (p == "transfer") {
            md += "## Transfer matrix\n\n| Model | Arch | Setting | Real mIoU | Vanilla mIoU | AdvSPADE mIoU | "
                  "AdvSPADE success |\n|---|---|---|---|---|---|---|\n";
            for (const auto& row : r.at("rows")) {
                md += "| " + row.at("model").get<std::string>() + " | " + row.at("arch").get<std::string>() + " | " +
                      (row.at("whitebox").get<bool>() ? "white-box" : "black-box") + " | " +
                      detail::fmt(row.at("real_miou")) + " | " + detail::fmt(row.at("vanilla_miou")) + " | " +
                      detail::fmt(row.at("advspade_miou")) + " | " + detail::pct(row.at("advspade_success_rate")) +
                      " |\n";
            }
        } else if (p == "norm_sweep") {
            const auto eps = r.at("epsilons").get<std::vector<double>>();
            for (const auto* metric : {"attack_success_rate", "restricted_success_rate", "miou", "fid"}) {
                md += std::string("## Norm-bounded attacks on ") + r.at("source").get<std::string>() + " images: " +
                      metric + "\n\n| Method |";
                std::string sep = "|---|";
                for (double e : eps) {
                    md += " eps=" + detail::fmt(e, 2) + " |";
                    sep += "---|";
                }
                const bool with_adv = r.contains("advspade");
                if (with_adv) {
                    md += " AdvSPADE |";
                    sep += "---|";
                }
                md += "\n" + sep + "\n";
                for (const std::string method : {"fgsm", "pgd"}) {
                    md += "| " + method + " |";
                    for (const auto& row : r.at("rows")) {
                        if (row.at("method") != method) continue;
                        const auto& v = row.at(metric);
                        md += " " + (std::string(metric).find("success") != std::string::npos ? detail::pct(v)
                                                                                              : detail::fmt(v, 4)) +
                              " |";
                    }
                    if (with_adv) {
                        const std::string m = metric == std::string("restricted_success_rate") ? "attack_success_rate"
                                                                                                 : metric;
                        const auto& v = r.at("advspade").at(m);
                        md += " " + (m.find("success") != std::string::npos ? detail::pct(v) : detail::fmt(v, 4)) +
                              " |";
                    }
                    md += "\n";
                }
                md += "\n";
            }
        } else if (p == "ablation") {
            md += "## Ablation\n\n| Variant | FID | mIoU | Success rate |\n|---|---|---|---|\n";
            for (const auto& row : r.at("rows")) {
                md += "| " + row.at("variant").get<std::string>() + " | " + detail::fmt(row.at("fid"), 4) + " | " +
                      detail::fmt(row.at("miou")) + " | " + detail::pct(row.at("success_rate")) + " |\n";
            }
        } else if (p == "robustness") {
            md += "## Robustness\n\n| Model | Clean mIoU | PGD mIoU | PGD success | PGD (strong) success | "
                  "AdvSPADE mIoU | AdvSPADE source |\n|---|---|---|---|---|---|---|\n";
            for (const auto& row : r.at("rows")) {
                md += "| " + row.at("model").get<std::string>() + " | " + detail::fmt(row.at("clean_miou")) + " | " +
                      detail::fmt(row.at("pgd_miou")) + " | " + detail::pct(row.at("pgd_success_rate")) + " | " +
                      detail::pct(row.at("pgd_strong_success_rate")) + " | " + detail::fmt(row.at("advspade_miou")) +
                      " | " + row.at("advspade_source").get<std::string>() + " |\n";
            }
        } else if (p == "attack_gan") {
            md += "## AdvSPADE examples\n\n| mIoU | Success rate | FID |\n|---|---|---|\n| " +
                  detail::fmt(r.at("advspade").at("miou")) + " | " +
                  detail::pct(r.at("advspade").at("attack_success_rate")) + " | " +
                  detail::fmt(r.at("advspade").at("fid"), 4) + " |\n";
        } else {
            throw HarnessError(ErrorClass::config, "unknown report pipeline '" + p + "'");
        }
    }
    return md;
}

/// Renders every report under <dir>/reports into report.md plus grids.
inline std::vector<fs::path> report_render(const fs::path& dir) {
    const fs::path reports_dir = dir / "reports";
    if (!fs::is_directory(reports_dir)) throw HarnessError(ErrorClass::io, "no reports under " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(reports_dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    if (files.empty()) throw HarnessError(ErrorClass::io, "no reports under " + reports_dir.string());
    std::sort(files.begin(), files.end());
    std::vector<json> reports;
    for (const auto& f : files) reports.push_back(read_json(f));
    std::vector<fs::path> out{dir / "report.md"};
    write_text_atomic(out[0], render_markdown(reports));
    for (const auto& r : reports) {
        if (r.contains("sets") && r.at("sets").contains("samples")) {
            out.push_back(render_sample_grid(dir, r.at("sets").at("samples"),
                                             dir / "grids" / (r.at("pipeline").get<std::string>() + ".png")));
        }
    }
    return out;
}

/// Dispatches by spec.pipeline.
inline json run_pipeline(Run& run) {
    const auto& p = run.spec().pipeline;
    if (p == "whitebox" || p == "eval") return run_whitebox(run);
    if (p == "transfer") return run_transfer_matrix(run);
    if (p == "norm_sweep" || p == "attack-norm") return run_norm_sweep(run);
    if (p == "ablation" || p == "ablate") return run_ablation(run);
    if (p == "robustness" || p == "robust") return run_robustness(run);
    if (p == "attack_gan" || p == "attack-gan") return run_attack_gan(run);
    throw HarnessError(ErrorClass::usage, "unknown pipeline '" + p + "'");
}

}  // namespace advspade
