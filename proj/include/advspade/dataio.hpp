#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advspade/png_io.hpp"
#include "advspade/tensor.hpp"

namespace advspade {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-pixel class ids in [0, num_classes).
struct LabelMap {
    int num_classes = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> classes;

    LabelMap() = default;
    LabelMap(int c, int h, int w, std::uint8_t fill = 0)
        : num_classes(c), height(h), width(w), classes(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return classes[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] std::uint8_t at(int y, int x) const { return classes[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] std::size_t size() const { return classes.size(); }

    void validate() const {
        if (num_classes < 1 || num_classes > 255) throw DataError("label map: invalid class count");
        if (classes.size() != static_cast<std::size_t>(height) * width) {
            throw DataError("label map: data size does not match " + std::to_string(height) + "x" +
                            std::to_string(width));
        }
        for (auto c : classes) {
            if (c >= num_classes) {
                throw DataError("label map: class id " + std::to_string(c) + " >= " + std::to_string(num_classes));
            }
        }
    }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// RGB image with values in [-1, 1], stored as a (1, 3, H, W) tensor.
struct ImageTensor {
    Tensor<float> data;

    ImageTensor() = default;
    explicit ImageTensor(Tensor<float> t) : data(std::move(t)) {}
    ImageTensor(int h, int w) : data(Shape{1, 3, h, w}) {}

    [[nodiscard]] int height() const { return data.shape().h; }
    [[nodiscard]] int width() const { return data.shape().w; }

    void validate() const {
        const Shape s = data.shape();
        if (s.n != 1 || s.c != 3) throw DataError("image tensor must be (1,3,H,W), got " + s.str());
        for (float v : data.values()) {
            if (!(v >= -1.0f && v <= 1.0f)) throw DataError("image value outside [-1,1]");
        }
    }
};

/// (1, C, H, W) binary encoding of a label map.
struct OneHotMap {
    Tensor<float> data;
};

inline OneHotMap one_hot(const LabelMap& label) {
    label.validate();
    OneHotMap oh{Tensor<float>(Shape{1, label.num_classes, label.height, label.width})};
    const std::size_t plane = label.size();
    for (std::size_t p = 0; p < plane; ++p) oh.data[label.classes[p] * plane + p] = 1.0f;
    return oh;
}

/// Channel argmax of a (1, C, H, W) tensor; ties go to the lowest class.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& t, int image = 0) {
    const Shape s = t.shape();
    LabelMap out(s.c, s.h, s.w);
    const std::size_t plane = s.plane();
    const T* base = t.data() + static_cast<std::size_t>(image) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        for (int c = 1; c < s.c; ++c)
            if (base[c * plane + p] > base[best * plane + p]) best = c;
        out.classes[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Nearest-neighbour resize of a label map.
inline LabelMap resize_nearest(const LabelMap& in, int h, int w) {
    LabelMap out(in.num_classes, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(y, x) = in.at(static_cast<int>(static_cast<long>(y) * in.height / h),
                                 static_cast<int>(static_cast<long>(x) * in.width / w));
    return out;
}

struct SceneConfig {
    int num_classes = 5;
    int image_size = 64;
    int min_shapes = 18;
    int max_shapes = 26;
    double color_jitter = 0.12;       // per-scene, per-class base colour shift
    double texture_amplitude = 0.08;  // contrast of the class texture pattern
    double noise_amplitude = 0.05;    // per-pixel uniform noise
    double palette_scale = 0.15;      // contraction of class colours toward the shared mean
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw DataError("scene config: num_classes must be >= 2");
        if (num_classes > 255) throw DataError("scene config: num_classes must fit in 8 bits");
        if (image_size < 16) throw DataError("scene config: image_size must be >= 16");
        if (min_shapes < 0 || max_shapes < min_shapes) throw DataError("scene config: bad shape count range");
        if (color_jitter < 0 || texture_amplitude < 0 || noise_amplitude < 0 || palette_scale < 0) {
            throw DataError("scene config: jitter amplitudes must be >= 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
    j = {{"num_classes", c.num_classes},   {"image_size", c.image_size},
         {"min_shapes", c.min_shapes},     {"max_shapes", c.max_shapes},
         {"color_jitter", c.color_jitter}, {"texture_amplitude", c.texture_amplitude},
         {"noise_amplitude", c.noise_amplitude}, {"palette_scale", c.palette_scale}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
    SceneConfig d;
    c.num_classes = j.value("num_classes", d.num_classes);
    c.image_size = j.value("image_size", d.image_size);
    c.min_shapes = j.value("min_shapes", d.min_shapes);
    c.max_shapes = j.value("max_shapes", d.max_shapes);
    c.color_jitter = j.value("color_jitter", d.color_jitter);
    c.texture_amplitude = j.value("texture_amplitude", d.texture_amplitude);
    c.noise_amplitude = j.value("noise_amplitude", d.noise_amplitude);
    c.palette_scale = j.value("palette_scale", d.palette_scale);
    c.seed = j.value("seed", d.seed);
}

namespace detail {

struct ClassLook {
    float rgb[3];
    int texture;  // 0 flat, 1 horizontal stripes, 2 vertical stripes, 3 checker, 4 diagonal
    int period;
};

inline ClassLook class_look(int cls, int num_classes) {
    if (cls == 0) return {{-0.25f, -0.25f, -0.2f}, 0, 1};
    static constexpr float kPalette[4][3] = {
        {0.45f, -0.15f, -0.1f}, {-0.1f, 0.4f, -0.15f}, {-0.15f, -0.05f, 0.45f}, {0.35f, 0.3f, -0.2f}};
    ClassLook look{};
    const int k = cls - 1;
    if (k < 4) {
        for (int i = 0; i < 3; ++i) look.rgb[i] = kPalette[k][i];
    } else {
        const double hue = 2.0 * std::numbers::pi * k / std::max(1, num_classes - 1);
        for (int i = 0; i < 3; ++i)
            look.rgb[i] = static_cast<float>(0.1 + 0.35 * std::cos(hue + 2.0 * std::numbers::pi * i / 3.0));
    }
    look.texture = 1 + k % 4;
    look.period = 4 + (k / 4) % 3;
    return look;
}

inline float texture_value(int texture, int period, int y, int x) {
    const int half = period / 2;
    switch (texture) {
        case 1: return (y % period) < half ? 1.0f : -1.0f;
        case 2: return (x % period) < half ? 1.0f : -1.0f;
        case 3: return (((y / half) + (x / half)) % 2 == 0) ? 1.0f : -1.0f;
        case 4: return ((x + y) % period) < half ? 1.0f : -1.0f;
        default: return 0.0f;
    }
}

}  // namespace detail

struct Scene {
    ImageTensor image;
    LabelMap label;
};

/// Deterministic procedural scene: a flat background with textured shapes
/// painted back to front. Pure in (config.seed, index).
inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t index) {
    cfg.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5ce7e5u};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int size = cfg.image_size;
    const int objects = cfg.num_classes - 1;

    LabelMap label(cfg.num_classes, size, size, 0);
    std::uniform_int_distribution<int> count_dist(cfg.min_shapes, cfg.max_shapes);
    const int shapes = count_dist(rng);
    std::vector<int> classes(objects);
    std::iota(classes.begin(), classes.end(), 1);
    std::shuffle(classes.begin(), classes.end(), rng);
    std::uniform_int_distribution<int> any_object(1, objects);
    while (static_cast<int>(classes.size()) < shapes) classes.push_back(any_object(rng));
    classes.resize(static_cast<std::size_t>(shapes));

    const double scale = size / 64.0;
    for (int cls : classes) {
        const int kind = static_cast<int>(unit(rng) * 3.0);
        const double cx = unit(rng) * size;
        const double cy = unit(rng) * size;
        const double rx = (6.0 + unit(rng) * 10.0) * scale;
        const double ry = (6.0 + unit(rng) * 10.0) * scale;
        const double angle = unit(rng) * std::numbers::pi;
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double dx = x + 0.5 - cx;
                const double dy = y + 0.5 - cy;
                const double u = (ca * dx + sa * dy) / rx;
                const double v = (-sa * dx + ca * dy) / ry;
                bool inside = false;
                if (kind == 0) {
                    inside = u * u + v * v <= 1.0;
                } else if (kind == 1) {
                    inside = std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
                } else {
                    inside = v >= -1.0 && v <= 1.0 && std::abs(u) <= (1.0 - v) * 0.5 + 1e-9;
                }
                if (inside) label.at(y, x) = static_cast<std::uint8_t>(cls);
            }
        }
    }

    // Per-scene colour jitter per class, then texture and pixel noise.
    constexpr double kPaletteMean = 0.05;
    std::vector<std::array<float, 3>> base(cfg.num_classes);
    for (int c = 0; c < cfg.num_classes; ++c) {
        const auto look = detail::class_look(c, cfg.num_classes);
        for (int i = 0; i < 3; ++i)
            base[c][i] = static_cast<float>(kPaletteMean + cfg.palette_scale * (look.rgb[i] - kPaletteMean) +
                                            cfg.color_jitter * (2.0 * unit(rng) - 1.0));
    }
    ImageTensor image(size, size);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const int cls = label.at(y, x);
            const auto look = detail::class_look(cls, cfg.num_classes);
            const float tex = static_cast<float>(cfg.texture_amplitude) *
                              detail::texture_value(look.texture, look.period, y, x);
            for (int i = 0; i < 3; ++i) {
                const float noise = static_cast<float>(cfg.noise_amplitude * (2.0 * unit(rng) - 1.0));
                const float v = base[cls][i] + tex + noise;
                image.data[i * plane + static_cast<std::size_t>(y) * size + x] = std::clamp(v, -1.0f, 1.0f);
            }
        }
    }
    return {std::move(image), std::move(label)};
}

struct Sample {
    std::string id;
    ImageTensor image;
    LabelMap label;
};

/// Immutable collection of pixel-aligned image/label pairs.
struct Dataset {
    int num_classes = 0;
    int image_size = 0;
    std::vector<Sample> items;
    std::map<std::string, std::vector<std::string>> splits;
    nlohmann::json scene_config = nullptr;

    [[nodiscard]] std::size_t size() const { return items.size(); }
    [[nodiscard]] bool empty() const { return items.empty(); }

    /// Items listed under a named split manifest, in manifest order.
    [[nodiscard]] Dataset subset(const std::string& split_name) const {
        auto it = splits.find(split_name);
        if (it == splits.end()) throw DataError("dataset has no split named '" + split_name + "'");
        std::map<std::string, const Sample*> by_id;
        for (const auto& s : items) by_id[s.id] = &s;
        Dataset out{num_classes, image_size, {}, {}, scene_config};
        for (const auto& id : it->second) {
            auto f = by_id.find(id);
            if (f == by_id.end()) throw DataError("split '" + split_name + "' names unknown id " + id);
            out.items.push_back(*f->second);
        }
        return out;
    }
};

inline std::string scene_id(std::uint64_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(index));
    return buf;
}

inline Dataset generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t first_index = 0) {
    Dataset ds{cfg.num_classes, cfg.image_size, {}, {}, cfg};
    ds.items.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto scene = generate_scene(cfg, first_index + i);
        ds.items.push_back({scene_id(first_index + i), std::move(scene.image), std::move(scene.label)});
    }
    return ds;
}

inline std::uint8_t quantize(float v) {
    const float p = std::round((v + 1.0f) * 127.5f);
    return static_cast<std::uint8_t>(std::clamp(p, 0.0f, 255.0f));
}

inline float dequantize(std::uint8_t p) { return static_cast<float>(p) / 127.5f - 1.0f; }

inline Bitmap image_to_bitmap(const ImageTensor& img) {
    const int h = img.height();
    const int w = img.width();
    Bitmap bm{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) bm.pixels[p * 3 + c] = quantize(img.data[c * plane + p]);
    return bm;
}

inline ImageTensor bitmap_to_image(const Bitmap& bm) {
    ImageTensor img(bm.height, bm.width);
    const std::size_t plane = static_cast<std::size_t>(bm.height) * bm.width;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) img.data[c * plane + p] = dequantize(bm.pixels[p * 3 + c]);
    return img;
}

inline void save_image_png(const ImageTensor& img, const std::filesystem::path& path) {
    write_png(path, image_to_bitmap(img));
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "labels");
    for (const auto& s : ds.items) {
        s.label.validate();
        write_png(dir / "images" / (s.id + ".png"), image_to_bitmap(s.image));
        write_png(dir / "labels" / (s.id + ".png"), Bitmap{s.label.width, s.label.height, 1, s.label.classes});
    }
    nlohmann::json meta;
    meta["num_classes"] = ds.num_classes;
    meta["image_size"] = ds.image_size;
    meta["splits"] = ds.splits;
    meta["scene_config"] = ds.scene_config;
    std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const auto meta_path = dir / "meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw DataError("missing " + meta_path.string());
    const auto meta = nlohmann::json::parse(meta_in);
    Dataset ds;
    ds.num_classes = meta.at("num_classes").get<int>();
    ds.image_size = meta.at("image_size").get<int>();
    if (meta.contains("splits")) ds.splits = meta["splits"].get<std::map<std::string, std::vector<std::string>>>();
    ds.scene_config = meta.value("scene_config", nlohmann::json(nullptr));

    auto stems = [](const fs::path& p) {
        std::set<std::string> out;
        if (!fs::is_directory(p)) return out;
        for (const auto& e : fs::directory_iterator(p))
            if (e.path().extension() == ".png") out.insert(e.path().stem().string());
        return out;
    };
    const auto images = stems(dir / "images");
    const auto labels = stems(dir / "labels");
    for (const auto& id : images) {
        if (!labels.count(id)) throw DataError("image " + (dir / "images" / (id + ".png")).string() + " has no label");
    }
    for (const auto& id : labels) {
        if (!images.count(id)) throw DataError("label " + (dir / "labels" / (id + ".png")).string() + " has no image");
    }
    for (const auto& id : images) {
        const auto ibm = read_png(dir / "images" / (id + ".png"), 3);
        const auto lbm = read_png(dir / "labels" / (id + ".png"), 1);
        if (ibm.width != lbm.width || ibm.height != lbm.height) {
            throw DataError("image/label dimension mismatch for " + id);
        }
        LabelMap label(ds.num_classes, lbm.height, lbm.width);
        label.classes = lbm.pixels;
        for (auto c : label.classes) {
            if (c >= ds.num_classes) {
                throw DataError("label " + id + " has class id " + std::to_string(c) + " but num_classes is " +
                                std::to_string(ds.num_classes));
            }
        }
        ds.items.push_back({id, bitmap_to_image(ibm), std::move(label)});
    }
    return ds;
}

struct SplitResult {
    Dataset train;
    Dataset val;
};

/// Seeded disjoint split; val receives round(n * val_fraction) items.
inline SplitResult split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw DataError("split: val_fraction must be in (0,1)");
    std::vector<std::size_t> order(ds.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ds.items.size())));
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
    std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    SplitResult r{{ds.num_classes, ds.image_size, {}, {}, ds.scene_config},
                  {ds.num_classes, ds.image_size, {}, {}, ds.scene_config}};
    for (auto i : train_idx) r.train.items.push_back(ds.items[i]);
    for (auto i : val_idx) r.val.items.push_back(ds.items[i]);
    return r;
}

/// Stack images of the given items into an (N, 3, H, W) batch.
inline Tensor<float> batch_images(std::span<const Sample> items, std::span<const std::size_t> idx) {
    std::vector<Tensor<float>> parts;
    parts.reserve(idx.size());
    for (auto i : idx) parts.push_back(items[i].image.data);
    return stack_batch<float>(parts);
}

inline std::vector<int> batch_labels(std::span<const Sample> items, std::span<const std::size_t> idx) {
    std::vector<int> out;
    for (auto i : idx) out.insert(out.end(), items[i].label.classes.begin(), items[i].label.classes.end());
    return out;
}

/// (N, C, H, W) one-hot of a batch of label maps.
template <typename T>
Tensor<T> batch_one_hot(std::span<const LabelMap> labels) {
    if (labels.empty()) throw DataError("batch_one_hot of zero labels");
    const auto& f = labels.front();
    Tensor<T> out(Shape{static_cast<int>(labels.size()), f.num_classes, f.height, f.width});
    const std::size_t plane = f.size();
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n].height != f.height || labels[n].width != f.width || labels[n].num_classes != f.num_classes) {
            throw DataError("batch_one_hot: inconsistent label maps");
        }
        for (std::size_t p = 0; p < plane; ++p)
            out[(n * f.num_classes + labels[n].classes[p]) * plane + p] = T(1);
    }
    return out;
}

}  // namespace advspade
