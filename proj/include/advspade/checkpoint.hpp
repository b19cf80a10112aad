#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advspade/nn.hpp"

namespace advspade {

using json = nlohmann::json;

enum class Role { segmenter, generator, discriminator, encoder, extractor };

inline std::string to_string(Role r) {
    switch (r) {
        case Role::segmenter: return "segmenter";
        case Role::generator: return "generator";
        case Role::discriminator: return "discriminator";
        case Role::encoder: return "encoder";
        case Role::extractor: return "extractor";
    }
    return "unknown";
}

inline Role role_from_string(const std::string& s) {
    for (Role r : {Role::segmenter, Role::generator, Role::discriminator, Role::encoder, Role::extractor}) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown model role '" + s + "'");
}

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

/// Serializable parameter collection for any of the networks.
struct ModelParams {
    static constexpr std::uint32_t kFormatVersion = 1;

    Role role = Role::segmenter;
    std::string arch;
    std::uint32_t version = kFormatVersion;
    std::vector<NamedTensor> tensors;
    json meta = json::object();

    [[nodiscard]] const Tensor<float>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.value;
        return nullptr;
    }

    /// Throws naming the first non-finite tensor.
    void validate() const {
        for (const auto& t : tensors) {
            if (!t.value.all_finite()) throw CheckpointError("non-finite values in tensor '" + t.name + "'");
        }
    }
};

/// FNV-1a over names, shapes and raw values. Stable across runs and platforms
/// with the same float layout.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t params_hash(const ModelParams& p) {
    std::uint64_t h = fnv1a(p.arch.data(), p.arch.size());
    for (const auto& t : p.tensors) {
        h = fnv1a(t.name.data(), t.name.size(), h);
        const Shape s = t.value.shape();
        const int dims[4] = {s.n, s.c, s.h, s.w};
        h = fnv1a(dims, sizeof(dims), h);
        h = fnv1a(t.value.data(), t.value.numel() * sizeof(float), h);
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

template <typename T>
ModelParams export_module(const Module<T>& m, Role role, std::string arch, json meta = json::object()) {
    ModelParams p;
    p.role = role;
    p.arch = std::move(arch);
    p.meta = std::move(meta);
    for (const auto& e : m.entries()) p.tensors.push_back({e.name, e.var.value().template cast<float>()});
    return p;
}

/// Copies tensors into an already-constructed module of the same architecture.
template <typename T>
void import_module(Module<T>& m, const ModelParams& p) {
    for (const auto& e : m.entries()) {
        const Tensor<float>* src = p.find(e.name);
        if (src == nullptr) throw CheckpointError("checkpoint missing tensor '" + e.name + "'");
        if (!(src->shape() == e.var.shape())) {
            throw CheckpointError("tensor '" + e.name + "' has shape " + src->shape().str() + ", expected " +
                                  e.var.shape().str());
        }
        auto& dst = e.var.mutable_value();
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>((*src)[i]);
    }
}

namespace detail {
constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'S', 'P', 'C', 'K', 'P'};
}

/// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
/// float32 tensor payloads in header order.
inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    p.validate();
    json header;
    header["role"] = to_string(p.role);
    header["arch"] = p.arch;
    header["version"] = p.version;
    header["meta"] = p.meta;
    header["tensors"] = json::array();
    for (const auto& t : p.tensors) {
        const Shape s = t.value.shape();
        header["tensors"].push_back({{"name", t.name}, {"shape", {s.n, s.c, s.h, s.w}}});
    }
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
        out.write(detail::kCheckpointMagic, 8);
        const std::uint32_t version = p.version;
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& t : p.tensors) {
            out.write(reinterpret_cast<const char*>(t.value.data()),
                      static_cast<std::streamsize>(t.value.numel() * sizeof(float)));
        }
        if (!out) throw CheckpointError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint file");
    }
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || version != ModelParams::kFormatVersion) {
        throw CheckpointError("unsupported checkpoint version in " + path.string());
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const json header = json::parse(text);
    ModelParams p;
    p.role = role_from_string(header.at("role").get<std::string>());
    p.arch = header.at("arch").get<std::string>();
    p.version = version;
    p.meta = header.value("meta", json::object());
    for (const auto& t : header.at("tensors")) {
        const auto dims = t.at("shape").get<std::vector<int>>();
        if (dims.size() != 4) throw CheckpointError("bad tensor rank in " + path.string());
        Tensor<float> value(Shape{dims[0], dims[1], dims[2], dims[3]});
        in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.numel() * sizeof(float)));
        if (!in) throw CheckpointError("truncated checkpoint " + path.string());
        p.tensors.push_back({t.at("name").get<std::string>(), std::move(value)});
    }
    p.validate();
    return p;
}

}  // namespace advspade
