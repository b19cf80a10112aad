#pragma once

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace advspade {

struct Bitmap {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

class PngError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline Bitmap read_png(const std::filesystem::path& path, int channels) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
        throw PngError("cannot read " + path.string() + ": " + image.message);
    }
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Bitmap bm;
    bm.width = static_cast<int>(image.width);
    bm.height = static_cast<int>(image.height);
    bm.channels = channels;
    bm.pixels.resize(PNG_IMAGE_SIZE(image));
    if (png_image_finish_read(&image, nullptr, bm.pixels.data(), 0, nullptr) == 0) {
        std::string msg = image.message;
        png_image_free(&image);
        throw PngError("cannot decode " + path.string() + ": " + msg);
    }
    return bm;
}

inline void write_png(const std::filesystem::path& path, const Bitmap& bm) {
    if (bm.channels != 1 && bm.channels != 3) throw PngError("write_png supports 1 or 3 channels");
    if (bm.pixels.size() != static_cast<std::size_t>(bm.width) * bm.height * bm.channels) {
        throw PngError("write_png: pixel buffer size mismatch");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(bm.width);
    image.height = static_cast<png_uint_32>(bm.height);
    image.format = bm.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (png_image_write_to_file(&image, path.c_str(), 0, bm.pixels.data(), 0, nullptr) == 0) {
        throw PngError("cannot write " + path.string() + ": " + image.message);
    }
}

}  // namespace advspade
