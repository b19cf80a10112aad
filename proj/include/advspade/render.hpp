#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "advspade/dataio.hpp"

namespace advspade {

/// Fixed display colour per class id, in [-1, 1] image units.
inline std::array<float, 3> label_color(int cls) {
    static constexpr float kColors[8][3] = {{-1.0f, -1.0f, -1.0f}, {0.9f, -0.6f, -0.6f}, {-0.6f, 0.8f, -0.6f},
                                            {-0.5f, -0.4f, 0.9f},  {0.9f, 0.8f, -0.7f},  {0.8f, -0.5f, 0.8f},
                                            {-0.5f, 0.8f, 0.8f},   {0.6f, 0.6f, 0.6f}};
    const auto& c = kColors[cls % 8];
    return {c[0], c[1], c[2]};
}

inline ImageTensor label_to_image(const LabelMap& label) {
    ImageTensor img(label.height, label.width);
    const std::size_t plane = label.size();
    for (std::size_t p = 0; p < plane; ++p) {
        const auto c = label_color(label.classes[p]);
        for (int i = 0; i < 3; ++i) img.data[i * plane + p] = c[static_cast<std::size_t>(i)];
    }
    return img;
}

/// Tiles rows of equally sized images with a 2-pixel white gutter.
inline ImageTensor compose_grid(const std::vector<std::vector<ImageTensor>>& rows) {
    if (rows.empty() || rows.front().empty()) throw std::invalid_argument("compose_grid: no images");
    const int h = rows.front().front().height();
    const int w = rows.front().front().width();
    const std::size_t cols = rows.front().size();
    constexpr int kGap = 2;
    const int gh = static_cast<int>(rows.size()) * (h + kGap) - kGap;
    const int gw = static_cast<int>(cols) * (w + kGap) - kGap;
    ImageTensor grid(gh, gw);
    grid.data.fill(1.0f);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != cols) throw std::invalid_argument("compose_grid: ragged rows");
        for (std::size_t c = 0; c < cols; ++c) {
            const auto& img = rows[r][c];
            if (img.height() != h || img.width() != w) throw std::invalid_argument("compose_grid: size mismatch");
            const int oy = static_cast<int>(r) * (h + kGap);
            const int ox = static_cast<int>(c) * (w + kGap);
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) grid.data.at(0, ch, oy + y, ox + x) = img.data.at(0, ch, y, x);
        }
    }
    return grid;
}

inline void save_grid(const std::vector<std::vector<ImageTensor>>& rows, const std::filesystem::path& path) {
    save_image_png(compose_grid(rows), path);
}

}  // namespace advspade
