#pragma once
// 8-bit binary PGM (P5) export for 2D maps and side-by-side montages.

#include "maxquery/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace maxquery::imageio {

struct Gray8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

/// Maps a 2D field to 0..255 by its own min/max (a constant field maps to 0).
inline Gray8 to_gray(const std::vector<Real>& values, const GridShape& grid) {
    require(!grid.volumetric(), ErrorCategory::Shape, "PGM export needs a 2D grid");
    require(static_cast<int>(values.size()) == grid.voxels(), ErrorCategory::Shape, "image/grid size mismatch");
    Gray8 g{grid.h, grid.w, std::vector<std::uint8_t>(values.size(), 0)};
    if (values.empty()) return g;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const Real span = *hi - *lo;
    if (span <= 0.0) return g;
    for (std::size_t i = 0; i < values.size(); ++i)
        g.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / span));
    return g;
}

/// Horizontal concatenation with a `gap`-pixel white separator.
inline Gray8 hconcat(const std::vector<Gray8>& tiles, int gap = 2) {
    require(!tiles.empty(), ErrorCategory::Shape, "montage needs at least one tile");
    const int h = tiles.front().height;
    int w = 0;
    for (const auto& t : tiles) {
        require(t.height == h, ErrorCategory::Shape, "montage tiles differ in height");
        w += t.width;
    }
    w += gap * static_cast<int>(tiles.size() - 1);
    Gray8 out{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 255)};
    int x0 = 0;
    for (const auto& t : tiles) {
        for (int r = 0; r < h; ++r)
            std::copy_n(t.pixels.begin() + static_cast<std::ptrdiff_t>(r) * t.width, t.width,
                        out.pixels.begin() + static_cast<std::ptrdiff_t>(r) * w + x0);
        x0 += t.width + gap;
    }
    return out;
}

inline void write_pgm(const std::filesystem::path& path, const Gray8& img) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    require(static_cast<bool>(out), ErrorCategory::Io, "write failed " + path.string());
}

inline Gray8 read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot read " + path.string());
    std::string magic;
    int maxval = 0;
    Gray8 img;
    in >> magic >> img.width >> img.height >> maxval;
    require(in && magic == "P5" && maxval == 255, ErrorCategory::Io, "unsupported PGM " + path.string());
    in.get();
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    require(static_cast<bool>(in), ErrorCategory::Io, "truncated PGM " + path.string());
    return img;
}

}  // namespace maxquery::imageio
