// Binary PPM (P6) and PGM (P5) files, maxval 255.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace advseg {

struct Raster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;        // 1 for PGM, 3 for PPM
    std::vector<std::uint8_t> data;  // row-major, interleaved channels
};

void write_pnm(const std::filesystem::path& path, const Raster& raster);
/// Accepts P5 and P6 with maxval 255; header comments are skipped.
Raster read_pnm(const std::filesystem::path& path);

}  // namespace advseg
