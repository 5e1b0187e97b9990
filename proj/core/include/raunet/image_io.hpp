#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace raunet {

struct GrayImageU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v;
};

struct RgbImageU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v;  // 3 bytes per pixel, row-major
};

// Reads P5/P2 PGM directly; P6/P3 PPM is converted to gray via Rec.601
// luminance. Throws DataError on anything unreadable.
GrayImageU8 read_gray_image(const std::string& path);

void write_pgm(const std::string& path, const GrayImageU8& img);
void write_ppm(const std::string& path, const RgbImageU8& img);

}  // namespace raunet
