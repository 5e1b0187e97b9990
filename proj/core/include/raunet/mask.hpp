#pragma once

#include <cstdint>
#include <vector>

namespace raunet {

// Integer label image; values are class ids (0 = background).
struct LabelMask {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v;

    LabelMask() = default;
    LabelMask(int height, int width, std::uint8_t fill = 0)
        : h(height), w(width), v(static_cast<std::size_t>(height) * width, fill) {}

    std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
    std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
    std::size_t size() const { return v.size(); }

    bool operator==(const LabelMask& o) const = default;
};

}  // namespace raunet
