#include "raunet/image_io.hpp"

#include <fstream>

#include "raunet/errors.hpp"

namespace raunet {

namespace {

// Skips whitespace and '#' comments between netpbm header tokens.
int next_header_int(std::istream& is, const std::string& path) {
    while (true) {
        const int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
            continue;
        }
        if (std::isspace(c)) {
            is.get();
            continue;
        }
        break;
    }
    int value = 0;
    if (!(is >> value)) throw DataError("malformed netpbm header in " + path);
    return value;
}

}  // namespace

GrayImageU8 read_gray_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image: " + path);
    char p = 0, kind = 0;
    is.get(p);
    is.get(kind);
    if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6'))
        throw DataError("unsupported image format in " + path + " (expected PGM/PPM)");

    const int w = next_header_int(is, path);
    const int h = next_header_int(is, path);
    const int maxval = next_header_int(is, path);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw DataError("unsupported netpbm geometry in " + path);

    const bool color = (kind == '3' || kind == '6');
    const std::size_t n = static_cast<std::size_t>(w) * h * (color ? 3 : 1);
    std::vector<std::uint8_t> raw(n);
    if (kind == '5' || kind == '6') {
        is.get();  // single whitespace after maxval
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
        if (!is) throw DataError("truncated image data in " + path);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            int value = 0;
            if (!(is >> value)) throw DataError("truncated image data in " + path);
            raw[i] = static_cast<std::uint8_t>(value);
        }
    }

    GrayImageU8 img;
    img.h = h;
    img.w = w;
    if (!color) {
        img.v = std::move(raw);
    } else {
        img.v.resize(static_cast<std::size_t>(w) * h);
        for (std::size_t i = 0; i < img.v.size(); ++i) {
            const double y = 0.299 * raw[3 * i] + 0.587 * raw[3 * i + 1] + 0.114 * raw[3 * i + 2];
            img.v[i] = static_cast<std::uint8_t>(y + 0.5);
        }
    }
    return img;
}

void write_pgm(const std::string& path, const GrayImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open image for writing: " + path);
    os << "P5\n" << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.v.data()),
             static_cast<std::streamsize>(img.v.size()));
    if (!os) throw DataError("image write failed: " + path);
}

void write_ppm(const std::string& path, const RgbImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open image for writing: " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.v.data()),
             static_cast<std::streamsize>(img.v.size()));
    if (!os) throw DataError("image write failed: " + path);
}

}  // namespace raunet
