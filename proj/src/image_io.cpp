#include "e2eloc/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace e2eloc {

void write_pgm(const std::string& path, const std::vector<double>& pixels, int height,
               int width, int maxval) {
    if (pixels.size() != size_t(height) * size_t(width))
        throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
    if (maxval != 255 && maxval != 65535)
        throw std::invalid_argument("write_pgm: maxval must be 255 or 65535");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << width << " " << height << "\n" << maxval << "\n";
    for (double p : pixels) {
        const double c = std::clamp(p, 0.0, 1.0);
        const uint32_t q = uint32_t(std::lround(c * maxval));
        if (maxval == 255) {
            const uint8_t b = uint8_t(q);
            out.write(reinterpret_cast<const char*>(&b), 1);
        } else {
            const uint8_t hi = uint8_t(q >> 8), lo = uint8_t(q & 0xff);
            out.write(reinterpret_cast<const char*>(&hi), 1);
            out.write(reinterpret_cast<const char*>(&lo), 1);
        }
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path);
    auto next_int = [&in, &path]() {
        // skip whitespace and '#' comment lines
        int c = in.get();
        while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
            if (c == '#')
                while (c != '\n' && c != EOF) c = in.get();
            c = in.get();
        }
        int v = 0;
        bool any = false;
        while (c >= '0' && c <= '9') {
            v = v * 10 + (c - '0');
            any = true;
            c = in.get();
        }
        if (!any) throw std::runtime_error("read_pgm: malformed header in " + path);
        return v;
    };
    PgmImage img;
    img.width = next_int();
    img.height = next_int();
    img.maxval = next_int();
    if (img.maxval != 255 && img.maxval != 65535)
        throw std::runtime_error("read_pgm: unsupported maxval in " + path);
    const size_t n = size_t(img.width) * size_t(img.height);
    img.pixels.resize(n);
    const double inv = 1.0 / img.maxval;
    for (size_t i = 0; i < n; ++i) {
        if (img.maxval == 255) {
            uint8_t b;
            in.read(reinterpret_cast<char*>(&b), 1);
            img.pixels[i] = b * inv;
        } else {
            uint8_t hi, lo;
            in.read(reinterpret_cast<char*>(&hi), 1);
            in.read(reinterpret_cast<char*>(&lo), 1);
            img.pixels[i] = ((uint32_t(hi) << 8) | lo) * inv;
        }
    }
    if (!in) throw std::runtime_error("read_pgm: truncated data in " + path);
    return img;
}

}  // namespace e2eloc
