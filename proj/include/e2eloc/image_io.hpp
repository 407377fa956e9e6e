#pragma once

#include <string>
#include <vector>

namespace e2eloc {

// Binary PGM (P5). Values are clamped to [0,1] and quantized to the given
// maxval (255 or 65535).
void write_pgm(const std::string& path, const std::vector<double>& pixels, int height,
               int width, int maxval = 255);

struct PgmImage {
    int height = 0;
    int width = 0;
    int maxval = 255;
    std::vector<double> pixels;  // row-major, scaled back to [0,1]
};

PgmImage read_pgm(const std::string& path);

}  // namespace e2eloc
