#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "e2eloc/supervision.hpp"

// Seeded generators for the two synthetic corpora: a glyph classification
// set where the class evidence is a small procedurally drawn glyph over
// class-uncorrelated clutter, and an attention-map set with known affine
// targets derived through the target pipeline itself.

namespace e2eloc {

struct GlyphDatasetConfig {
    int image_size = 64;
    int num_classes = 10;
    double glyph_min_frac = 0.15;  // glyph side as fraction of the image side
    double glyph_max_frac = 0.35;
    int clutter_count = 10;        // distractor strokes per image
    double noise_sigma = 0.03;
    int train_count = 5000;
    int test_count = 1000;
    uint64_t seed = 1;
};

struct GlyphSample {
    std::vector<double> image;  // image_size^2, row-major, [0,1]
    int label = 0;
    BBox box;  // ground-truth glyph box, evaluation only
};

struct AttnMapDatasetConfig {
    int map_h = 16;
    int map_w = 16;
    double tau = 0.3;            // threshold used to derive the target theta
    double noise_sigma = 0.05;   // added after target computation
    double min_box_frac = 0.30;  // target box side range, fraction of map side
    double max_box_frac = 0.95;
    int train_count = 5000;
    int test_count = 1000;
    uint64_t seed = 1;
};

struct AttnSample {
    std::vector<double> map;  // map_h * map_w
    ThetaParams theta;        // target parameters from the noise-free map
    BBox box;                 // the same target as a box
    BBox gen_region;          // analytic region the blob was generated from
};

enum class Split { kTrain, kTest };

std::vector<GlyphSample> gen_glyph_dataset(const GlyphDatasetConfig& cfg, Split split);
std::vector<AttnSample> gen_attention_dataset(const AttnMapDatasetConfig& cfg, Split split);

// The ten 3x3 stroke patterns (0 blank, 1 horizontal, 2 vertical,
// 3 down-diagonal, 4 up-diagonal). Classes differ in one to three cells.
const int* glyph_pattern(int label);

// Dataset dumps: index.jsonl plus one PGM per sample.
void dump_glyph_dataset(const std::vector<GlyphSample>& samples, int image_size,
                        const std::string& dir, const std::string& prefix);
void dump_attention_dataset(const std::vector<AttnSample>& samples, int map_h, int map_w,
                            const std::string& dir, const std::string& prefix);

}  // namespace e2eloc
