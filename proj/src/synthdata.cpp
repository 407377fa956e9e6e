#include "e2eloc/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "e2eloc/image_io.hpp"
#include "e2eloc/rng.hpp"

#include "json.hpp"

namespace e2eloc {

namespace {

// 0 blank, 1 horizontal, 2 vertical, 3 down-diagonal, 4 up-diagonal.
// All classes share the outer frame; the discriminative cells are local.
constexpr int kPatterns[10][9] = {
    {2, 1, 2, 1, 3, 1, 2, 1, 2},  // center '\'
    {2, 1, 2, 1, 4, 1, 2, 1, 2},  // center '/'
    {2, 1, 2, 3, 0, 4, 2, 1, 2},  // middle row '\ /'
    {2, 1, 2, 4, 0, 3, 2, 1, 2},  // middle row '/ \'
    {2, 3, 2, 1, 0, 1, 2, 4, 2},  // top '\', bottom '/'
    {2, 4, 2, 1, 0, 1, 2, 3, 2},  // top '/', bottom '\'
    {3, 1, 4, 1, 0, 1, 2, 1, 2},  // top corners swapped to diagonals
    {4, 1, 3, 1, 0, 1, 2, 1, 2},
    {2, 1, 2, 1, 0, 1, 3, 1, 4},  // bottom corners swapped to diagonals
    {2, 1, 2, 1, 0, 1, 4, 1, 3},
};

struct Segment {
    double x0, y0, x1, y1;
};

double point_segment_dist(double px, double py, const Segment& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
    return std::hypot(px - cx, py - cy);
}

// Anti-aliased stroke rendering: 3x3 subsample coverage of the capsule of
// the given half-thickness around the segment, composited with max.
void draw_segment(std::vector<double>& img, int size, const Segment& seg, double half_t,
                  double intensity) {
    const int x_lo = std::max(0, int(std::floor(std::min(seg.x0, seg.x1) - half_t - 1)));
    const int x_hi = std::min(size - 1, int(std::ceil(std::max(seg.x0, seg.x1) + half_t + 1)));
    const int y_lo = std::max(0, int(std::floor(std::min(seg.y0, seg.y1) - half_t - 1)));
    const int y_hi = std::min(size - 1, int(std::ceil(std::max(seg.y0, seg.y1) + half_t + 1)));
    for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
            int covered = 0;
            for (int sy = 0; sy < 3; ++sy)
                for (int sx = 0; sx < 3; ++sx) {
                    const double px = x + (sx + 0.5) / 3.0;
                    const double py = y + (sy + 0.5) / 3.0;
                    if (point_segment_dist(px, py, seg) <= half_t) ++covered;
                }
            if (covered == 0) continue;
            double& p = img[size_t(y) * size + x];
            p = std::max(p, intensity * covered / 9.0);
        }
    }
}

// Draws one 3x3 stroke pattern into the pixel box [x0, x0+g) x [y0, y0+g).
void draw_pattern(std::vector<double>& img, int size, const int* pattern, double x0, double y0,
                  double g, double intensity) {
    const double cell = g / 3.0;
    const double half_t = std::max(0.55, 0.075 * g);
    const double inset = 0.18 * cell;
    for (int ci = 0; ci < 3; ++ci) {
        for (int cj = 0; cj < 3; ++cj) {
            const int kind = pattern[ci * 3 + cj];
            if (kind == 0) continue;
            const double cx0 = x0 + cj * cell + inset, cx1 = x0 + (cj + 1) * cell - inset;
            const double cy0 = y0 + ci * cell + inset, cy1 = y0 + (ci + 1) * cell - inset;
            const double mx = 0.5 * (cx0 + cx1), my = 0.5 * (cy0 + cy1);
            Segment seg;
            switch (kind) {
                case 1: seg = {cx0, my, cx1, my}; break;
                case 2: seg = {mx, cy0, mx, cy1}; break;
                case 3: seg = {cx0, cy0, cx1, cy1}; break;
                case 4: seg = {cx0, cy1, cx1, cy0}; break;
                default: throw std::invalid_argument("draw_pattern: unknown stroke kind");
            }
            draw_segment(img, size, seg, half_t, intensity);
        }
    }
}

bool boxes_overlap(double ax0, double ay0, double ax1, double ay1, double bx0, double by0,
                   double bx1, double by1) {
    return ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1;
}

GlyphSample make_glyph_sample(const GlyphDatasetConfig& cfg, int label, Rng& rng) {
    const int S = cfg.image_size;
    GlyphSample out;
    out.label = label;
    out.image.assign(size_t(S) * S, 0.0);

    // background: low base level plus pixel noise
    const double base = rng.uniform(0.05, 0.15);
    for (auto& p : out.image) p = std::clamp(base + rng.normal(0.0, cfg.noise_sigma), 0.0, 1.0);

    // glyph placement
    const double g = rng.uniform(cfg.glyph_min_frac, cfg.glyph_max_frac) * S;
    if (g < 6.0 || g > S - 2.0)
        throw std::invalid_argument("gen_glyph_dataset: glyph size out of range");
    const double gx = rng.uniform(1.0, S - 1.0 - g);
    const double gy = rng.uniform(1.0, S - 1.0 - g);
    const double glyph_intensity = rng.uniform(0.75, 1.0);

    // clutter: strokes from the same alphabet, kept off the glyph box
    const double margin = 2.0;
    for (int c = 0; c < cfg.clutter_count; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const double cs = rng.uniform(0.05, 0.16) * S;
            const double cx = rng.uniform(0.0, S - cs);
            const double cy = rng.uniform(0.0, S - cs);
            if (boxes_overlap(cx, cy, cx + cs, cy + cs, gx - margin, gy - margin,
                              gx + g + margin, gy + g + margin))
                continue;
            const int kind = 1 + rng.uniform_index(4);
            const double mx = cx + cs * 0.5, my = cy + cs * 0.5;
            Segment seg;
            switch (kind) {
                case 1: seg = {cx, my, cx + cs, my}; break;
                case 2: seg = {mx, cy, mx, cy + cs}; break;
                case 3: seg = {cx, cy, cx + cs, cy + cs}; break;
                default: seg = {cx, cy + cs, cx + cs, cy}; break;
            }
            draw_segment(out.image, S, seg, std::max(0.55, 0.07 * cs),
                         rng.uniform(0.3, 0.7));
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("gen_glyph_dataset: could not place clutter stroke");
    }

    draw_pattern(out.image, S, kPatterns[label], gx, gy, g, glyph_intensity);

    out.box.x0 = -1.0 + 2.0 * gx / S;
    out.box.x1 = -1.0 + 2.0 * (gx + g) / S;
    out.box.y0 = -1.0 + 2.0 * gy / S;
    out.box.y1 = -1.0 + 2.0 * (gy + g) / S;
    return out;
}

AttnSample make_attn_sample(const AttnMapDatasetConfig& cfg, Rng& rng) {
    const int I = cfg.map_h, J = cfg.map_w;
    AttnSample out;
    out.map.assign(size_t(I) * J, 0.0);
    // amplitude and baseline vary per map; min-max normalization (and thus
    // the tau-box target) is invariant to both, raw estimators are not
    const double amp = rng.uniform(0.3, 1.0);
    const double baseline = rng.uniform(0.0, 0.25) * amp;
    const bool gaussian = rng.uniform() < 0.5;

    double rx0, rx1, ry0, ry1;  // generating region in cell coordinates
    if (gaussian) {
        // half-width of the tau level set: w = sigma * sqrt(2 ln(1/tau))
        const double level = std::sqrt(2.0 * std::log(1.0 / cfg.tau));
        const double wx = 0.5 * rng.uniform(cfg.min_box_frac, cfg.max_box_frac) * J;
        const double wy = 0.5 * rng.uniform(cfg.min_box_frac, cfg.max_box_frac) * I;
        const double cx = rng.uniform(wx + 0.5, J - wx - 0.5);
        const double cy = rng.uniform(wy + 0.5, I - wy - 0.5);
        const double sx = wx / level, sy = wy / level;
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j) {
                const double dx = (j + 0.5 - cx) / sx, dy = (i + 0.5 - cy) / sy;
                out.map[size_t(i) * J + j] = amp * std::exp(-0.5 * (dx * dx + dy * dy));
            }
        rx0 = cx - wx;
        rx1 = cx + wx;
        ry0 = cy - wy;
        ry1 = cy + wy;
    } else {
        // hard rectangle painted by exact cell coverage
        const double w = rng.uniform(cfg.min_box_frac, cfg.max_box_frac) * J;
        const double h = rng.uniform(cfg.min_box_frac, cfg.max_box_frac) * I;
        rx0 = rng.uniform(0.0, J - w);
        rx1 = rx0 + w;
        ry0 = rng.uniform(0.0, I - h);
        ry1 = ry0 + h;
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j) {
                const double ox = std::max(0.0, std::min(rx1, j + 1.0) - std::max(rx0, double(j)));
                const double oy = std::max(0.0, std::min(ry1, i + 1.0) - std::max(ry0, double(i)));
                out.map[size_t(i) * J + j] = amp * ox * oy;
            }
    }

    for (auto& v : out.map) v += baseline;

    out.box = extract_bbox(out.map, I, J, cfg.tau);
    out.theta = bbox_to_theta(out.box);
    if (out.box.degenerate)
        throw std::runtime_error("gen_attention_dataset: degenerate target box");

    out.gen_region.x0 = -1.0 + 2.0 * rx0 / J;
    out.gen_region.x1 = -1.0 + 2.0 * rx1 / J;
    out.gen_region.y0 = -1.0 + 2.0 * ry0 / I;
    out.gen_region.y1 = -1.0 + 2.0 * ry1 / I;

    if (cfg.noise_sigma > 0)
        for (auto& v : out.map) v += rng.normal(0.0, cfg.noise_sigma);
    return out;
}

uint64_t split_salt(Split split) { return split == Split::kTrain ? 0x7261696eull : 0x74657374ull; }

}  // namespace

const int* glyph_pattern(int label) {
    if (label < 0 || label >= 10)
        throw std::invalid_argument("glyph_pattern: label out of range");
    return kPatterns[label];
}

std::vector<GlyphSample> gen_glyph_dataset(const GlyphDatasetConfig& cfg, Split split) {
    check(cfg.image_size >= 16, "gen_glyph_dataset: image size too small");
    check(cfg.num_classes >= 2 && cfg.num_classes <= 10,
          "gen_glyph_dataset: supported class counts are 2..10");
    check(cfg.glyph_min_frac > 0 && cfg.glyph_max_frac <= 0.9 &&
              cfg.glyph_min_frac <= cfg.glyph_max_frac,
          "gen_glyph_dataset: bad glyph size range");
    check(cfg.glyph_max_frac * cfg.image_size <= cfg.image_size - 2,
          "gen_glyph_dataset: glyph cannot fit inside the image");
    const int count = split == Split::kTrain ? cfg.train_count : cfg.test_count;
    std::vector<GlyphSample> out;
    out.reserve(size_t(count));
    const uint64_t salt = split_salt(split);
    for (int idx = 0; idx < count; ++idx) {
        Rng rng(stream_seed(cfg.seed ^ salt, uint64_t(idx)));
        out.push_back(make_glyph_sample(cfg, idx % cfg.num_classes, rng));
    }
    return out;
}

std::vector<AttnSample> gen_attention_dataset(const AttnMapDatasetConfig& cfg, Split split) {
    check(cfg.map_h >= 4 && cfg.map_w >= 4, "gen_attention_dataset: map too small");
    check(cfg.tau > 0 && cfg.tau < 1, "gen_attention_dataset: tau must be in (0,1)");
    check(cfg.min_box_frac > 0 && cfg.max_box_frac <= 1.0 &&
              cfg.min_box_frac <= cfg.max_box_frac,
          "gen_attention_dataset: bad box size range");
    const int count = split == Split::kTrain ? cfg.train_count : cfg.test_count;
    std::vector<AttnSample> out;
    out.reserve(size_t(count));
    const uint64_t salt = split_salt(split);
    for (int idx = 0; idx < count; ++idx) {
        Rng rng(stream_seed(cfg.seed ^ salt, uint64_t(idx)));
        out.push_back(make_attn_sample(cfg, rng));
    }
    return out;
}

void dump_glyph_dataset(const std::vector<GlyphSample>& samples, int image_size,
                        const std::string& dir, const std::string& prefix) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / (prefix + "_index.jsonl"));
    if (!index) throw std::runtime_error("dump_glyph_dataset: cannot open index");
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%06zu.pgm", prefix.c_str(), i);
        write_pgm((fs::path(dir) / name).string(), samples[i].image, image_size, image_size, 255);
        nlohmann::json row;
        row["path"] = name;
        row["label"] = samples[i].label;
        row["box"] = {samples[i].box.x0, samples[i].box.y0, samples[i].box.x1, samples[i].box.y1};
        index << row.dump() << "\n";
    }
}

void dump_attention_dataset(const std::vector<AttnSample>& samples, int map_h, int map_w,
                            const std::string& dir, const std::string& prefix) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / (prefix + "_index.jsonl"));
    if (!index) throw std::runtime_error("dump_attention_dataset: cannot open index");
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%06zu.pgm", prefix.c_str(), i);
        // maps can dip below zero after noise; shift-scale into [0,1] for PGM
        double mn = samples[i].map[0], mx = samples[i].map[0];
        for (double v : samples[i].map) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        const double scale = mx > mn ? 1.0 / (mx - mn) : 1.0;
        std::vector<double> scaled(samples[i].map.size());
        for (size_t k = 0; k < scaled.size(); ++k) scaled[k] = (samples[i].map[k] - mn) * scale;
        write_pgm((fs::path(dir) / name).string(), scaled, map_h, map_w, 65535);
        nlohmann::json row;
        row["path"] = name;
        row["value_min"] = mn;
        row["value_max"] = mx;
        row["theta"] = {samples[i].theta.s_x, samples[i].theta.s_y, samples[i].theta.t_x,
                        samples[i].theta.t_y};
        row["box"] = {samples[i].box.x0, samples[i].box.y0, samples[i].box.x1, samples[i].box.y1};
        index << row.dump() << "\n";
    }
}

}  // namespace e2eloc
