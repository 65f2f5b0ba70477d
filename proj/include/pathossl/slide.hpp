#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace pathossl {

inline constexpr int kDefaultTileSize = 32;
inline constexpr double kDefaultBackgroundThreshold = 0.8;

enum class RegionLabel : std::uint8_t { background = 0, normal = 1, tumor = 2 };

inline const char* to_string(RegionLabel label) {
    switch (label) {
        case RegionLabel::background: return "background";
        case RegionLabel::normal: return "normal";
        case RegionLabel::tumor: return "tumor";
    }
    return "?";
}

using Rgb = std::array<std::uint8_t, 3>;

/// A raster image with an aligned per-pixel region label mask.
struct Slide {
    std::uint32_t slide_id = 0;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB
    std::vector<std::uint8_t> labels;  // row-major RegionLabel values

    Slide() = default;
    Slide(std::uint32_t id, int w, int h)
        : slide_id(id),
          width(w),
          height(h),
          pixels(static_cast<std::size_t>(w) * h * 3, 0),
          labels(static_cast<std::size_t>(w) * h, 0) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    Rgb rgb(int x, int y) const {
        const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
        return {pixels[i], pixels[i + 1], pixels[i + 2]};
    }

    RegionLabel label(int x, int y) const {
        return static_cast<RegionLabel>(labels[static_cast<std::size_t>(y) * width + x]);
    }

    void validate() const {
        if (width <= 0 || height <= 0) throw InvalidSpecError("slide dimensions must be positive");
        if (pixels.size() != pixel_count() * 3) throw InvalidSpecError("pixel buffer length mismatch");
        if (labels.size() != pixel_count()) throw InvalidSpecError("label buffer length mismatch");
        for (auto l : labels)
            if (l > 2) throw InvalidSpecError("label value " + std::to_string(l) + " out of range");
    }

    bool operator==(const Slide&) const = default;
};

/// Top-left corner of a square tile within a slide.
struct TileCoord {
    std::uint32_t slide_id = 0;
    int x = 0;
    int y = 0;

    auto operator<=>(const TileCoord&) const = default;
};

struct Tile {
    TileCoord coord;
    int size = 0;
    std::vector<std::uint8_t> rgb;  // size * size * 3, row-major

    std::uint8_t* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3; }
    const std::uint8_t* at(int x, int y) const {
        return rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3;
    }

    bool operator==(const Tile&) const = default;
};

/// Per-class texture parameters for the synthetic slide generator.
struct ClassTexture {
    Rgb base{200, 200, 200};
    double noise_amplitude = 8.0;  // peak deviation of fine value noise, in 8-bit units
    double spot_density = 0.2;     // probability that a nucleus cell carries a nucleus
    double spot_radius = 2.0;      // mean nucleus radius in pixels
    double streak_strength = 0.0;  // amplitude of fibrous stroma pattern in [0, 1]
};

struct SyntheticSlideSpec {
    int width = 2048;
    int height = 2048;
    double tumor_fraction = 0.05;
    double background_fraction = 0.2;
    int min_region_diameter = 4 * kDefaultTileSize;
    int tile_size = kDefaultTileSize;
    double character_scale = 640.0;  // lattice spacing of the slowly varying tissue character
    int nucleus_cell = 6;            // side of the hashed cells that each hold at most one nucleus
    std::array<ClassTexture, 3> textures{
        ClassTexture{{238, 234, 240}, 3.0, 0.01, 1.0, 0.0},   // background: glass
        ClassTexture{{226, 168, 196}, 10.0, 0.30, 1.3, 0.6},  // normal: stroma + sparse nuclei
        ClassTexture{{196, 140, 190}, 10.0, 0.90, 2.3, 0.0},  // tumor: crowded large nuclei
    };
    Rgb nucleus_color{78, 42, 118};
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (tile_size < 1) throw InvalidSpecError("tile_size must be >= 1");
        if (!(tumor_fraction >= 0.0 && tumor_fraction <= 1.0))
            throw InvalidSpecError("tumor_fraction must lie in [0,1]");
        if (!(background_fraction >= 0.0 && background_fraction <= 1.0))
            throw InvalidSpecError("background_fraction must lie in [0,1]");
        if (!(tumor_fraction + background_fraction < 1.0))
            throw InvalidSpecError("tumor_fraction + background_fraction must be < 1");
        if (min_region_diameter < 2 * tile_size)
            throw InvalidSpecError("min_region_diameter must be >= 2 * tile_size");
        if (width < min_region_diameter || height < min_region_diameter)
            throw InvalidSpecError("slide dimensions smaller than min_region_diameter");
        if (width < tile_size || height < tile_size)
            throw InvalidSpecError("slide dimensions smaller than tile_size");
        if (!(character_scale > 0.0)) throw InvalidSpecError("character_scale must be > 0");
        if (nucleus_cell < 2) throw InvalidSpecError("nucleus_cell must be >= 2");
    }
};

namespace detail {

inline double hash_unit(std::uint64_t seed, std::int64_t i, std::int64_t j, std::uint64_t salt) {
    return bits_to_unit(derive_seed(seed, {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j), salt}));
}

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

/// Lattice value noise in [0,1) with smoothstep interpolation.
inline double value_noise(std::uint64_t seed, std::uint64_t salt, double x, double y, double spacing) {
    const double gx = x / spacing;
    const double gy = y / spacing;
    const double fx = std::floor(gx);
    const double fy = std::floor(gy);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double tx = smoothstep(gx - fx);
    const double ty = smoothstep(gy - fy);
    const double v00 = hash_unit(seed, ix, iy, salt);
    const double v10 = hash_unit(seed, ix + 1, iy, salt);
    const double v01 = hash_unit(seed, ix, iy + 1, salt);
    const double v11 = hash_unit(seed, ix + 1, iy + 1, salt);
    const double a = v00 + (v10 - v00) * tx;
    const double b = v01 + (v11 - v01) * tx;
    return a + (b - a) * ty;
}

/// Two-octave value noise normalised back to roughly [0,1).
inline double fractal_noise(std::uint64_t seed, std::uint64_t salt, double x, double y, double spacing) {
    return (2.0 * value_noise(seed, salt, x, y, spacing) + value_noise(seed, salt + 1, x, y, spacing / 2.0)) /
           3.0;
}

/// Axis-aligned square opening on a binary mask: a pixel survives iff some
/// side x side square containing it lies entirely inside the mask and image.
inline std::vector<std::uint8_t> square_opening(const std::vector<std::uint8_t>& mask, int width, int height,
                                                int side) {
    const auto w = static_cast<std::size_t>(width);
    std::vector<std::uint8_t> tmp(mask.size(), 0);
    std::vector<std::uint8_t> eroded(mask.size(), 0);
    std::vector<int> prefix;

    // erosion, anchored at the top-left corner of the square
    prefix.assign(static_cast<std::size_t>(std::max(width, height)) + 1, 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) prefix[x + 1] = prefix[x] + (mask[y * w + x] ? 1 : 0);
        for (int x = 0; x + side <= width; ++x) tmp[y * w + x] = (prefix[x + side] - prefix[x]) == side;
    }
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) prefix[y + 1] = prefix[y] + (tmp[y * w + x] ? 1 : 0);
        for (int y = 0; y + side <= height; ++y) eroded[y * w + x] = (prefix[y + side] - prefix[y]) == side;
    }

    // dilation with the reflected square
    std::fill(tmp.begin(), tmp.end(), 0);
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) prefix[x + 1] = prefix[x] + (eroded[y * w + x] ? 1 : 0);
        for (int x = 0; x < width; ++x) tmp[y * w + x] = (prefix[x + 1] - prefix[std::max(0, x + 1 - side)]) > 0;
    }
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) prefix[y + 1] = prefix[y] + (tmp[y * w + x] ? 1 : 0);
        for (int y = 0; y < height; ++y) out[y * w + x] = (prefix[y + 1] - prefix[std::max(0, y + 1 - side)]) > 0;
    }
    return out;
}

/// Thresholds `field` (restricted to `allowed`) so that, after square opening,
/// the kept fraction of the image is as close as possible to `target`.
inline std::vector<std::uint8_t> carve_region(const std::vector<float>& field, const std::vector<std::uint8_t>& allowed,
                                              int width, int height, int side, double target) {
    const std::size_t n = field.size();
    std::vector<std::uint8_t> best(n, 0);
    if (target <= 0.0) return best;

    std::vector<float> sorted;
    sorted.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (allowed[i]) sorted.push_back(field[i]);
    if (sorted.empty()) return best;
    std::sort(sorted.begin(), sorted.end());

    auto build = [&](double q) {
        // keep the top q fraction of the image (by count) among allowed pixels
        const auto keep = static_cast<std::size_t>(std::min<double>(q * static_cast<double>(n), sorted.size()));
        std::vector<std::uint8_t> m(n, 0);
        if (keep == 0) return m;
        const float thr = sorted[sorted.size() - keep];
        for (std::size_t i = 0; i < n; ++i) m[i] = allowed[i] && field[i] >= thr;
        return square_opening(m, width, height, side);
    };
    auto fraction = [&](const std::vector<std::uint8_t>& m) {
        return static_cast<double>(std::count(m.begin(), m.end(), std::uint8_t{1})) / static_cast<double>(n);
    };

    // opening only removes pixels, so the realised fraction is monotone in q
    double lo = target;
    double hi = std::min(1.0, target * 3.0 + 0.05);
    best = build(lo);
    double best_err = std::abs(fraction(best) - target);
    for (int it = 0; it < 10 && best_err > 0.002; ++it) {
        const double mid = 0.5 * (lo + hi);
        auto m = build(mid);
        const double f = fraction(m);
        if (std::abs(f - target) < best_err) {
            best_err = std::abs(f - target);
            best = m;
        }
        (f < target ? lo : hi) = mid;
    }
    return best;
}

inline std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

/// Renders a labelled synthetic slide. Region geometry comes from thresholded
/// low-frequency value noise cleaned by a square opening of side
/// min_region_diameter; texture comes from per-class value noise, hashed
/// nuclei and a stroma streak pattern. Pure function of the spec.
inline Slide generate_synthetic_slide(const SyntheticSlideSpec& spec, std::uint32_t slide_id = 0) {
    spec.validate();
    const int w = spec.width;
    const int h = spec.height;
    const std::uint64_t seed = spec.rng_seed;
    const double region_spacing = 3.0 * spec.min_region_diameter;

    Slide slide(slide_id, w, h);
    const std::size_t n = slide.pixel_count();

    std::vector<float> bg_field(n), tumor_field(n);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y) * w + x;
            bg_field[i] = static_cast<float>(detail::fractal_noise(seed, 101, x, y, region_spacing));
            tumor_field[i] = static_cast<float>(detail::fractal_noise(seed, 202, x, y, region_spacing));
        }

    const std::vector<std::uint8_t> everywhere(n, 1);
    const auto background = detail::carve_region(bg_field, everywhere, w, h, spec.min_region_diameter,
                                                 spec.background_fraction);
    std::vector<std::uint8_t> tissue(n);
    for (std::size_t i = 0; i < n; ++i) tissue[i] = !background[i];
    const auto tumor =
        detail::carve_region(tumor_field, tissue, w, h, spec.min_region_diameter, spec.tumor_fraction);

    for (std::size_t i = 0; i < n; ++i)
        slide.labels[i] = background[i] ? 0 : (tumor[i] ? 2 : 1);

    // slide-level stain variation
    Rng slide_rng(derive_seed(seed, {0x57A1}));
    std::array<double, 3> stain_shift{};
    for (auto& s : stain_shift) s = slide_rng.uniform(-12.0, 12.0);

    const int kCell = spec.nucleus_cell;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y) * w + x;
            const auto cls = slide.labels[i];
            const ClassTexture& tex = spec.textures[cls];

            // slowly varying tissue character: nuclear density and size rise
            // while stroma fades
            const double raw = detail::value_noise(seed, 303, x, y, spec.character_scale);
            const double slow = std::clamp((raw - 0.3) / 0.4, 0.0, 1.0);
            const double fine = detail::value_noise(seed, 404 + cls, x, y, 3.0) - 0.5;

            std::array<double, 3> c{};
            for (int k = 0; k < 3; ++k)
                c[k] = tex.base[k] + stain_shift[k] * (cls == 0 ? 0.2 : 1.0) + 2.0 * tex.noise_amplitude * fine;

            if (tex.streak_strength > 0.0) {
                const double angle = 3.14159265358979 * detail::value_noise(seed, 505, x, y, spec.character_scale);
                const double phase = (x * std::cos(angle) + y * std::sin(angle)) * (0.45 + 0.4 * slow) +
                                     6.0 * detail::value_noise(seed, 506, x, y, 24.0);
                const double fib = 0.5 + 0.5 * std::sin(phase);
                for (int k = 0; k < 3; ++k) c[k] -= tex.streak_strength * (1.3 - slow) * 24.0 * fib;
            }

            // nuclei: one candidate per hashed cell, checked in the 3x3 neighbourhood
            const double density = std::clamp(tex.spot_density * (0.35 + 1.3 * slow), 0.0, 1.0);
            const double radius_scale = 0.8 + 0.5 * slow;
            const int cx = x / kCell;
            const int cy = y / kCell;
            double coverage = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const std::int64_t gx = cx + dx;
                    const std::int64_t gy = cy + dy;
                    const std::uint64_t key = derive_seed(seed, {static_cast<std::uint64_t>(gx),
                                                                 static_cast<std::uint64_t>(gy), 0x5907ULL + cls});
                    if (bits_to_unit(key) >= density) continue;
                    const std::uint64_t k2 = splitmix64(key);
                    const std::uint64_t k3 = splitmix64(k2);
                    const double sx = (static_cast<double>(gx) + bits_to_unit(k2)) * kCell;
                    const double sy = (static_cast<double>(gy) + bits_to_unit(k3)) * kCell;
                    const double r = tex.spot_radius * radius_scale * (0.75 + 0.5 * bits_to_unit(splitmix64(k3)));
                    const double d = std::hypot(x + 0.5 - sx, y + 0.5 - sy);
                    coverage = std::max(coverage, std::clamp(r + 0.5 - d, 0.0, 1.0));
                }
            }
            for (int k = 0; k < 3; ++k)
                c[k] = c[k] * (1.0 - coverage) + (spec.nucleus_color[k] + 0.5 * stain_shift[k]) * coverage;

            for (int k = 0; k < 3; ++k) slide.pixels[i * 3 + k] = detail::clamp_u8(c[k]);
        }
    }
    return slide;
}

/// Regular non-overlapping grid, row-major; remainder pixels are dropped.
inline std::vector<TileCoord> tile_grid(const Slide& slide, int tile_size) {
    if (tile_size < 1) throw ContractError("tile_size must be >= 1");
    std::vector<TileCoord> out;
    const int nx = slide.width / tile_size;
    const int ny = slide.height / tile_size;
    out.reserve(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) out.push_back({slide.slide_id, i * tile_size, j * tile_size});
    return out;
}

namespace detail {
inline void check_tile_bounds(const Slide& slide, const TileCoord& c, int tile_size) {
    if (tile_size < 1 || c.x < 0 || c.y < 0 || c.x + tile_size > slide.width || c.y + tile_size > slide.height)
        throw BoundsError("tile at (" + std::to_string(c.x) + "," + std::to_string(c.y) + ") size " +
                          std::to_string(tile_size) + " exceeds " + std::to_string(slide.width) + "x" +
                          std::to_string(slide.height));
}
}  // namespace detail

inline Tile extract_tile(const Slide& slide, const TileCoord& coord, int tile_size) {
    detail::check_tile_bounds(slide, coord, tile_size);
    Tile t{coord, tile_size, std::vector<std::uint8_t>(static_cast<std::size_t>(tile_size) * tile_size * 3)};
    const auto row_bytes = static_cast<std::size_t>(tile_size) * 3;
    for (int r = 0; r < tile_size; ++r) {
        const auto src = (static_cast<std::size_t>(coord.y + r) * slide.width + coord.x) * 3;
        std::copy_n(slide.pixels.begin() + static_cast<std::ptrdiff_t>(src), row_bytes,
                    t.rgb.begin() + static_cast<std::ptrdiff_t>(r * row_bytes));
    }
    return t;
}

/// Counts of background / normal / tumor pixels under a tile.
inline std::array<std::size_t, 3> tile_label_counts(const Slide& slide, const TileCoord& coord, int tile_size) {
    detail::check_tile_bounds(slide, coord, tile_size);
    std::array<std::size_t, 3> counts{};
    for (int r = 0; r < tile_size; ++r) {
        const auto row = static_cast<std::size_t>(coord.y + r) * slide.width + coord.x;
        for (int c = 0; c < tile_size; ++c) ++counts[slide.labels[row + c]];
    }
    return counts;
}

/// TUMOR only if every pixel is tumor; BACKGROUND if the glass fraction
/// exceeds the threshold; NORMAL otherwise.
inline RegionLabel tile_label(const Slide& slide, const TileCoord& coord, int tile_size,
                              double background_threshold = kDefaultBackgroundThreshold) {
    if (!(background_threshold >= 0.0 && background_threshold <= 1.0))
        throw ContractError("background_threshold must lie in [0,1]");
    const auto counts = tile_label_counts(slide, coord, tile_size);
    const auto total = static_cast<std::size_t>(tile_size) * tile_size;
    if (counts[2] == total) return RegionLabel::tumor;
    if (static_cast<double>(counts[0]) / static_cast<double>(total) > background_threshold)
        return RegionLabel::background;
    return RegionLabel::normal;
}

/// Most frequent pixel label under the tile; ties resolve to the lower label.
inline RegionLabel majority_label(const Slide& slide, const TileCoord& coord, int tile_size) {
    const auto counts = tile_label_counts(slide, coord, tile_size);
    const auto it = std::max_element(counts.begin(), counts.end());
    return static_cast<RegionLabel>(it - counts.begin());
}

inline std::array<double, 3> label_fractions(const Slide& slide) {
    std::array<double, 3> f{};
    for (auto l : slide.labels) f[l] += 1.0;
    for (auto& v : f) v /= static_cast<double>(slide.labels.size());
    return f;
}

}  // namespace pathossl
