#pragma once

// Training-time augmentation: flips, small rotations and colour jitter.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "error.hpp"
#include "rng.hpp"
#include "slide.hpp"

namespace pathossl {

struct AugmentConfig {
    bool h_flip = true;
    bool v_flip = true;
    double flip_probability = 0.5;
    double max_rotation_deg = 20.0;
    double jitter = 0.075;  // brightness, saturation and hue
    std::uint64_t rng_seed = 0;

    static AugmentConfig disabled() {
        AugmentConfig c;
        c.h_flip = c.v_flip = false;
        c.max_rotation_deg = 0.0;
        c.jitter = 0.0;
        return c;
    }

    void validate() const {
        if (!(max_rotation_deg >= 0.0)) throw ContractError("max_rotation_deg must be >= 0");
        if (!(jitter >= 0.0)) throw ContractError("jitter must be >= 0");
        if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
            throw ContractError("flip_probability must lie in [0,1]");
    }
};

inline Tile hflip(const Tile& t) {
    Tile out = t;
    for (int y = 0; y < t.size; ++y)
        for (int x = 0; x < t.size; ++x) std::copy_n(t.at(t.size - 1 - x, y), 3, out.at(x, y));
    return out;
}

inline Tile vflip(const Tile& t) {
    Tile out = t;
    for (int y = 0; y < t.size; ++y)
        for (int x = 0; x < t.size; ++x) std::copy_n(t.at(x, t.size - 1 - y), 3, out.at(x, y));
    return out;
}

namespace detail {

// reflect about the first and last sample centres (no edge repeat)
inline double reflect_coord(double u, int n) {
    if (n == 1) return 0.0;
    const double period = 2.0 * (n - 1);
    u = std::fmod(std::abs(u), period);
    return u > n - 1 ? period - u : u;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
    } else if (mx == r) {
        h = (g - b) / d / 6.0;
    } else if (mx == g) {
        h = ((b - r) / d + 2.0) / 6.0;
    } else {
        h = ((r - g) / d + 4.0) / 6.0;
    }
    h -= std::floor(h);
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = (h - std::floor(h)) * 6.0;
    const int i = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

}  // namespace detail

/// Rotation about the tile centre with bilinear resampling and reflect padding.
inline Tile rotate(const Tile& t, double degrees) {
    Tile out = t;
    const int n = t.size;
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double centre = (n - 1) / 2.0;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double dx = x - centre, dy = y - centre;
            const double sx = detail::reflect_coord(c * dx + s * dy + centre, n);
            const double sy = detail::reflect_coord(-s * dx + c * dy + centre, n);
            const int x0 = std::min(static_cast<int>(sx), n - 1);
            const int y0 = std::min(static_cast<int>(sy), n - 1);
            const int x1 = std::min(x0 + 1, n - 1);
            const int y1 = std::min(y0 + 1, n - 1);
            const double fx = sx - x0, fy = sy - y0;
            for (int k = 0; k < 3; ++k) {
                const double v = (1 - fx) * (1 - fy) * t.at(x0, y0)[k] + fx * (1 - fy) * t.at(x1, y0)[k] +
                                 (1 - fx) * fy * t.at(x0, y1)[k] + fx * fy * t.at(x1, y1)[k];
                out.at(x, y)[k] = detail::clamp_u8(v);
            }
        }
    }
    return out;
}

/// Brightness and saturation are multiplicative, hue is an additive shift as
/// a fraction of the hue circle. Applied in that order, rounded once.
inline Tile color_jitter(const Tile& t, double brightness, double saturation, double hue_shift) {
    Tile out = t;
    const std::size_t n = static_cast<std::size_t>(t.size) * t.size;
    for (std::size_t i = 0; i < n; ++i) {
        double r = t.rgb[i * 3] / 255.0, g = t.rgb[i * 3 + 1] / 255.0, b = t.rgb[i * 3 + 2] / 255.0;
        r = std::clamp(r * brightness, 0.0, 1.0);
        g = std::clamp(g * brightness, 0.0, 1.0);
        b = std::clamp(b * brightness, 0.0, 1.0);
        const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
        r = std::clamp(gray + saturation * (r - gray), 0.0, 1.0);
        g = std::clamp(gray + saturation * (g - gray), 0.0, 1.0);
        b = std::clamp(gray + saturation * (b - gray), 0.0, 1.0);
        if (hue_shift != 0.0) {
            double h, s, v;
            detail::rgb_to_hsv(r, g, b, h, s, v);
            detail::hsv_to_rgb(h + hue_shift, s, v, r, g, b);
        }
        out.rgb[i * 3] = detail::clamp_u8(r * 255.0);
        out.rgb[i * 3 + 1] = detail::clamp_u8(g * 255.0);
        out.rgb[i * 3 + 2] = detail::clamp_u8(b * 255.0);
    }
    return out;
}

/// Random flips, rotation and colour jitter, fully determined by draw_seed.
/// All six random draws are consumed regardless of which knobs are enabled.
inline Tile augment(const Tile& tile, const AugmentConfig& cfg, std::uint64_t draw_seed) {
    if (tile.rgb.size() != static_cast<std::size_t>(tile.size) * tile.size * 3)
        throw ContractError("augment requires a square tile");
    cfg.validate();
    Rng rng(derive_seed(cfg.rng_seed, {draw_seed}));
    const bool do_h = rng.uniform() < cfg.flip_probability && cfg.h_flip;
    const bool do_v = rng.uniform() < cfg.flip_probability && cfg.v_flip;
    const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    const double brightness = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    const double saturation = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    const double hue = rng.uniform(-cfg.jitter, cfg.jitter);

    Tile out = tile;
    if (do_h) out = hflip(out);
    if (do_v) out = vflip(out);
    if (cfg.max_rotation_deg > 0.0 && angle != 0.0) out = rotate(out, angle);
    if (cfg.jitter > 0.0) out = color_jitter(out, std::max(0.0, brightness), std::max(0.0, saturation), hue);
    return out;
}

}  // namespace pathossl
