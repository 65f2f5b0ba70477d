#pragma once

// CIE 1976 L*a*b* under sRGB primaries / D65, and LAB mean/std stain
// normalisation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "slide.hpp"

namespace pathossl {

struct Lab {
    double L = 0.0;
    double a = 0.0;
    double b = 0.0;

    double operator[](int i) const { return i == 0 ? L : (i == 1 ? a : b); }
    double& operator[](int i) { return i == 0 ? L : (i == 1 ? a : b); }
};

namespace detail {

inline constexpr double kWhiteX = 0.95047;
inline constexpr double kWhiteY = 1.0;
inline constexpr double kWhiteZ = 1.08883;
inline constexpr double kLabDelta = 6.0 / 29.0;

inline double srgb_decode(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double srgb_encode(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline const std::array<double, 256>& srgb_decode_table() {
    static const auto table = [] {
        std::array<double, 256> t{};
        for (int i = 0; i < 256; ++i) t[i] = srgb_decode(i / 255.0);
        return t;
    }();
    return table;
}

inline double lab_f(double t) {
    constexpr double d3 = kLabDelta * kLabDelta * kLabDelta;
    return t > d3 ? std::cbrt(t) : t / (3.0 * kLabDelta * kLabDelta) + 4.0 / 29.0;
}

inline double lab_f_inv(double t) {
    return t > kLabDelta ? t * t * t : 3.0 * kLabDelta * kLabDelta * (t - 4.0 / 29.0);
}

}  // namespace detail

inline Lab rgb_to_lab(const Rgb& rgb) {
    const auto& dec = detail::srgb_decode_table();
    const double r = dec[rgb[0]], g = dec[rgb[1]], b = dec[rgb[2]];
    const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const double fx = detail::lab_f(x / detail::kWhiteX);
    const double fy = detail::lab_f(y / detail::kWhiteY);
    const double fz = detail::lab_f(z / detail::kWhiteZ);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

/// Inverse transform; out-of-gamut values clamp, rounding is to nearest.
inline Rgb lab_to_rgb(const Lab& lab) {
    const double fy = (lab.L + 16.0) / 116.0;
    const double fx = fy + lab.a / 500.0;
    const double fz = fy - lab.b / 200.0;
    const double x = detail::kWhiteX * detail::lab_f_inv(fx);
    const double y = detail::kWhiteY * detail::lab_f_inv(fy);
    const double z = detail::kWhiteZ * detail::lab_f_inv(fz);
    const double lin[3] = {
        3.2404542 * x - 1.5371385 * y - 0.4985314 * z,
        -0.9692660 * x + 1.8760108 * y + 0.0415560 * z,
        0.0556434 * x - 0.2040259 * y + 1.0572252 * z,
    };
    Rgb out{};
    for (int k = 0; k < 3; ++k) {
        const double c = std::clamp(lin[k], 0.0, 1.0);
        const double v = detail::srgb_encode(c) * 255.0;
        out[k] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    return out;
}

struct LabStats {
    std::array<double, 3> mean{};  // L, a, b
    std::array<double, 3> stddev{};  // population standard deviation
};

/// Per-channel LAB mean and population standard deviation over all pixels.
inline LabStats channel_stats(const Tile& tile) {
    const std::size_t n = static_cast<std::size_t>(tile.size) * tile.size;
    if (n == 0 || tile.rgb.size() != n * 3) throw ContractError("channel_stats requires a non-empty tile");
    LabStats s;
    std::array<double, 3> sum{}, sumsq{};
    // shifted sums keep the single pass numerically stable
    const Lab first = rgb_to_lab({tile.rgb[0], tile.rgb[1], tile.rgb[2]});
    for (std::size_t i = 0; i < n; ++i) {
        const Lab v = rgb_to_lab({tile.rgb[i * 3], tile.rgb[i * 3 + 1], tile.rgb[i * 3 + 2]});
        for (int k = 0; k < 3; ++k) {
            const double d = v[k] - first[k];
            sum[k] += d;
            sumsq[k] += d * d;
        }
    }
    for (int k = 0; k < 3; ++k) {
        const double m = sum[k] / static_cast<double>(n);
        s.mean[k] = first[k] + m;
        s.stddev[k] = std::sqrt(std::max(0.0, sumsq[k] / static_cast<double>(n) - m * m));
    }
    return s;
}

inline constexpr double kMinSourceStd = 1e-6;

/// Matches each LAB channel's mean and std to `target`; channels with
/// (near) zero source variance are only shifted.
inline Tile stain_normalize(const Tile& tile, const LabStats& target) {
    for (double s : target.stddev)
        if (!(s >= 0.0)) throw ContractError("target standard deviations must be >= 0");
    const LabStats src = channel_stats(tile);
    std::array<double, 3> scale{};
    for (int k = 0; k < 3; ++k) scale[k] = src.stddev[k] < kMinSourceStd ? 1.0 : target.stddev[k] / src.stddev[k];

    Tile out = tile;
    const std::size_t n = static_cast<std::size_t>(tile.size) * tile.size;
    for (std::size_t i = 0; i < n; ++i) {
        Lab v = rgb_to_lab({tile.rgb[i * 3], tile.rgb[i * 3 + 1], tile.rgb[i * 3 + 2]});
        for (int k = 0; k < 3; ++k) v[k] = (v[k] - src.mean[k]) * scale[k] + target.mean[k];
        const Rgb c = lab_to_rgb(v);
        std::copy(c.begin(), c.end(), out.rgb.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    return out;
}

}  // namespace pathossl
