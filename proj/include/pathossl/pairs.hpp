#pragma once

// Self-supervised pair labelling by spatial proximity: tiles whose centres are
// close are labelled similar, tiles far apart dissimilar, and anything in
// between is never emitted.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "slide.hpp"

namespace pathossl {

/// Numeric value is the y of the contrastive loss.
enum class PairLabel : std::uint8_t { similar = 0, dissimilar = 1 };

/// Reference thresholds, in pixels, for 224 px tiles at 10x.
inline constexpr double kReferenceTileSize = 224.0;
inline constexpr double kReferenceNear = 1792.0;
inline constexpr double kReferenceFar = 9408.0;

struct SamplerConfig {
    double d_near = kReferenceNear;
    double d_far = kReferenceFar;
    int k_near = 32;
    int k_far = 32;
    std::uint64_t rng_seed = 0;
    bool exclude_background = true;
    double background_threshold = kDefaultBackgroundThreshold;

    /// Thresholds rescaled so that they cover the same number of tiles as the
    /// reference values do for 224 px tiles.
    static SamplerConfig scaled_to(int tile_size) {
        SamplerConfig c;
        c.d_near = kReferenceNear * tile_size / kReferenceTileSize;
        c.d_far = kReferenceFar * tile_size / kReferenceTileSize;
        return c;
    }

    void validate() const {
        if (!(d_near > 0.0 && d_near < d_far)) throw ContractError("sampler requires 0 < d_near < d_far");
        if (k_near < 0 || k_far < 0) throw ContractError("k_near and k_far must be >= 0");
    }
};

struct PairRecord {
    TileCoord a;
    TileCoord b;
    PairLabel label = PairLabel::similar;

    bool operator==(const PairRecord&) const = default;
};

using PairManifest = std::vector<PairRecord>;

inline double center_distance(const TileCoord& a, const TileCoord& b, int tile_size) {
    if (a.slide_id != b.slide_id) throw DomainError("center_distance across different slides is undefined");
    // the half-tile offsets cancel, but keep the definition explicit
    const double ax = a.x + tile_size / 2.0, ay = a.y + tile_size / 2.0;
    const double bx = b.x + tile_size / 2.0, by = b.y + tile_size / 2.0;
    return std::hypot(ax - bx, ay - by);
}

inline std::optional<PairLabel> label_for_distance(double d, const SamplerConfig& cfg) {
    if (d > 0.0 && d <= cfg.d_near) return PairLabel::similar;
    if (d >= cfg.d_far) return PairLabel::dissimilar;
    return std::nullopt;
}

/// Grid tiles per slide eligible for sampling (background tiles dropped when
/// configured).
inline std::vector<std::vector<TileCoord>> sampling_tiles(const std::vector<Slide>& slides, int tile_size,
                                                          const SamplerConfig& cfg) {
    std::vector<std::vector<TileCoord>> out;
    out.reserve(slides.size());
    for (const auto& s : slides) {
        auto grid = tile_grid(s, tile_size);
        if (cfg.exclude_background) {
            std::erase_if(grid, [&](const TileCoord& c) {
                return tile_label(s, c, tile_size, cfg.background_threshold) == RegionLabel::background;
            });
        }
        out.push_back(std::move(grid));
    }
    return out;
}

/// For each anchor (grid order), up to k_near similar and k_far dissimilar
/// partners drawn uniformly without replacement from the same slide. Each
/// anchor's draw is seeded from (rng_seed, slide_id, anchor index).
inline PairManifest sample_pairs(const std::vector<std::vector<TileCoord>>& tiles_per_slide, int tile_size,
                                 const SamplerConfig& cfg, int workers = 1) {
    cfg.validate();
    PairManifest manifest;
    for (const auto& tiles : tiles_per_slide) {
        std::vector<PairManifest> per_anchor(tiles.size());
        parallel_for(tiles.size(), workers, [&](std::size_t i) {
            const TileCoord& anchor = tiles[i];
            std::vector<std::size_t> near, far;
            for (std::size_t j = 0; j < tiles.size(); ++j) {
                if (j == i) continue;
                const auto label = label_for_distance(center_distance(anchor, tiles[j], tile_size), cfg);
                if (!label) continue;
                (*label == PairLabel::similar ? near : far).push_back(j);
            }
            Rng rng(derive_seed(cfg.rng_seed, {anchor.slide_id, i}));
            auto& out = per_anchor[i];
            auto emit = [&](const std::vector<std::size_t>& cand, int k, PairLabel label) {
                auto pick = sample_without_replacement(cand.size(), static_cast<std::size_t>(k), rng);
                std::sort(pick.begin(), pick.end());
                for (auto p : pick) out.push_back({anchor, tiles[cand[p]], label});
            };
            emit(near, cfg.k_near, PairLabel::similar);
            emit(far, cfg.k_far, PairLabel::dissimilar);
        });
        for (auto& v : per_anchor) manifest.insert(manifest.end(), v.begin(), v.end());
    }
    return manifest;
}

inline constexpr const char* kPairCsvHeader = "slide_a,x_a,y_a,slide_b,x_b,y_b,label";

inline void write_pair_manifest(const std::filesystem::path& path, const PairManifest& pairs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << kPairCsvHeader << '\n';
    for (const auto& p : pairs) {
        out << p.a.slide_id << ',' << p.a.x << ',' << p.a.y << ',' << p.b.slide_id << ',' << p.b.x << ',' << p.b.y
            << ',' << static_cast<int>(p.label) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

inline PairManifest read_pair_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || line != kPairCsvHeader)
        throw ParseError(path.string(), lineno, "expected header '" + std::string(kPairCsvHeader) + "'");
    PairManifest pairs;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        long long v[7];
        char comma;
        bool ok = static_cast<bool>(ss >> v[0]);
        for (int k = 1; ok && k < 7; ++k) ok = (ss >> comma >> v[k]) && comma == ',';
        std::string rest;
        if (!ok || (ss >> rest) || v[6] < 0 || v[6] > 1 || v[0] < 0 || v[3] < 0)
            throw ParseError(path.string(), lineno, "malformed pair record '" + line + "'");
        PairRecord r{{static_cast<std::uint32_t>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2])},
                     {static_cast<std::uint32_t>(v[3]), static_cast<int>(v[4]), static_cast<int>(v[5])},
                     static_cast<PairLabel>(v[6])};
        pairs.push_back(r);
    }
    return pairs;
}

}  // namespace pathossl
