#pragma once

// Descriptor sets and the two evaluation metrics: the average descriptor
// distance ratio over labelled pairs, and top-1 cross-slide tumor retrieval.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "checkpoint.hpp"
#include "color.hpp"
#include "error.hpp"
#include "net.hpp"
#include "pairs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "slide.hpp"

namespace pathossl {

struct DescriptorSet {
    int dim = kEmbeddingDim;
    std::vector<TileCoord> ids;
    std::vector<RegionLabel> labels;
    std::vector<float> embeddings;  // ids.size() x dim, row-major

    std::size_t size() const { return ids.size(); }

    std::span<const float> embedding(std::size_t i) const {
        return {embeddings.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }

    void push_back(const TileCoord& id, RegionLabel label, std::span<const float> e) {
        if (static_cast<int>(e.size()) != dim) throw ContractError("embedding dimension mismatch");
        ids.push_back(id);
        labels.push_back(label);
        embeddings.insert(embeddings.end(), e.begin(), e.end());
    }

    void validate() const {
        if (labels.size() != ids.size() || embeddings.size() != ids.size() * static_cast<std::size_t>(dim))
            throw ContractError("descriptor set arrays are not parallel");
        std::set<TileCoord> seen(ids.begin(), ids.end());
        if (seen.size() != ids.size()) throw ContractError("descriptor ids are not unique");
    }

    std::size_t count(RegionLabel l) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l)); }

    bool operator==(const DescriptorSet&) const = default;
};

struct EmbedOptions {
    int tile_size = kDefaultTileSize;
    bool exclude_background = true;
    double background_threshold = kDefaultBackgroundThreshold;
    int workers = 1;
};

/// The embedding of one tile exactly as embed_all computes it.
inline std::vector<float> embed_tile(const NetParams<float>& params, const Tile& tile, const LabStats& target) {
    return forward(params, to_input<float>(stain_normalize(tile, target)));
}

/// Embeds every eligible grid tile of every slide (slide order, then grid
/// order) after stain normalisation to `target`.
inline DescriptorSet embed_all(const NetParams<float>& params, const std::vector<Slide>& slides,
                               const LabStats& target, const EmbedOptions& opt = {}) {
    if (params.arch.tile_size != opt.tile_size)
        throw ContractError("checkpoint tile_size " + std::to_string(params.arch.tile_size) +
                            " does not match requested " + std::to_string(opt.tile_size));
    std::vector<std::pair<const Slide*, TileCoord>> work;
    std::vector<RegionLabel> labels;
    for (const auto& s : slides) {
        for (const auto& c : tile_grid(s, opt.tile_size)) {
            const auto l = tile_label(s, c, opt.tile_size, opt.background_threshold);
            if (opt.exclude_background && l == RegionLabel::background) continue;
            work.emplace_back(&s, c);
            labels.push_back(l);
        }
    }
    DescriptorSet set;
    set.dim = params.arch.embed_dim;
    set.ids.resize(work.size());
    set.labels = std::move(labels);
    set.embeddings.resize(work.size() * static_cast<std::size_t>(set.dim));
    parallel_for(work.size(), opt.workers, [&](std::size_t i) {
        const auto& [slide, coord] = work[i];
        const auto e = embed_tile(params, extract_tile(*slide, coord, opt.tile_size), target);
        set.ids[i] = coord;
        std::copy(e.begin(), e.end(), set.embeddings.begin() + static_cast<std::ptrdiff_t>(i * set.dim));
    });
    set.validate();
    return set;
}

/// Default normalisation target: the first grid tile of the first slide that
/// is not background.
inline Tile default_target_tile(const std::vector<Slide>& slides, int tile_size,
                                double background_threshold = kDefaultBackgroundThreshold) {
    for (const auto& s : slides)
        for (const auto& c : tile_grid(s, tile_size))
            if (tile_label(s, c, tile_size, background_threshold) != RegionLabel::background)
                return extract_tile(s, c, tile_size);
    throw DomainError("no tissue tile available to serve as normalisation target");
}

struct EvalPair {
    std::size_t a = 0;
    std::size_t b = 0;
    PairLabel label = PairLabel::similar;
};

using EvalPairSet = std::vector<EvalPair>;

/// Ground-truth pairing: each tumor tile is paired with up to k_similar tumor
/// tiles and k_dissimilar non-tumor tiles from the same slide, drawn
/// uniformly without replacement with per-anchor seeds.
inline EvalPairSet label_pairs(const DescriptorSet& set, int k_similar = 8, int k_dissimilar = 8,
                               std::uint64_t seed = 0) {
    std::map<std::uint32_t, std::vector<std::size_t>> by_slide;
    for (std::size_t i = 0; i < set.size(); ++i) by_slide[set.ids[i].slide_id].push_back(i);
    EvalPairSet out;
    for (const auto& [slide, members] : by_slide) {
        for (std::size_t anchor : members) {
            if (set.labels[anchor] != RegionLabel::tumor) continue;
            std::vector<std::size_t> tumor, other;
            for (std::size_t j : members) {
                if (j == anchor) continue;
                (set.labels[j] == RegionLabel::tumor ? tumor : other).push_back(j);
            }
            Rng rng(derive_seed(seed, {slide, anchor, 0xE7A1}));
            for (auto p : sample_without_replacement(tumor.size(), static_cast<std::size_t>(k_similar), rng))
                out.push_back({anchor, tumor[p], PairLabel::similar});
            for (auto p : sample_without_replacement(other.size(), static_cast<std::size_t>(k_dissimilar), rng))
                out.push_back({anchor, other[p], PairLabel::dissimilar});
        }
    }
    return out;
}

/// Spatial-proximity pairing over the descriptor tiles, reusing the
/// self-supervised sampler.
inline EvalPairSet spatial_pairs(const DescriptorSet& set, int tile_size, const SamplerConfig& cfg) {
    std::map<std::uint32_t, std::vector<TileCoord>> grouped;
    std::map<TileCoord, std::size_t> index;
    for (std::size_t i = 0; i < set.size(); ++i) {
        grouped[set.ids[i].slide_id].push_back(set.ids[i]);
        index[set.ids[i]] = i;
    }
    std::vector<std::vector<TileCoord>> tiles;
    for (auto& [_, v] : grouped) tiles.push_back(std::move(v));
    EvalPairSet out;
    for (const auto& rec : sample_pairs(tiles, tile_size, cfg)) out.push_back({index.at(rec.a), index.at(rec.b), rec.label});
    return out;
}

inline double descriptor_distance(const DescriptorSet& set, std::size_t i, std::size_t j) {
    return l2_distance(set.embedding(i), set.embedding(j));
}

/// Mean dissimilar-pair distance divided by mean similar-pair distance.
inline double addr(const DescriptorSet& set, const EvalPairSet& pairs) {
    double sum[2] = {0.0, 0.0};
    std::size_t count[2] = {0, 0};
    for (const auto& p : pairs) {
        if (p.a >= set.size() || p.b >= set.size()) throw ContractError("pair index out of range");
        const int k = static_cast<int>(p.label);
        sum[k] += descriptor_distance(set, p.a, p.b);
        ++count[k];
    }
    if (count[0] == 0 || count[1] == 0) throw DomainError("ADDR needs at least one similar and one dissimilar pair");
    const double similar = sum[0] / static_cast<double>(count[0]);
    const double dissimilar = sum[1] / static_cast<double>(count[1]);
    if (similar == 0.0) throw DomainError("ADDR undefined: mean similar-pair distance is zero");
    return dissimilar / similar;
}

/// Exact nearest neighbour among descriptors from other slides; ties resolve
/// to the lowest index.
inline std::size_t nearest_neighbor(std::size_t query, const DescriptorSet& set) {
    if (query >= set.size()) throw ContractError("query index out of range");
    const auto slide = set.ids[query].slide_id;
    const auto q = set.embedding(query);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = set.size();
    for (std::size_t j = 0; j < set.size(); ++j) {
        if (set.ids[j].slide_id == slide) continue;
        const auto e = set.embedding(j);
        double s = 0.0;
        for (std::size_t k = 0; k < q.size(); ++k) {
            const double d = static_cast<double>(q[k]) - static_cast<double>(e[k]);
            s += d * d;
            if (s > best) break;
        }
        if (s < best) {
            best = s;
            best_idx = j;
        }
    }
    if (best_idx == set.size()) throw DomainError("no descriptors on other slides than the query's");
    return best_idx;
}

/// Fraction of tumor descriptors whose cross-slide nearest neighbour is tumor.
inline double retrieval_ratio(const DescriptorSet& set, int workers = 1) {
    std::vector<std::size_t> queries;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (set.labels[i] == RegionLabel::tumor) queries.push_back(i);
    if (queries.empty()) throw DomainError("retrieval ratio undefined: no tumor descriptors");
    std::vector<std::uint8_t> hit(queries.size(), 0);
    parallel_for(queries.size(), workers, [&](std::size_t i) {
        hit[i] = set.labels[nearest_neighbor(queries[i], set)] == RegionLabel::tumor;
    });
    const auto hits = std::count(hit.begin(), hit.end(), std::uint8_t{1});
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

/// Prevalence of tumor among all descriptors.
inline double tumor_prevalence(const DescriptorSet& set) {
    return set.size() ? static_cast<double>(set.count(RegionLabel::tumor)) / static_cast<double>(set.size()) : 0.0;
}

struct Projection {
    int dims = 2;
    std::vector<double> coords;     // size() x dims
    std::vector<double> variances;  // per component, descending
};

/// Mean-centred projection onto the leading principal components, with each
/// component's sign chosen so its largest-magnitude loading is positive.
inline Projection pca_project(const DescriptorSet& set, int dims = 2) {
    const auto n = set.size();
    const int d = set.dim;
    if (dims < 1 || dims > d) throw ContractError("dims must lie in [1, descriptor dim]");
    if (n <= static_cast<std::size_t>(dims)) throw DomainError("PCA needs more descriptors than output dims");

    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto e = set.embedding(i);
        for (int k = 0; k < d; ++k) X(static_cast<Eigen::Index>(i), k) = e[k];
    }
    const Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw DomainError("covariance eigen-decomposition failed");

    Projection out;
    out.dims = dims;
    Eigen::MatrixXd basis(d, dims);
    for (int c = 0; c < dims; ++c) {
        // eigenvalues come back ascending
        const int src = d - 1 - c;
        Eigen::VectorXd v = eig.eigenvectors().col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        basis.col(c) = v;
        out.variances.push_back(std::max(0.0, eig.eigenvalues()(src)));
    }
    const Eigen::MatrixXd Y = X * basis;
    out.coords.resize(n * static_cast<std::size_t>(dims));
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < dims; ++c) out.coords[i * dims + c] = Y(static_cast<Eigen::Index>(i), c);
    return out;
}

// Descriptor file, little-endian: "SSDF" u32 version=1, u32 dim, u64 count,
// then per record u32 slide_id, u32 x, u32 y, u8 label, dim x f32.
inline constexpr char kDescriptorMagic[4] = {'S', 'S', 'D', 'F'};

inline void write_descriptors(const std::filesystem::path& path, const DescriptorSet& set) {
    set.validate();
    detail::LeWriter w;
    w.bytes(kDescriptorMagic, 4);
    w.uint<std::uint32_t>(1);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(set.dim));
    w.uint<std::uint64_t>(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        w.uint<std::uint32_t>(set.ids[i].slide_id);
        w.uint<std::uint32_t>(static_cast<std::uint32_t>(set.ids[i].x));
        w.uint<std::uint32_t>(static_cast<std::uint32_t>(set.ids[i].y));
        w.uint<std::uint8_t>(static_cast<std::uint8_t>(set.labels[i]));
        for (float v : set.embedding(i)) w.f32(v);
    }
    detail::write_file(path, w.buffer());
}

inline DescriptorSet read_descriptors(const std::filesystem::path& path) {
    detail::LeReader r(detail::read_file(path), path.string());
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kDescriptorMagic, 4) != 0) throw ParseError(path.string() + ": not a descriptor file");
    if (r.uint<std::uint32_t>() != 1) throw ParseError(path.string() + ": unsupported descriptor version");
    DescriptorSet set;
    set.dim = static_cast<int>(r.uint<std::uint32_t>());
    if (set.dim < 1) throw ParseError(path.string() + ": bad dimension");
    const auto count = r.uint<std::uint64_t>();
    std::vector<float> e(static_cast<std::size_t>(set.dim));
    for (std::uint64_t i = 0; i < count; ++i) {
        TileCoord c;
        c.slide_id = r.uint<std::uint32_t>();
        c.x = static_cast<int>(r.uint<std::uint32_t>());
        c.y = static_cast<int>(r.uint<std::uint32_t>());
        const auto l = r.uint<std::uint8_t>();
        if (l > 2) throw ParseError(path.string() + ": bad label value");
        for (auto& v : e) v = r.f32();
        set.push_back(c, static_cast<RegionLabel>(l), e);
    }
    if (!r.at_end()) throw ParseError(path.string() + ": trailing bytes");
    set.validate();
    return set;
}

inline void write_projection_csv(const std::filesystem::path& path, const DescriptorSet& set, const Projection& p) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "slide_id,x,y,label";
    for (int c = 0; c < p.dims; ++c) out << ",c" << (c + 1);
    out << '\n' << std::setprecision(9);
    for (std::size_t i = 0; i < set.size(); ++i) {
        out << set.ids[i].slide_id << ',' << set.ids[i].x << ',' << set.ids[i].y << ','
            << static_cast<int>(set.labels[i]);
        for (int c = 0; c < p.dims; ++c) out << ',' << p.coords[i * p.dims + c];
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<std::pair<std::string, double>>& metrics) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "metric,value\n" << std::setprecision(12);
    for (const auto& [k, v] : metrics) out << k << ',' << v << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace pathossl
