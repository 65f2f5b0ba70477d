#pragma once

// Slide rasters on disk: binary PPM (P6) pixels plus an aligned binary PGM
// (P5) label mask named <stem>.labels.pgm, and a plain-text slide manifest.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "slide.hpp"

namespace pathossl {

namespace fs = std::filesystem;

inline fs::path label_path_for(const fs::path& ppm) {
    fs::path p = ppm;
    p.replace_extension(".labels.pgm");
    return p;
}

namespace detail {

inline void write_netpbm(const fs::path& path, const char* magic, int w, int h, const std::vector<std::uint8_t>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << magic << '\n' << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

inline int read_header_int(std::istream& in, const std::string& file) {
    // skips whitespace and '#' comments
    int c;
    while ((c = in.peek()) != EOF) {
        if (std::isspace(c)) {
            in.get();
        } else if (c == '#') {
            std::string skip;
            std::getline(in, skip);
        } else {
            break;
        }
    }
    int v = -1;
    if (!(in >> v) || v < 0) throw ParseError("bad netpbm header in " + file);
    return v;
}

inline std::vector<std::uint8_t> read_netpbm(const fs::path& path, const char* magic, int channels, int& w, int& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string m;
    in >> m;
    if (m != magic) throw ParseError(path.string() + ": expected " + magic + " magic, got '" + m + "'");
    w = read_header_int(in, path.string());
    h = read_header_int(in, path.string());
    const int maxval = read_header_int(in, path.string());
    if (maxval != 255) throw ParseError(path.string() + ": only maxval 255 is supported");
    in.get();  // single whitespace after maxval
    std::vector<std::uint8_t> data(static_cast<std::size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (in.gcount() != static_cast<std::streamsize>(data.size()))
        throw ParseError(path.string() + ": truncated raster");
    return data;
}

}  // namespace detail

inline void write_slide(const Slide& slide, const fs::path& ppm) {
    slide.validate();
    detail::write_netpbm(ppm, "P6", slide.width, slide.height, slide.pixels);
    detail::write_netpbm(label_path_for(ppm), "P5", slide.width, slide.height, slide.labels);
}

/// Reads a slide; a missing label mask yields an all-normal mask.
inline Slide read_slide(const fs::path& ppm, std::uint32_t slide_id) {
    Slide s;
    s.slide_id = slide_id;
    s.pixels = detail::read_netpbm(ppm, "P6", 3, s.width, s.height);
    const auto lp = label_path_for(ppm);
    if (fs::exists(lp)) {
        int lw = 0, lh = 0;
        s.labels = detail::read_netpbm(lp, "P5", 1, lw, lh);
        if (lw != s.width || lh != s.height) throw ParseError(lp.string() + ": label mask size mismatch");
    } else {
        s.labels.assign(s.pixel_count(), static_cast<std::uint8_t>(RegionLabel::normal));
    }
    s.validate();
    return s;
}

/// Tiles travel as plain PPM files (normalisation targets, debug dumps).
inline void write_tile(const Tile& tile, const fs::path& ppm) {
    detail::write_netpbm(ppm, "P6", tile.size, tile.size, tile.rgb);
}

inline Tile read_tile(const fs::path& ppm) {
    Tile t;
    int w = 0, h = 0;
    t.rgb = detail::read_netpbm(ppm, "P6", 3, w, h);
    if (w != h || w < 1) throw ParseError(ppm.string() + ": a tile must be a non-empty square raster");
    t.size = w;
    return t;
}

/// Slide paths in manifest order; relative paths resolve against the
/// manifest's directory. The position in the returned list is the slide id.
inline std::vector<fs::path> read_slide_manifest(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open " + manifest.string());
    std::vector<fs::path> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        const std::string entry = line.substr(b, e - b + 1);
        fs::path p(entry);
        if (p.extension() != ".ppm")
            throw ParseError(manifest.string(), lineno, "expected a .ppm path, got '" + entry + "'");
        if (p.is_relative()) p = manifest.parent_path() / p;
        out.push_back(p);
    }
    return out;
}

inline void write_slide_manifest(const fs::path& manifest, const std::vector<std::string>& entries) {
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw IoError("cannot open " + manifest.string() + " for writing");
    out << "# slide manifest: one PPM path per line, slide id = order\n";
    for (const auto& e : entries) out << e << '\n';
    if (!out) throw IoError("failed writing " + manifest.string());
}

inline std::vector<Slide> load_slides(const fs::path& manifest) {
    const auto paths = read_slide_manifest(manifest);
    std::vector<Slide> slides;
    slides.reserve(paths.size());
    for (std::size_t i = 0; i < paths.size(); ++i) slides.push_back(read_slide(paths[i], static_cast<std::uint32_t>(i)));
    return slides;
}

}  // namespace pathossl
