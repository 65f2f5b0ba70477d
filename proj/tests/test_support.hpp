#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include <pathossl/pathossl.hpp>

namespace pathossl::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        std::string name = "pathossl_";
        if (info) name += std::string(info->test_suite_name()) + "_" + info->name();
        path_ = std::filesystem::temp_directory_path() / name;
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

inline Slide uniform_slide(std::uint32_t id, int w, int h, Rgb color, RegionLabel label = RegionLabel::normal) {
    Slide s(id, w, h);
    for (std::size_t i = 0; i < s.pixel_count(); ++i) {
        s.pixels[3 * i] = color[0];
        s.pixels[3 * i + 1] = color[1];
        s.pixels[3 * i + 2] = color[2];
        s.labels[i] = static_cast<std::uint8_t>(label);
    }
    return s;
}

inline Slide noise_slide(std::uint32_t id, int w, int h, std::uint64_t seed) {
    Slide s(id, w, h);
    Rng rng(seed);
    for (auto& p : s.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    for (auto& l : s.labels) l = 1;
    return s;
}

inline Tile random_tile(int size, std::uint64_t seed, int lo = 0, int hi = 255) {
    Tile t{{}, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
    Rng rng(seed);
    for (auto& v : t.rgb) v = static_cast<std::uint8_t>(lo + rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    return t;
}

inline std::string slurp(const std::filesystem::path& p) {
    const auto bytes = detail::read_file(p);
    return {bytes.begin(), bytes.end()};
}

}  // namespace pathossl::testing
