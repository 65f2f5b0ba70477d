#include <fstream>

#include "test_support.hpp"

using namespace pathossl;
using pathossl::testing::noise_slide;
using pathossl::testing::TempDir;

TEST(SlideIo, RoundTrip) {
    TempDir dir;
    Slide s = noise_slide(0, 37, 21, 9);
    for (std::size_t i = 0; i < s.labels.size(); ++i) s.labels[i] = static_cast<std::uint8_t>(i % 3);
    write_slide(s, dir / "a.ppm");
    EXPECT_TRUE(std::filesystem::exists(dir / "a.labels.pgm"));
    const Slide r = read_slide(dir / "a.ppm", 0);
    EXPECT_TRUE(r == s);
}

TEST(SlideIo, MissingLabelMaskMeansAllNormal) {
    TempDir dir;
    const Slide s = noise_slide(0, 8, 8, 1);
    write_slide(s, dir / "a.ppm");
    std::filesystem::remove(dir / "a.labels.pgm");
    const Slide r = read_slide(dir / "a.ppm", 4);
    EXPECT_EQ(r.slide_id, 4u);
    EXPECT_EQ(r.pixels, s.pixels);
    for (auto l : r.labels) ASSERT_EQ(l, static_cast<std::uint8_t>(RegionLabel::normal));
}

TEST(SlideIo, RejectsCorruptRasters) {
    TempDir dir;
    {
        std::ofstream(dir / "bad.ppm", std::ios::binary) << "P5\n2 2\n255\n....";
    }
    EXPECT_THROW(read_slide(dir / "bad.ppm", 0), ParseError);
    {
        std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n4 4\n255\nabc";
    }
    EXPECT_THROW(read_slide(dir / "short.ppm", 0), ParseError);
    EXPECT_THROW(read_slide(dir / "absent.ppm", 0), IoError);
}

TEST(SlideIo, HeaderCommentsAreSkipped) {
    TempDir dir;
    {
        std::ofstream out(dir / "c.ppm", std::ios::binary);
        out << "P6\n# made by hand\n1 1\n255\n";
        out.write("\x01\x02\x03", 3);
    }
    const Slide s = read_slide(dir / "c.ppm", 0);
    EXPECT_EQ(s.rgb(0, 0), (Rgb{1, 2, 3}));
}

TEST(SlideManifest, ResolvesRelativePathsAndComments) {
    TempDir dir;
    std::filesystem::create_directories(dir / "sub");
    write_slide(noise_slide(0, 8, 8, 1), dir / "sub" / "x.ppm");
    write_slide(noise_slide(0, 8, 8, 2), dir / "y.ppm");
    {
        std::ofstream out(dir / "m.txt");
        out << "# slides\n\nsub/x.ppm\n  " << (dir / "y.ppm").string() << "   # absolute\n";
    }
    const auto paths = read_slide_manifest(dir / "m.txt");
    ASSERT_EQ(paths.size(), 2u);
    const auto slides = load_slides(dir / "m.txt");
    ASSERT_EQ(slides.size(), 2u);
    EXPECT_EQ(slides[0].slide_id, 0u);
    EXPECT_EQ(slides[1].slide_id, 1u);
    EXPECT_EQ(slides[1].pixels, noise_slide(0, 8, 8, 2).pixels);
}

TEST(SlideManifest, MalformedEntryReportsLineNumber) {
    TempDir dir;
    {
        std::ofstream out(dir / "m.txt");
        out << "# header\na.ppm\nnot-an-image.txt\n";
    }
    try {
        read_slide_manifest(dir / "m.txt");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
}

TEST(SlideManifest, EmptyManifestLoadsNothing) {
    TempDir dir;
    write_slide_manifest(dir / "m.txt", {});
    EXPECT_TRUE(load_slides(dir / "m.txt").empty());
}

TEST(TileIo, RoundTripAndSquareCheck) {
    TempDir dir;
    const Tile t = pathossl::testing::random_tile(5, 3);
    write_tile(t, dir / "t.ppm");
    const Tile r = read_tile(dir / "t.ppm");
    EXPECT_EQ(r.size, 5);
    EXPECT_EQ(r.rgb, t.rgb);
    write_slide(noise_slide(0, 4, 6, 1), dir / "rect.ppm");
    EXPECT_THROW(read_tile(dir / "rect.ppm"), ParseError);
}
