#include "maxquery/core.hpp"
#include "maxquery/npy.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace maxquery;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformIntCoversClosedRange) {
    Rng r(3);
    std::set<int> seen;
    for (int i = 0; i < 2000; ++i) {
        const int v = r.uniform_int(-2, 3);
        ASSERT_GE(v, -2);
        ASSERT_LE(v, 3);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 6u);
}

TEST(Rng, NormalMoments) {
    Rng r(11);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(GridShape, IndexIsDepthFastest) {
    GridShape g{3, 4, 5};
    EXPECT_EQ(g.voxels(), 60);
    EXPECT_EQ(g.index(0, 0, 1), 1);
    EXPECT_EQ(g.index(0, 1, 0), 5);
    EXPECT_EQ(g.index(1, 0, 0), 20);
    EXPECT_TRUE(g.volumetric());
}

TEST(GridShape, DownsampleKeepsFlatDepth) {
    GridShape g{64, 32, 1};
    EXPECT_EQ(g.downsampled(4), (GridShape{16, 8, 1}));
    GridShape v{16, 32, 8};
    EXPECT_EQ(v.downsampled(2), (GridShape{8, 16, 4}));
}

TEST(Fnv, KnownVectors) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Errors, CarryCategory) {
    try {
        fail(ErrorCategory::Numeric, "boom");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), ErrorCategory::Numeric);
        EXPECT_STREQ(e.what(), "boom");
    }
}

TEST(Npy, RoundTripAllDtypes) {
    const auto dir = std::filesystem::temp_directory_path() / "mq_npy_test";
    std::filesystem::create_directories(dir);
    std::vector<double> d{1.5, -2.25, 3e-300, 7};
    std::vector<std::int32_t> i{1, -2, 3, 4, 5, 6};
    std::vector<std::uint8_t> u{0, 1, 255};
    npy::write(dir / "d.npy", {2, 2}, std::span<const double>(d));
    npy::write(dir / "i.npy", {2, 3}, std::span<const std::int32_t>(i));
    npy::write(dir / "u.npy", {3}, std::span<const std::uint8_t>(u));
    auto a = npy::read(dir / "d.npy");
    EXPECT_EQ(a.dtype, npy::DType::Float64);
    EXPECT_EQ(a.shape, (std::vector<std::size_t>{2, 2}));
    auto av = a.as<double>();
    EXPECT_EQ(std::vector<double>(av.begin(), av.end()), d);
    auto b = npy::read(dir / "i.npy");
    auto bv = b.as<std::int32_t>();
    EXPECT_EQ(b.shape, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(std::vector<std::int32_t>(bv.begin(), bv.end()), i);
    auto c = npy::read(dir / "u.npy");
    auto cv = c.as<std::uint8_t>();
    EXPECT_EQ(std::vector<std::uint8_t>(cv.begin(), cv.end()), u);
}

TEST(Npy, HeaderIsAligned) {
    const auto path = std::filesystem::temp_directory_path() / "mq_npy_align.npy";
    std::vector<double> d(5, 1.0);
    npy::write(path, {5}, std::span<const double>(d));
    EXPECT_EQ((std::filesystem::file_size(path) - 5 * 8) % 64, 0u);
}

TEST(Npy, RejectsGarbage) {
    const auto path = std::filesystem::temp_directory_path() / "mq_npy_bad.npy";
    { std::ofstream(path) << "not an array"; }
    EXPECT_THROW(npy::read(path), Error);
}
