#include "maxquery/synthdata.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace maxquery;
using namespace maxquery::synth;

namespace {

PhantomSpec small_spec() {
    PhantomSpec s;
    s.shape = {48, 48, 1};
    s.organ.radius_frac_max = 0.40;
    s.tumor.radius_min = 3;
    s.tumor.radius_max = 5;
    return s;
}

}  // namespace

TEST(Phantom, RejectsZeroInlierClasses) {
    PhantomSpec s;
    s.num_inlier_tumor_classes = 0;
    EXPECT_THROW(generate_volume(s, 0, false), Error);
}

TEST(Phantom, RejectsOrganThatCannotFit) {
    PhantomSpec s;
    s.shape = {8, 8, 1};
    try {
        generate_volume(s, 0, false);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), ErrorCategory::Config);
    }
}

TEST(Phantom, RejectsIdenticalTextures) {
    PhantomSpec s;
    s.textures = default_textures(3, 2);
    s.textures[3] = s.textures[2];
    EXPECT_THROW(validate(s), Error);
}

TEST(Phantom, InfeasiblePlacementIsDataError) {
    PhantomSpec s;
    s.tumor.max_inlier_lesions = 40;
    s.tumor.max_placement_retries = 3;
    bool failed = false;
    for (std::uint64_t seed = 0; seed < 5 && !failed; ++seed) {
        try {
            generate_volume(s, seed, false);
        } catch (const Error& e) {
            EXPECT_EQ(e.category(), ErrorCategory::Data);
            failed = true;
        }
    }
    EXPECT_TRUE(failed);
}

TEST(Phantom, Deterministic) {
    const auto s = small_spec();
    for (bool ood : {false, true}) {
        const auto a = generate_volume(s, 17, ood);
        const auto b = generate_volume(s, 17, ood);
        EXPECT_EQ(a.image, b.image);
        EXPECT_EQ(a.labels, b.labels);
    }
    EXPECT_NE(generate_volume(s, 17, false).image, generate_volume(s, 18, false).image);
}

TEST(Phantom, HundredVolumesPartitionOfUnityAndContainment) {
    const auto s = small_spec();
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto v = generate_volume(s, seed, seed % 2 == 1);
        const Matrix g = v.masks();
        ASSERT_EQ(g.rows(), s.num_classes());
        const RowVector cs = g.colwise().sum();
        for (Eigen::Index i = 0; i < cs.size(); ++i) ASSERT_EQ(cs(i), 1.0);
        ASSERT_TRUE((g.array() == 0.0 || g.array() == 1.0).all());
        // Tumors sit inside the organ: every tumor voxel has only organ/tumor
        // voxels as 4-neighbours (the one-voxel shell).
        const auto& sh = v.shape;
        for (int h = 0; h < sh.h; ++h)
            for (int w = 0; w < sh.w; ++w) {
                if (v.labels[sh.index(h, w, 0)] < 2) continue;
                for (auto [dh, dw] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
                    const int hh = h + dh, ww = w + dw;
                    ASSERT_TRUE(hh >= 0 && ww >= 0 && hh < sh.h && ww < sh.w);
                    ASSERT_NE(v.labels[sh.index(hh, ww, 0)], 0);
                }
            }
    }
}

TEST(Phantom, OodCasesHaveExactlyOneHeldOutLesion) {
    const auto s = small_spec();
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto v = generate_volume(s, seed, true);
        EXPECT_TRUE(v.is_ood_case);
        std::set<int> ood_classes;
        for (auto c : v.labels)
            if (c >= s.num_training_classes()) ood_classes.insert(c);
        EXPECT_EQ(ood_classes.size(), 1u);
        const auto clean = generate_volume(s, seed, false);
        EXPECT_FALSE(clean.is_ood_case);
        EXPECT_NO_THROW(clean.training_masks());
        EXPECT_THROW(v.training_masks(), Error);
    }
}

TEST(Phantom, EveryInlierCaseHasATumor) {
    const auto s = small_spec();
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto v = generate_volume(s, seed, false);
        EXPECT_TRUE(std::any_of(v.labels.begin(), v.labels.end(), [](int c) { return c >= 2; }));
    }
}

TEST(Phantom, ClassLayoutAndRoles) {
    const auto v = generate_volume(small_spec(), 3, true);
    ASSERT_EQ(v.class_roles.size(), 7u);
    EXPECT_EQ(v.class_roles[0], ClassRole::Background);
    EXPECT_EQ(v.class_roles[1], ClassRole::Organ);
    EXPECT_EQ(v.class_roles[4], ClassRole::InlierTumor);
    EXPECT_EQ(v.class_roles[5], ClassRole::OodTumor);
    EXPECT_EQ(v.num_training_classes(), 5);
}

TEST(Phantom, VolumetricMode) {
    PhantomSpec s;
    s.shape = {32, 32, 8};
    s.organ.radius_frac_max = 0.40;
    s.tumor.radius_min = 3;
    s.tumor.radius_max = 4;
    const auto v = generate_volume(s, 5, true);
    EXPECT_EQ(static_cast<int>(v.image.size()), 32 * 32 * 8);
    EXPECT_TRUE(v.is_ood_case);
}

TEST(Split, CountsAddUp) {
    const auto m = generate_split(small_spec(), 10, 2, 2, 2);
    EXPECT_EQ(m.size(), 16u);
    int flagged = 0;
    for (const auto* r : m.all()) flagged += r->is_ood_case;
    EXPECT_EQ(flagged, 2);
    for (const auto& r : m.test_ood) EXPECT_TRUE(r.allow_ood);
}

TEST(Split, EmptyOodPartition) {
    const auto m = generate_split(small_spec(), 3, 1, 1, 0);
    EXPECT_TRUE(m.test_ood.empty());
    EXPECT_EQ(m.size(), 5u);
}

TEST(Split, HeldOutLabelsOnlyInOodPartition) {
    const auto s = small_spec();
    const auto m = generate_split(s, 12, 3, 3, 3);
    for (const auto* part : {&m.train, &m.val, &m.test_inlier})
        for (const auto& r : *part) {
            const auto v = load_volume(m, r);
            for (auto c : v.labels) ASSERT_LT(c, s.num_training_classes()) << r.case_id;
        }
}

TEST(Split, ManifestRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "mq_manifest_test";
    std::filesystem::create_directories(dir);
    auto s = small_spec();
    s.seed = 99;
    const auto m = generate_split(s, 2, 1, 1, 2);
    save_manifest(m, dir / "manifest.json");
    const auto back = load_manifest(dir / "manifest.json");
    EXPECT_EQ(manifest_to_json(back).dump(), manifest_to_json(m).dump());
    const auto a = load_volume(m, m.test_ood[1]);
    const auto b = load_volume(back, back.test_ood[1]);
    EXPECT_EQ(a.image, b.image);
}

TEST(Split, WritesVolumeArrays) {
    const auto dir = std::filesystem::temp_directory_path() / "mq_volume_test";
    const auto v = generate_volume(small_spec(), 1, true, "x");
    write_volume(v, dir);
    const auto img = npy::read(dir / "x.image.npy");
    const auto lab = npy::read(dir / "x.label.npy");
    EXPECT_EQ(img.shape, (std::vector<std::size_t>{48, 48, 1}));
    auto lv = lab.as<std::int32_t>();
    EXPECT_EQ(std::vector<std::int32_t>(lv.begin(), lv.end()), v.labels);
}

TEST(Background, ClutterKeepsLabelsAndSpreadsIntensities) {
    auto plain = small_spec();
    plain.background.extra_tissues.clear();
    plain.background.structures_min = 0;
    plain.background.structures_max = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto a = generate_volume(small_spec(), seed, seed % 2 == 0);
        const auto b = generate_volume(plain, seed, seed % 2 == 0);
        EXPECT_EQ(a.labels, b.labels);
        int low = 0, high = 0, plain_out = 0;
        for (std::size_t i = 0; i < a.labels.size(); ++i) {
            if (a.labels[i] != 0) continue;
            low += a.image[i] < -0.8;
            high += a.image[i] > 1.0;
            plain_out += std::abs(b.image[i]) > 1.2;  // six sigma of the class-0 noise
        }
        EXPECT_GT(low, 0);
        EXPECT_GT(high, 0);
        EXPECT_EQ(plain_out, 0);
    }
}

TEST(Background, InvalidParametersRejected) {
    auto s = small_spec();
    s.background.structures_min = 3;
    s.background.structures_max = 1;
    EXPECT_THROW(validate(s), Error);
    s = small_spec();
    s.background.structure_radius_min = 0.0;
    EXPECT_THROW(validate(s), Error);
    s = small_spec();
    s.background.field_frequency = -0.1;
    EXPECT_THROW(validate(s), Error);
}

TEST(Background, JsonRoundTrip) {
    auto s = small_spec();
    s.background.extra_tissues = {{-0.5, 0.1, 0.0, 0.0, 0.0}};
    s.background.field_frequency = 0.05;
    s.background.structures_max = 5;
    s.background.structure_texture = {3.0, 0.2, 0.1, 0.5, 0.0};
    json j = s;
    const auto back = j.get<PhantomSpec>();
    EXPECT_EQ(json(back).dump(), j.dump());
    EXPECT_EQ(back.background.extra_tissues.size(), 1u);
    EXPECT_EQ(back.background.structures_max, 5);
    EXPECT_EQ(generate_volume(back, 4, true).image, generate_volume(s, 4, true).image);
}
