#pragma once
// Procedural phantom volumes: background, one ellipsoidal organ, lesions of
// inlier tumor classes and (for OOD cases) exactly one lesion of a held-out
// tumor class. Labels are 0-based class indices:
//   0 background, 1 organ, 2 .. 2+I-1 inlier tumors, 2+I .. 2+I+O-1 held-out.

#include "maxquery/core.hpp"
#include "maxquery/npy.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace maxquery::synth {

enum class ClassRole { Background, Organ, InlierTumor, OodTumor };

inline constexpr const char* to_string(ClassRole r) {
    switch (r) {
        case ClassRole::Background: return "background";
        case ClassRole::Organ: return "organ";
        case ClassRole::InlierTumor: return "inlier_tumor";
        case ClassRole::OodTumor: return "ood_tumor";
    }
    return "";
}

/// Intensity model of one class:
///   mean + contrast * sin(2*pi*frequency*(h cos(orientation) + w sin(orientation)) + phase)
///   + N(0, stddev)
/// with a random phase per region. `frequency` and `orientation` form the
/// spatial-frequency signature.
struct TextureParams {
    Real mean = 0.0;
    Real stddev = 0.1;
    Real frequency = 0.0;
    Real orientation = 0.0;
    Real contrast = 0.0;

    friend bool operator==(const TextureParams&, const TextureParams&) = default;
};

struct OrganGeometry {
    /// semi-axes as a fraction of the in-plane extent (min(H, W)); depth uses D.
    Real radius_frac_min = 0.36;
    Real radius_frac_max = 0.43;
    /// center offset from the grid center, fraction of the in-plane extent.
    Real center_jitter_frac = 0.05;
};

struct TumorGeometry {
    /// lesion semi-axes in voxels (in-plane); depth semi-axes are scaled by D / min(H, W).
    Real radius_min = 4.0;
    Real radius_max = 7.0;
    int max_inlier_lesions = 2;
    int max_placement_retries = 200;
};

/// Background clutter. The background is tiled by a smooth random field into
/// the class-0 texture plus `extra_tissues`; bright structures are scattered
/// outside the organ. All of it stays labelled background.
struct BackgroundSpec {
    std::vector<TextureParams> extra_tissues = {
        {-1.2, 0.10, 0.0, 0.0, 0.0},
        {0.6, 0.10, 0.12, 0.3, 0.3},
        {1.3, 0.10, 0.0, 0.0, 0.0},
    };
    /// cycles per voxel of the tiling field
    Real field_frequency = 0.035;
    int structures_min = 1;
    int structures_max = 3;
    Real structure_radius_min = 2.0;
    Real structure_radius_max = 4.0;
    TextureParams structure_texture{2.6, 0.10, 0.0, 0.0, 0.0};
};

struct PhantomSpec {
    GridShape shape{64, 64, 1};
    int num_inlier_tumor_classes = 3;
    int num_ood_tumor_classes = 2;
    /// one entry per class in label order; empty means default_textures().
    std::vector<TextureParams> textures;
    OrganGeometry organ;
    TumorGeometry tumor;
    BackgroundSpec background;
    Real noise_sigma = 0.05;
    std::uint64_t seed = 1;

    int num_training_classes() const { return 2 + num_inlier_tumor_classes; }
    int num_classes() const { return num_training_classes() + num_ood_tumor_classes; }
};

/// Near-OOD default palette: held-out classes sit between the organ and the
/// inlier tumors in intensity and carry their own stripe signature.
inline std::vector<TextureParams> default_textures(int inlier, int ood) {
    std::vector<TextureParams> t;
    t.push_back({0.0, 0.20, 0.0, 0.0, 0.0});
    t.push_back({1.0, 0.10, 0.05, 0.0, 0.10});
    const std::array<TextureParams, 3> inlier_base = {{
        {2.0, 0.08, 0.0, 0.0, 0.0},
        {1.8, 0.08, 0.25, 0.0, 0.5},
        {2.4, 0.08, 0.25, std::numbers::pi / 2, 0.5},
    }};
    const std::array<TextureParams, 2> ood_base = {{
        {1.5, 0.08, 0.20, std::numbers::pi / 4, 0.2},
        {1.4, 0.15, 0.35, 3 * std::numbers::pi / 4, 0.15},
    }};
    for (int i = 0; i < inlier; ++i) {
        TextureParams p = inlier_base[static_cast<std::size_t>(i) % inlier_base.size()];
        p.mean += 0.15 * static_cast<Real>(i / static_cast<int>(inlier_base.size()));
        t.push_back(p);
    }
    for (int i = 0; i < ood; ++i) {
        TextureParams p = ood_base[static_cast<std::size_t>(i) % ood_base.size()];
        p.frequency += 0.03 * static_cast<Real>(i / static_cast<int>(ood_base.size()));
        t.push_back(p);
    }
    return t;
}

inline std::vector<TextureParams> resolved_textures(const PhantomSpec& spec) {
    return spec.textures.empty() ? default_textures(spec.num_inlier_tumor_classes, spec.num_ood_tumor_classes)
                                 : spec.textures;
}

inline void validate(const PhantomSpec& spec) {
    const auto& g = spec.shape;
    require(g.h > 0 && g.w > 0 && g.d > 0, ErrorCategory::Config, "phantom grid dims must be positive");
    require(spec.num_inlier_tumor_classes >= 1, ErrorCategory::Config,
            "num_inlier_tumor_classes must be >= 1");
    require(spec.num_ood_tumor_classes >= 1, ErrorCategory::Config, "num_ood_tumor_classes must be >= 1");
    require(spec.noise_sigma >= 0.0, ErrorCategory::Config, "noise_sigma must be >= 0");
    const auto& bg = spec.background;
    require(bg.field_frequency >= 0.0 && bg.structures_min >= 0 && bg.structures_min <= bg.structures_max &&
                bg.structure_radius_min > 0.0 && bg.structure_radius_min <= bg.structure_radius_max,
            ErrorCategory::Config, "background clutter parameters invalid");
    const auto tex = resolved_textures(spec);
    require(static_cast<int>(tex.size()) == spec.num_classes(), ErrorCategory::Config,
            "textures must list one entry per class");
    for (std::size_t i = 0; i < tex.size(); ++i)
        for (std::size_t j = i + 1; j < tex.size(); ++j)
            require(!(tex[i] == tex[j]), ErrorCategory::Config,
                    "texture signatures of classes " + std::to_string(i) + " and " + std::to_string(j) +
                        " are identical");
    const auto& o = spec.organ;
    require(o.radius_frac_min > 0.0 && o.radius_frac_min <= o.radius_frac_max, ErrorCategory::Config,
            "organ radius range invalid");
    const Real extent = std::min(g.h, g.w);
    require(o.radius_frac_max * extent + o.center_jitter_frac * extent + 1.0 <= 0.5 * extent,
            ErrorCategory::Config, "organ cannot fit in the grid");
    const auto& t = spec.tumor;
    require(t.radius_min > 0.0 && t.radius_min <= t.radius_max, ErrorCategory::Config,
            "tumor radius range invalid");
    require(t.max_inlier_lesions >= 1 && t.max_placement_retries >= 1, ErrorCategory::Config,
            "tumor lesion counts invalid");
    require(t.radius_max + 1.0 < o.radius_frac_min * extent, ErrorCategory::Config,
            "tumor radius exceeds the smallest organ");
}

struct LabeledVolume {
    GridShape shape;
    std::vector<Real> image;
    std::vector<std::int32_t> labels;
    std::vector<ClassRole> class_roles;
    std::string case_id;
    bool is_ood_case = false;

    int num_classes() const { return static_cast<int>(class_roles.size()); }
    int num_training_classes() const {
        return static_cast<int>(std::count_if(class_roles.begin(), class_roles.end(),
                                              [](ClassRole r) { return r != ClassRole::OodTumor; }));
    }
    bool is_ood_voxel(int v) const {
        return class_roles[static_cast<std::size_t>(labels[static_cast<std::size_t>(v)])] == ClassRole::OodTumor;
    }

    /// One-hot stack G (num_classes x voxels), every column sums to one.
    Matrix masks() const {
        Matrix g = Matrix::Zero(num_classes(), shape.voxels());
        for (int v = 0; v < shape.voxels(); ++v) g(labels[static_cast<std::size_t>(v)], v) = 1.0;
        return g;
    }

    /// Training targets over inlier classes only; a volume carrying held-out
    /// voxels cannot produce them.
    Matrix training_masks() const {
        const int k = num_training_classes();
        Matrix g = Matrix::Zero(k, shape.voxels());
        for (int v = 0; v < shape.voxels(); ++v) {
            const int c = labels[static_cast<std::size_t>(v)];
            require(c < k, ErrorCategory::Data, "case " + case_id + " has held-out voxels; not usable as training target");
            g(c, v) = 1.0;
        }
        return g;
    }
};

namespace detail {

struct Ellipsoid {
    Real ch, cw, cd;
    Real ah, aw, ad;
    Real angle;
    Real wobble_amp;
    Real wobble_phase;

    /// <= 1 inside.
    Real level(Real h, Real w, Real d) const {
        const Real dh = h - ch, dw = w - cw;
        const Real c = std::cos(angle), s = std::sin(angle);
        const Real u = (c * dh + s * dw) / ah;
        const Real v = (-s * dh + c * dw) / aw;
        const Real z = ad > 0 ? (d - cd) / ad : 0.0;
        const Real r = std::sqrt(u * u + v * v + z * z);
        const Real psi = std::atan2(v, u);
        const Real bound = 1.0 + wobble_amp * std::sin(3.0 * psi + wobble_phase);
        return r / bound;
    }
};

inline Real texture_value(const TextureParams& t, int h, int w, Real phase, Rng& rng) {
    Real v = t.mean;
    if (t.contrast != 0.0 && t.frequency != 0.0) {
        const Real coord = h * std::cos(t.orientation) + w * std::sin(t.orientation);
        v += t.contrast * std::sin(2.0 * std::numbers::pi * t.frequency * coord + phase);
    }
    return v + t.stddev * rng.normal();
}

}  // namespace detail

/// Deterministic in (spec, case_seed, allow_ood).
inline LabeledVolume generate_volume(const PhantomSpec& spec, std::uint64_t case_seed, bool allow_ood,
                                     std::string case_id = {}) {
    validate(spec);
    const auto& g = spec.shape;
    Rng rng(mix_seed(spec.seed, case_seed));
    const Real extent = std::min(g.h, g.w);
    const Real depth_scale = g.volumetric() ? static_cast<Real>(g.d) / extent : 0.0;

    LabeledVolume vol;
    vol.shape = g;
    vol.case_id = case_id.empty() ? "case_" + std::to_string(case_seed) : std::move(case_id);
    vol.class_roles.push_back(ClassRole::Background);
    vol.class_roles.push_back(ClassRole::Organ);
    for (int i = 0; i < spec.num_inlier_tumor_classes; ++i) vol.class_roles.push_back(ClassRole::InlierTumor);
    for (int i = 0; i < spec.num_ood_tumor_classes; ++i) vol.class_roles.push_back(ClassRole::OodTumor);
    vol.labels.assign(static_cast<std::size_t>(g.voxels()), 0);
    std::vector<int> region(static_cast<std::size_t>(g.voxels()), 0);

    const auto& og = spec.organ;
    detail::Ellipsoid organ{};
    organ.ch = 0.5 * (g.h - 1) + rng.uniform(-1, 1) * og.center_jitter_frac * extent;
    organ.cw = 0.5 * (g.w - 1) + rng.uniform(-1, 1) * og.center_jitter_frac * extent;
    organ.cd = 0.5 * (g.d - 1);
    organ.ah = rng.uniform(og.radius_frac_min, og.radius_frac_max) * extent;
    organ.aw = rng.uniform(og.radius_frac_min, og.radius_frac_max) * extent;
    organ.ad = g.volumetric() ? rng.uniform(og.radius_frac_min, og.radius_frac_max) * g.d * 1.2 : 0.0;
    organ.angle = rng.uniform(0, std::numbers::pi);
    organ.wobble_amp = 0.0;
    organ.wobble_phase = 0.0;
    for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w)
            for (int d = 0; d < g.d; ++d)
                if (organ.level(h, w, d) <= 1.0) vol.labels[static_cast<std::size_t>(g.index(h, w, d))] = 1;

    std::vector<int> organ_voxels;
    for (int v = 0; v < g.voxels(); ++v)
        if (vol.labels[static_cast<std::size_t>(v)] == 1) organ_voxels.push_back(v);
    require(!organ_voxels.empty(), ErrorCategory::Data, "organ is empty");

    // Lesion classes: the held-out lesion (if any) is placed first.
    std::vector<int> lesion_classes;
    if (allow_ood) lesion_classes.push_back(spec.num_training_classes() + rng.uniform_int(0, spec.num_ood_tumor_classes - 1));
    const int n_inlier = rng.uniform_int(allow_ood ? 0 : 1, spec.tumor.max_inlier_lesions);
    for (int i = 0; i < n_inlier; ++i) lesion_classes.push_back(2 + rng.uniform_int(0, spec.num_inlier_tumor_classes - 1));

    const auto& tg = spec.tumor;
    int region_id = 1;
    for (int cls : lesion_classes) {
        bool placed = false;
        for (int attempt = 0; attempt < tg.max_placement_retries && !placed; ++attempt) {
            const int seed_voxel = organ_voxels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(organ_voxels.size()) - 1))];
            detail::Ellipsoid e{};
            e.ch = seed_voxel / (g.w * g.d);
            e.cw = (seed_voxel / g.d) % g.w;
            e.cd = seed_voxel % g.d;
            e.ah = rng.uniform(tg.radius_min, tg.radius_max);
            e.aw = rng.uniform(tg.radius_min, tg.radius_max);
            e.ad = g.volumetric() ? std::max<Real>(1.0, rng.uniform(tg.radius_min, tg.radius_max) * depth_scale) : 0.0;
            e.angle = rng.uniform(0, std::numbers::pi);
            e.wobble_amp = rng.uniform(0.0, 0.15);
            e.wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

            // The lesion plus a one-voxel shell must sit on untouched organ voxels.
            std::vector<int> body;
            bool ok = true;
            const int rh = static_cast<int>(std::ceil(std::max(e.ah, e.aw) * 1.2)) + 1;
            const int rd = g.volumetric() ? static_cast<int>(std::ceil(e.ad * 1.2)) + 1 : 0;
            for (int h = static_cast<int>(e.ch) - rh; ok && h <= static_cast<int>(e.ch) + rh; ++h)
                for (int w = static_cast<int>(e.cw) - rh; ok && w <= static_cast<int>(e.cw) + rh; ++w)
                    for (int d = static_cast<int>(e.cd) - rd; ok && d <= static_cast<int>(e.cd) + rd; ++d) {
                        const Real lv = e.level(h, w, d);
                        const Real shell = 1.0 + 1.5 / std::min(e.ah, e.aw);
                        if (lv > shell) continue;
                        if (h < 0 || w < 0 || d < 0 || h >= g.h || w >= g.w || d >= g.d) {
                            ok = false;
                            break;
                        }
                        const int v = g.index(h, w, d);
                        if (vol.labels[static_cast<std::size_t>(v)] != 1) {
                            ok = false;
                            break;
                        }
                        if (lv <= 1.0) body.push_back(v);
                    }
            if (!ok || body.empty()) continue;
            for (int v : body) {
                vol.labels[static_cast<std::size_t>(v)] = cls;
                region[static_cast<std::size_t>(v)] = region_id;
            }
            ++region_id;
            placed = true;
        }
        require(placed, ErrorCategory::Data,
                "tumor placement failed after " + std::to_string(tg.max_placement_retries) +
                    " retries (geometry infeasible) for " + vol.case_id);
    }

    // Background tissue index per voxel: 0 = class-0 texture, 1..T = extra
    // tissues, T + 1 = bright structure.
    const auto& bgs = spec.background;
    const int n_tissues = 1 + static_cast<int>(bgs.extra_tissues.size());
    std::vector<int> tissue(static_cast<std::size_t>(g.voxels()), 0);
    if (n_tissues > 1) {
        std::array<Real, 3> th{}, ph{}, tz{};
        for (int j = 0; j < 3; ++j) {
            th[j] = rng.uniform(0.0, std::numbers::pi);
            ph[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            tz[j] = g.volumetric() ? rng.uniform(-1.0, 1.0) : 0.0;
        }
        for (int h = 0; h < g.h; ++h)
            for (int w = 0; w < g.w; ++w)
                for (int d = 0; d < g.d; ++d) {
                    Real f = 0.0;
                    for (int j = 0; j < 3; ++j)
                        f += std::sin(2.0 * std::numbers::pi * bgs.field_frequency *
                                          (h * std::cos(th[j]) + w * std::sin(th[j]) + d * tz[j]) +
                                      ph[j]);
                    // sum of three unit sines has variance 3/2; the normal cdf
                    // gives the tissues roughly equal area
                    const Real u = 0.5 * std::erfc(-f / std::sqrt(3.0));
                    const int bin = static_cast<int>(std::floor(u * n_tissues));
                    tissue[static_cast<std::size_t>(g.index(h, w, d))] = std::clamp(bin, 0, n_tissues - 1);
                }
    }
    const int n_struct = rng.uniform_int(bgs.structures_min, bgs.structures_max);
    for (int i = 0; i < n_struct; ++i) {
        detail::Ellipsoid e{};
        e.ch = rng.uniform(0.0, g.h - 1.0);
        e.cw = rng.uniform(0.0, g.w - 1.0);
        e.cd = rng.uniform(0.0, g.d - 1.0);
        e.ah = rng.uniform(bgs.structure_radius_min, bgs.structure_radius_max);
        e.aw = rng.uniform(bgs.structure_radius_min, bgs.structure_radius_max);
        e.ad = g.volumetric() ? std::max<Real>(1.0, e.ah * depth_scale) : 0.0;
        e.angle = rng.uniform(0, std::numbers::pi);
        e.wobble_amp = 0.0;
        e.wobble_phase = 0.0;
        for (int h = 0; h < g.h; ++h)
            for (int w = 0; w < g.w; ++w)
                for (int d = 0; d < g.d; ++d) {
                    const auto v = static_cast<std::size_t>(g.index(h, w, d));
                    if (vol.labels[v] == 0 && e.level(h, w, d) <= 1.0) tissue[v] = n_tissues;
                }
    }

    const auto textures = resolved_textures(spec);
    std::vector<Real> region_phase(static_cast<std::size_t>(region_id) + 2);
    for (auto& p : region_phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<Real> tissue_phase(static_cast<std::size_t>(n_tissues) + 1);
    for (auto& p : tissue_phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
    vol.image.resize(static_cast<std::size_t>(g.voxels()));
    for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w)
            for (int d = 0; d < g.d; ++d) {
                const auto v = static_cast<std::size_t>(g.index(h, w, d));
                const int cls = vol.labels[v];
                const TextureParams* tex = &textures[static_cast<std::size_t>(cls)];
                Real phase = cls <= 1 ? region_phase[static_cast<std::size_t>(region_id + cls)]
                                      : region_phase[static_cast<std::size_t>(region[v])];
                if (cls == 0 && tissue[v] > 0) {
                    const int t = tissue[v];
                    tex = t == n_tissues ? &bgs.structure_texture : &bgs.extra_tissues[static_cast<std::size_t>(t - 1)];
                    phase = tissue_phase[static_cast<std::size_t>(t)];
                }
                vol.image[v] = detail::texture_value(*tex, h, w, phase, rng) + spec.noise_sigma * rng.normal();
            }
    vol.is_ood_case = std::any_of(vol.labels.begin(), vol.labels.end(),
                                  [&](std::int32_t c) { return c >= spec.num_training_classes(); });
    return vol;
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct CaseRecord {
    std::string case_id;
    std::uint64_t case_seed = 0;
    bool allow_ood = false;
    bool is_ood_case = false;
};

struct DatasetManifest {
    PhantomSpec spec;
    std::vector<CaseRecord> train, val, test_inlier, test_ood;

    std::size_t size() const { return train.size() + val.size() + test_inlier.size() + test_ood.size(); }
    std::vector<const CaseRecord*> all() const {
        std::vector<const CaseRecord*> out;
        for (const auto* part : {&train, &val, &test_inlier, &test_ood})
            for (const auto& r : *part) out.push_back(&r);
        return out;
    }
};

inline LabeledVolume load_volume(const DatasetManifest& m, const CaseRecord& r) {
    return generate_volume(m.spec, r.case_seed, r.allow_ood, r.case_id);
}

inline DatasetManifest generate_split(const PhantomSpec& spec, int n_train, int n_val, int n_test_inlier,
                                      int n_test_ood) {
    require(n_train >= 0 && n_val >= 0 && n_test_inlier >= 0 && n_test_ood >= 0, ErrorCategory::Config,
            "split counts must be >= 0");
    validate(spec);
    DatasetManifest m;
    m.spec = spec;
    struct Part {
        std::vector<CaseRecord>* out;
        const char* prefix;
        int count;
        bool ood;
        std::uint64_t salt;
    };
    const std::array<Part, 4> parts = {{{&m.train, "train", n_train, false, 1},
                                        {&m.val, "val", n_val, false, 2},
                                        {&m.test_inlier, "test_inlier", n_test_inlier, false, 3},
                                        {&m.test_ood, "test_ood", n_test_ood, true, 4}}};
    for (const auto& p : parts) {
        for (int i = 0; i < p.count; ++i) {
            CaseRecord r;
            char id[64];
            std::snprintf(id, sizeof(id), "%s_%03d", p.prefix, i);
            r.case_id = id;
            r.case_seed = mix_seed(p.salt, static_cast<std::uint64_t>(i)) >> 1;
            r.allow_ood = p.ood;
            r.is_ood_case = load_volume(m, r).is_ood_case;
            p.out->push_back(std::move(r));
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Serialization

using nlohmann::json;

inline void to_json(json& j, const TextureParams& t) {
    j = json{{"mean", t.mean}, {"stddev", t.stddev}, {"frequency", t.frequency},
             {"orientation", t.orientation}, {"contrast", t.contrast}};
}
inline void from_json(const json& j, TextureParams& t) {
    t.mean = j.value("mean", t.mean);
    t.stddev = j.value("stddev", t.stddev);
    t.frequency = j.value("frequency", t.frequency);
    t.orientation = j.value("orientation", t.orientation);
    t.contrast = j.value("contrast", t.contrast);
}

inline void to_json(json& j, const PhantomSpec& s) {
    j = json{{"shape", {s.shape.h, s.shape.w, s.shape.d}},
             {"num_inlier_tumor_classes", s.num_inlier_tumor_classes},
             {"num_ood_tumor_classes", s.num_ood_tumor_classes},
             {"textures", s.textures},
             {"organ",
              {{"radius_frac_min", s.organ.radius_frac_min},
               {"radius_frac_max", s.organ.radius_frac_max},
               {"center_jitter_frac", s.organ.center_jitter_frac}}},
             {"tumor",
              {{"radius_min", s.tumor.radius_min},
               {"radius_max", s.tumor.radius_max},
               {"max_inlier_lesions", s.tumor.max_inlier_lesions},
               {"max_placement_retries", s.tumor.max_placement_retries}}},
             {"background",
              {{"extra_tissues", s.background.extra_tissues},
               {"field_frequency", s.background.field_frequency},
               {"structures_min", s.background.structures_min},
               {"structures_max", s.background.structures_max},
               {"structure_radius_min", s.background.structure_radius_min},
               {"structure_radius_max", s.background.structure_radius_max},
               {"structure_texture", s.background.structure_texture}}},
             {"noise_sigma", s.noise_sigma},
             {"seed", s.seed}};
}
inline void from_json(const json& j, PhantomSpec& s) {
    if (j.contains("shape")) {
        const auto& sh = j.at("shape");
        require(sh.is_array() && (sh.size() == 2 || sh.size() == 3), ErrorCategory::Config,
                "phantom.shape must be [H, W] or [H, W, D]");
        s.shape = {sh[0].get<int>(), sh[1].get<int>(), sh.size() == 3 ? sh[2].get<int>() : 1};
    }
    s.num_inlier_tumor_classes = j.value("num_inlier_tumor_classes", s.num_inlier_tumor_classes);
    s.num_ood_tumor_classes = j.value("num_ood_tumor_classes", s.num_ood_tumor_classes);
    if (j.contains("textures")) s.textures = j.at("textures").get<std::vector<TextureParams>>();
    if (j.contains("organ")) {
        const auto& o = j.at("organ");
        s.organ.radius_frac_min = o.value("radius_frac_min", s.organ.radius_frac_min);
        s.organ.radius_frac_max = o.value("radius_frac_max", s.organ.radius_frac_max);
        s.organ.center_jitter_frac = o.value("center_jitter_frac", s.organ.center_jitter_frac);
    }
    if (j.contains("tumor")) {
        const auto& t = j.at("tumor");
        s.tumor.radius_min = t.value("radius_min", s.tumor.radius_min);
        s.tumor.radius_max = t.value("radius_max", s.tumor.radius_max);
        s.tumor.max_inlier_lesions = t.value("max_inlier_lesions", s.tumor.max_inlier_lesions);
        s.tumor.max_placement_retries = t.value("max_placement_retries", s.tumor.max_placement_retries);
    }
    if (j.contains("background")) {
        const auto& b = j.at("background");
        auto& bg = s.background;
        if (b.contains("extra_tissues")) bg.extra_tissues = b.at("extra_tissues").get<std::vector<TextureParams>>();
        bg.field_frequency = b.value("field_frequency", bg.field_frequency);
        bg.structures_min = b.value("structures_min", bg.structures_min);
        bg.structures_max = b.value("structures_max", bg.structures_max);
        bg.structure_radius_min = b.value("structure_radius_min", bg.structure_radius_min);
        bg.structure_radius_max = b.value("structure_radius_max", bg.structure_radius_max);
        if (b.contains("structure_texture")) bg.structure_texture = b.at("structure_texture").get<TextureParams>();
    }
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
}

inline void to_json(json& j, const CaseRecord& r) {
    j = json{{"case_id", r.case_id}, {"case_seed", r.case_seed}, {"allow_ood", r.allow_ood},
             {"is_ood_case", r.is_ood_case}};
}
inline void from_json(const json& j, CaseRecord& r) {
    r.case_id = j.at("case_id").get<std::string>();
    r.case_seed = j.at("case_seed").get<std::uint64_t>();
    r.allow_ood = j.at("allow_ood").get<bool>();
    r.is_ood_case = j.at("is_ood_case").get<bool>();
}

inline json manifest_to_json(const DatasetManifest& m) {
    return json{{"format", "maxquery-manifest"},
                {"version", 1},
                {"spec", m.spec},
                {"counts",
                 {{"train", m.train.size()},
                  {"val", m.val.size()},
                  {"test_inlier", m.test_inlier.size()},
                  {"test_ood", m.test_ood.size()}}},
                {"partitions",
                 {{"train", m.train}, {"val", m.val}, {"test_inlier", m.test_inlier}, {"test_ood", m.test_ood}}}};
}

inline DatasetManifest manifest_from_json(const json& j) {
    require(j.value("format", "") == "maxquery-manifest", ErrorCategory::Io, "not a dataset manifest");
    DatasetManifest m;
    m.spec = j.at("spec").get<PhantomSpec>();
    const auto& p = j.at("partitions");
    m.train = p.at("train").get<std::vector<CaseRecord>>();
    m.val = p.at("val").get<std::vector<CaseRecord>>();
    m.test_inlier = p.at("test_inlier").get<std::vector<CaseRecord>>();
    m.test_ood = p.at("test_ood").get<std::vector<CaseRecord>>();
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write manifest " + path.string());
    out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot read manifest " + path.string());
    try {
        return manifest_from_json(json::parse(in));
    } catch (const json::exception& e) {
        fail(ErrorCategory::Io, "malformed manifest " + path.string() + ": " + e.what());
    }
}

inline std::vector<std::size_t> npy_shape(const GridShape& g) {
    return {static_cast<std::size_t>(g.h), static_cast<std::size_t>(g.w), static_cast<std::size_t>(g.d)};
}

/// Writes `<case_id>.image.npy` (float64, H x W x D) and `<case_id>.label.npy`
/// (int32 class indices, H x W x D).
inline void write_volume(const LabeledVolume& v, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    npy::write(dir / (v.case_id + ".image.npy"), npy_shape(v.shape), std::span<const double>(v.image));
    npy::write(dir / (v.case_id + ".label.npy"), npy_shape(v.shape), std::span<const std::int32_t>(v.labels));
}

}  // namespace maxquery::synth
