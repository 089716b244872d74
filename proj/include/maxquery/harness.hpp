#pragma once
// Experiment orchestration: two-phase training, evaluation, ablation matrix
// and report export.
//
// Run directory layout:
//   config.json  manifest.json  train_log.jsonl  phase1.ckpt  final.ckpt  run.json
//   eval/report.json  eval/maps/<case>.<method>.{npy,pgm}  eval/pooled/*.npy
//   diagnostics/step_<n>/  (only after a non-finite loss)

#include "maxquery/checkpoint.hpp"
#include "maxquery/config.hpp"
#include "maxquery/core.hpp"
#include "maxquery/imageio.hpp"
#include "maxquery/losses.hpp"
#include "maxquery/metrics.hpp"
#include "maxquery/model.hpp"
#include "maxquery/npy.hpp"
#include "maxquery/oodscore.hpp"
#include "maxquery/synthdata.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace maxquery::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Records

struct StepLog {
    int step = 0;
    int phase = 1;
    int epoch = 0;
    Real lr = 0.0;
    Real total = 0.0;
    Real seg = 0.0;
    Real qd = 0.0;
    Real ds = 0.0;
};

struct EpochLog {
    int phase = 1;
    int epoch = 0;
    int steps = 0;
    bool backbone_frozen = false;
    Real total = 0.0;
    Real seg = 0.0;
    Real qd = 0.0;
    Real ds = 0.0;
};

struct RunRecord {
    std::string tag;
    std::uint64_t config_hash = 0;
    std::string config_json;
    std::vector<EpochLog> epochs;
    std::vector<StepLog> steps;
    fs::path run_dir;
    fs::path manifest_path;
    fs::path phase1_checkpoint;
    fs::path checkpoint;
    std::optional<metrics::EvalReport> report;
    fs::path eval_dir;
    double train_seconds = 0.0;
    double eval_seconds = 0.0;
};

inline json to_json(const StepLog& s) {
    return json{{"step", s.step}, {"phase", s.phase}, {"epoch", s.epoch}, {"lr", s.lr},
                {"L", s.total},   {"L_seg", s.seg},   {"L_qd", s.qd},       {"L_ds", s.ds}};
}

inline json to_json(const EpochLog& e) {
    return json{{"phase", e.phase}, {"epoch", e.epoch}, {"steps", e.steps}, {"backbone_frozen", e.backbone_frozen},
                {"L", e.total},     {"L_seg", e.seg},   {"L_qd", e.qd},     {"L_ds", e.ds}};
}

inline json to_json(const metrics::EvalReport& r) {
    json methods = json::object();
    for (const auto& [name, m] : r.methods)
        methods[name] = {{"auroc", m.auroc}, {"aupr", m.aupr}, {"fpr95", m.fpr95}, {"case_auc", m.case_auc}};
    json dice = json::object();
    for (const auto& [k, v] : r.dice_per_class) dice[std::to_string(k)] = v;
    return json{{"methods", methods},
                {"dice_per_class", dice},
                {"mean_inlier_dice", r.mean_inlier_dice},
                {"config_tag", r.config_tag},
                {"pooling", r.pooling},
                {"ood_voxels", r.ood_voxels},
                {"inlier_voxels", r.inlier_voxels},
                {"inlier_cases", r.inlier_cases},
                {"ood_cases", r.ood_cases}};
}

inline metrics::EvalReport report_from_json(const json& j) {
    metrics::EvalReport r;
    for (const auto& [name, m] : j.at("methods").items())
        r.methods[name] = {m.at("auroc").get<Real>(), m.at("aupr").get<Real>(), m.at("fpr95").get<Real>(),
                           m.at("case_auc").get<Real>()};
    for (const auto& [k, v] : j.at("dice_per_class").items()) r.dice_per_class[std::stoi(k)] = v.get<Real>();
    r.mean_inlier_dice = j.at("mean_inlier_dice").get<Real>();
    r.config_tag = j.at("config_tag").get<std::string>();
    r.pooling = j.at("pooling").get<std::string>();
    r.ood_voxels = j.at("ood_voxels").get<std::int64_t>();
    r.inlier_voxels = j.at("inlier_voxels").get<std::int64_t>();
    r.inlier_cases = j.at("inlier_cases").get<int>();
    r.ood_cases = j.at("ood_cases").get<int>();
    return r;
}

inline json to_json(const RunRecord& r) {
    json epochs = json::array();
    for (const auto& e : r.epochs) epochs.push_back(to_json(e));
    json j{{"tag", r.tag},
           {"config_hash", hex64(r.config_hash)},
           {"config", json::parse(r.config_json.empty() ? "{}" : r.config_json)},
           {"epochs", epochs},
           {"run_dir", r.run_dir.string()},
           {"manifest", r.manifest_path.string()},
           {"phase1_checkpoint", r.phase1_checkpoint.string()},
           {"checkpoint", r.checkpoint.string()},
           {"eval_dir", r.eval_dir.string()},
           {"train_seconds", r.train_seconds},
           {"eval_seconds", r.eval_seconds}};
    j["report"] = r.report ? to_json(*r.report) : json();
    return j;
}

inline RunRecord record_from_json(const json& j) {
    RunRecord r;
    try {
        r.tag = j.at("tag").get<std::string>();
        r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
        r.config_json = j.at("config").dump();
        for (const auto& e : j.at("epochs"))
            r.epochs.push_back({e.at("phase").get<int>(), e.at("epoch").get<int>(), e.at("steps").get<int>(),
                                e.at("backbone_frozen").get<bool>(), e.at("L").get<Real>(), e.at("L_seg").get<Real>(),
                                e.at("L_qd").get<Real>(), e.at("L_ds").get<Real>()});
        r.run_dir = j.at("run_dir").get<std::string>();
        r.manifest_path = j.at("manifest").get<std::string>();
        r.phase1_checkpoint = j.at("phase1_checkpoint").get<std::string>();
        r.checkpoint = j.at("checkpoint").get<std::string>();
        r.eval_dir = j.at("eval_dir").get<std::string>();
        r.train_seconds = j.at("train_seconds").get<double>();
        r.eval_seconds = j.at("eval_seconds").get<double>();
        if (!j.at("report").is_null()) r.report = report_from_json(j.at("report"));
    } catch (const json::exception& e) {
        fail(ErrorCategory::Io, std::string("malformed run record: ") + e.what());
    }
    return r;
}

namespace detail {

inline void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCategory::Io, path.string() + " is not valid JSON: " + e.what());
    }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline void save_record(const RunRecord& r, const fs::path& path) { detail::write_json(path, to_json(r)); }
inline RunRecord load_record(const fs::path& path) { return record_from_json(detail::read_json(path)); }

// ---------------------------------------------------------------------------
// Data

inline synth::DatasetManifest make_manifest(const ExperimentConfig& c) {
    return synth::generate_split(c.phantom, c.split.n_train, c.split.n_val, c.split.n_test_inlier, c.split.n_test_ood);
}

/// Generates the manifest and writes `manifest.json` (plus the volumes as
/// .npy when `write_volumes`) under `dir`.
inline synth::DatasetManifest generate_dataset(const ExperimentConfig& c, const fs::path& dir, bool write_volumes) {
    auto m = make_manifest(c);
    fs::create_directories(dir);
    synth::save_manifest(m, dir / "manifest.json");
    if (write_volumes)
        for (const auto* r : m.all()) synth::write_volume(synth::load_volume(m, *r), dir / "volumes");
    return m;
}

struct Sample {
    std::string case_id;
    GridShape grid;
    Matrix image;    // V x 1
    Matrix targets;  // K x V
};

inline std::vector<Sample> load_samples(const synth::DatasetManifest& m, const std::vector<synth::CaseRecord>& cases) {
    std::vector<Sample> out;
    out.reserve(cases.size());
    for (const auto& r : cases) {
        const auto v = synth::load_volume(m, r);
        out.push_back({v.case_id, v.shape, model::image_matrix(v.image), v.training_masks()});
    }
    return out;
}

/// Mirror along axis 0 (h), 1 (w) or 2 (d).
inline Sample flipped(const Sample& s, int axis) {
    Sample out = s;
    const auto& g = s.grid;
    for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w)
            for (int d = 0; d < g.d; ++d) {
                const int hs = axis == 0 ? g.h - 1 - h : h;
                const int ws = axis == 1 ? g.w - 1 - w : w;
                const int ds = axis == 2 ? g.d - 1 - d : d;
                const int dst = g.index(h, w, d), src = g.index(hs, ws, ds);
                out.image(dst, 0) = s.image(src, 0);
                out.targets.col(dst) = s.targets.col(src);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    /// Output directory; empty means resolve_output_dir(config.output_dir).
    fs::path run_dir;
    /// Phase-1 weights to start from instead of running phase 1.
    std::optional<fs::path> phase1_checkpoint;
    bool write_files = true;
};

namespace detail {

inline std::vector<int> shuffled_order(std::size_t n, std::uint64_t seed) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    return order;
}

inline bool grads_finite(const nn::ParamList& params) {
    for (const auto* p : params)
        if (!p->grad.allFinite()) return false;
    return true;
}

inline void reset_optimizer(const nn::ParamList& params) {
    for (auto* p : params) {
        p->m.setZero();
        p->v.setZero();
        p->steps = 0;
    }
}

[[noreturn]] inline void dump_nonfinite(const fs::path& run_dir, bool write, const StepLog& s,
                                        const std::vector<const Sample*>& batch) {
    std::string where = "not written";
    if (write) {
        const fs::path dir = run_dir / "diagnostics" / ("step_" + std::to_string(s.step));
        fs::create_directories(dir);
        json ids = json::array();
        for (const auto* b : batch) {
            ids.push_back(b->case_id);
            npy::write(dir / (b->case_id + ".image.npy"), synth::npy_shape(b->grid),
                       std::span<const double>(b->image.data(), static_cast<std::size_t>(b->image.size())));
        }
        json j = to_json(s);
        j["case_ids"] = ids;
        write_json(dir / "batch.json", j);
        where = dir.string();
    }
    fail(ErrorCategory::Numeric,
         "non-finite loss or gradient at step " + std::to_string(s.step) + " (phase " + std::to_string(s.phase) +
             "); batch dump: " + where);
}

}  // namespace detail

/// Two-phase training on explicit samples. Phase 1 fits backbone + auxiliary
/// head; phase 2 trains backbone + decoder with the backbone frozen for the
/// first `freeze_fraction` of its epochs, then at `backbone_lr_mult`.
inline RunRecord train_on(const ExperimentConfig& cfg, const std::vector<Sample>& samples, const TrainOptions& opt = {}) {
    validate(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.tag = cfg.name;
    rec.config_json = serialize(cfg);
    rec.config_hash = fnv1a64(rec.config_json);
    rec.run_dir = opt.run_dir.empty() ? resolve_output_dir(cfg.output_dir) : opt.run_dir;
    const int total_epochs = cfg.optim.epochs_phase1 + cfg.optim.epochs_phase2;
    require(total_epochs == 0 || !samples.empty(), ErrorCategory::Data, "no training samples");
    for (const auto& s : samples)
        require(s.grid == cfg.model.grid && s.targets.rows() == cfg.model.num_classes, ErrorCategory::Shape,
                "sample " + s.case_id + " does not match the model configuration");

    std::ofstream log;
    if (opt.write_files) {
        fs::create_directories(rec.run_dir);
        save_config(cfg, rec.run_dir / "config.json");
        log.open(rec.run_dir / "train_log.jsonl");
        require(static_cast<bool>(log), ErrorCategory::Io, "cannot write training log in " + rec.run_dir.string());
    }

    model::MaskTransformer net(cfg.model);
    const auto params = net.params();
    const auto mhash = model_hash(cfg.model);
    const nn::AdamOptions adam{cfg.optim.lr};
    const int batch = cfg.optim.batch_size;
    const int steps_per_epoch = samples.empty() ? 0 : (static_cast<int>(samples.size()) + batch - 1) / batch;
    int global_step = 0;

    auto run_phase = [&](int phase, int epochs, int frozen_epochs, Real backbone_mult, bool joint) {
        detail::reset_optimizer(params);
        const int phase_steps = epochs * steps_per_epoch;
        int phase_step = 0;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            const bool frozen = epoch < frozen_epochs;
            const auto order = detail::shuffled_order(
                samples.size(), mix_seed(cfg.optim.seed, static_cast<std::uint64_t>(phase) * 100003u + epoch));
            Rng aug_rng(mix_seed(cfg.optim.seed ^ 0xa5a5a5a5ULL, static_cast<std::uint64_t>(phase) * 100003u + epoch));
            EpochLog elog{phase, epoch, 0, frozen};
            for (int start = 0; start < static_cast<int>(order.size()); start += batch) {
                const int stop = std::min<int>(start + batch, static_cast<int>(order.size()));
                const Real inv_b = 1.0 / static_cast<Real>(stop - start);
                StepLog s{global_step, phase, epoch};
                s.lr = cfg.optim.lr;
                if (cfg.optim.poly_decay && phase_steps > 0)
                    s.lr *= std::pow(1.0 - static_cast<Real>(phase_step) / phase_steps, cfg.optim.poly_power);
                net.zero_grad();
                std::vector<const Sample*> members;
                std::vector<Sample> augmented;
                augmented.reserve(static_cast<std::size_t>(stop - start));
                for (int i = start; i < stop; ++i) {
                    const Sample* smp = &samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                    if (cfg.optim.augment) {
                        Sample a = *smp;
                        const int axes = smp->grid.volumetric() ? 3 : 2;
                        for (int ax = 0; ax < axes; ++ax)
                            if (aug_rng.uniform() < 0.5) a = flipped(a, ax);
                        augmented.push_back(std::move(a));
                        smp = &augmented.back();
                    }
                    members.push_back(smp);
                    const Matrix image = smp->image;
                    if (phase == 1) {
                        Matrix dz;
                        const Matrix z = net.forward_aux(image);
                        const auto terms = loss::seg_loss_terms(z, smp->targets, &dz);
                        s.seg += terms.total() * inv_b;
                        s.total += terms.total() * inv_b;
                        if (std::isfinite(terms.total())) net.backward_aux(dz * inv_b);
                    } else {
                        const auto out = net.forward(image);
                        const loss::LossWeights w{cfg.loss.qd_weight, cfg.loss.ds_weight};
                        const std::vector<loss::AuxAssignment> none;
                        auto L = loss::total_loss(out.logits, out.assignments, smp->targets, out.grid,
                                                  cfg.model.partition, w, cfg.loss.deep_supervision ? out.aux : none);
                        s.total += L.total * inv_b;
                        s.seg += L.seg * inv_b;
                        s.qd += L.qd * inv_b;
                        s.ds += L.ds * inv_b;
                        if (std::isfinite(L.total)) {
                            for (auto& d : L.daux) d *= inv_b;
                            net.backward(L.dz * inv_b, L.dm * inv_b, L.daux, joint || !frozen);
                        }
                    }
                }
                if (!std::isfinite(s.total) || !detail::grads_finite(params))
                    detail::dump_nonfinite(rec.run_dir, opt.write_files, s, members);
                nn::adam_step(params, adam, s.lr, [&](const nn::Param& p) -> Real {
                    switch (p.group) {
                        case nn::ParamGroup::AuxHead: return phase == 1 ? 1.0 : 0.0;
                        case nn::ParamGroup::Decoder: return phase == 1 ? 0.0 : 1.0;
                        case nn::ParamGroup::Backbone: return phase == 1 ? 1.0 : (frozen ? 0.0 : backbone_mult);
                    }
                    return 0.0;
                });
                if (opt.write_files) log << to_json(s).dump() << "\n";
                rec.steps.push_back(s);
                elog.steps += 1;
                elog.total += s.total;
                elog.seg += s.seg;
                elog.qd += s.qd;
                elog.ds += s.ds;
                ++phase_step;
                ++global_step;
            }
            if (elog.steps > 0) {
                const Real n = elog.steps;
                elog.total /= n;
                elog.seg /= n;
                elog.qd /= n;
                elog.ds /= n;
            }
            rec.epochs.push_back(elog);
        }
    };

    if (!cfg.optim.joint_only) {
        if (opt.phase1_checkpoint) {
            checkpoint::load(*opt.phase1_checkpoint, params, mhash);
            rec.phase1_checkpoint = *opt.phase1_checkpoint;
        } else {
            run_phase(1, cfg.optim.epochs_phase1, 0, 1.0, false);
            if (opt.write_files) {
                rec.phase1_checkpoint = rec.run_dir / "phase1.ckpt";
                checkpoint::save(rec.phase1_checkpoint, params, mhash);
            }
        }
        const int frozen = static_cast<int>(std::floor(cfg.optim.freeze_fraction * cfg.optim.epochs_phase2));
        run_phase(2, cfg.optim.epochs_phase2, frozen, cfg.optim.backbone_lr_mult, false);
    } else {
        run_phase(2, total_epochs, 0, 1.0, true);
    }
    if (opt.write_files) {
        rec.checkpoint = rec.run_dir / "final.ckpt";
        checkpoint::save(rec.checkpoint, params, mhash);
    }
    rec.train_seconds = detail::seconds_since(t0);
    return rec;
}

inline RunRecord train(const ExperimentConfig& cfg, const synth::DatasetManifest& m, const TrainOptions& opt = {}) {
    RunRecord rec = train_on(cfg, load_samples(m, m.train), opt);
    if (opt.write_files) {
        rec.manifest_path = rec.run_dir / "manifest.json";
        synth::save_manifest(m, rec.manifest_path);
        save_record(rec, rec.run_dir / "run.json");
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Evaluation

struct CaseResult {
    std::string case_id;
    bool is_ood_case = false;
    GridShape grid;
    std::vector<int> predicted;
    std::vector<std::uint8_t> ood_mask;
    std::vector<ood::AnomalyMap> maps;  // aligned with EvalResult::methods
};

struct EvalResult {
    metrics::EvalReport report;
    std::vector<ood::ScoreMethod> methods;
    std::vector<CaseResult> cases;
};

struct EvalOptions {
    /// Destination for report.json and exported maps; empty writes nothing.
    fs::path out_dir;
    bool export_maps = true;
    std::string config_tag;
};

/// Anomaly maps, predictions and OOD masks for one case from a single forward.
inline CaseResult score_case(model::MaskTransformer& net, const synth::LabeledVolume& v,
                             const std::vector<ood::ScoreMethod>& methods) {
    CaseResult c;
    c.case_id = v.case_id;
    c.is_ood_case = v.is_ood_case;
    c.grid = v.shape;
    const auto out = net.forward(model::image_matrix(v.image));
    c.predicted = model::argmax_rows(out.logits);
    c.ood_mask.resize(v.labels.size());
    for (int i = 0; i < v.shape.voxels(); ++i) c.ood_mask[static_cast<std::size_t>(i)] = v.is_ood_voxel(i) ? 1 : 0;
    for (auto m : methods) c.maps.push_back(ood::score(m, out.responses, out.assignments, out.logits, v.shape));
    return c;
}

inline EvalResult evaluate(model::MaskTransformer& net, const synth::DatasetManifest& m,
                           const std::vector<ood::ScoreMethod>& methods, const EvalOptions& opt = {}) {
    require(!m.test_inlier.empty() && !m.test_ood.empty(), ErrorCategory::Data,
            "manifest lacks an inlier-test or OOD-test partition");
    require(!m.val.empty(), ErrorCategory::Data, "manifest lacks a validation partition for Dice");
    require(!methods.empty(), ErrorCategory::Config, "no score methods requested");
    require(net.config().grid == m.spec.shape && net.config().num_classes == m.spec.num_training_classes(),
            ErrorCategory::Config, "model does not match the dataset");

    EvalResult res;
    res.methods = methods;
    res.report.config_tag = opt.config_tag;
    std::vector<metrics::ScoreAccumulator> acc(methods.size());
    for (const auto* part : {&m.test_inlier, &m.test_ood}) {
        for (const auto& r : *part) {
            auto c = score_case(net, synth::load_volume(m, r), methods);
            for (std::size_t k = 0; k < methods.size(); ++k) acc[k].add(c.maps[k].scores, c.ood_mask);
            for (auto b : c.ood_mask) (b ? res.report.ood_voxels : res.report.inlier_voxels) += 1;
            (c.is_ood_case ? res.report.ood_cases : res.report.inlier_cases) += 1;
            res.cases.push_back(std::move(c));
        }
    }

    for (std::size_t k = 0; k < methods.size(); ++k) {
        const auto table = acc[k].table();
        metrics::MethodMetrics mm;
        mm.auroc = metrics::auroc(table);
        mm.aupr = metrics::aupr(table);
        mm.fpr95 = metrics::fpr_at_tpr(table, 0.95);
        // A case with no predicted tumor voxel gets the dataset minimum score.
        const Real floor_score = table.values.back();
        std::vector<metrics::CaseScore> cs;
        for (const auto& c : res.cases) cs.push_back({ood::case_score(c.maps[k], c.predicted, floor_score), c.is_ood_case});
        mm.case_auc = metrics::case_auc(cs);
        res.report.methods[std::string(ood::to_string(methods[k]))] = mm;
    }

    const int K = m.spec.num_training_classes();
    std::vector<metrics::DiceCounts> dice(static_cast<std::size_t>(K));
    for (const auto& r : m.val) {
        const auto v = synth::load_volume(m, r);
        const auto out = net.forward(model::image_matrix(v.image));
        const auto pred = model::argmax_rows(out.logits);
        for (int k = 0; k < K; ++k) dice[static_cast<std::size_t>(k)] += metrics::dice_counts(pred, v.labels, k);
    }
    Real inlier_sum = 0.0;
    for (int k = 0; k < K; ++k) {
        res.report.dice_per_class[k] = dice[static_cast<std::size_t>(k)].value();
        if (k >= ood::kFirstTumorClass) inlier_sum += res.report.dice_per_class[k];
    }
    res.report.mean_inlier_dice = inlier_sum / static_cast<Real>(K - ood::kFirstTumorClass);

    if (!opt.out_dir.empty()) {
        detail::write_json(opt.out_dir / "report.json", to_json(res.report));
        const fs::path pooled = opt.out_dir / "pooled";
        fs::create_directories(pooled);
        std::vector<std::uint8_t> labels;
        for (const auto& c : res.cases) labels.insert(labels.end(), c.ood_mask.begin(), c.ood_mask.end());
        npy::write(pooled / "labels.npy", {labels.size()}, std::span<const std::uint8_t>(labels));
        for (std::size_t k = 0; k < methods.size(); ++k) {
            std::vector<double> scores;
            for (const auto& c : res.cases) scores.insert(scores.end(), c.maps[k].scores.begin(), c.maps[k].scores.end());
            npy::write(pooled / ("scores." + std::string(ood::to_string(methods[k])) + ".npy"), {scores.size()},
                       std::span<const double>(scores));
        }
        if (opt.export_maps) {
            const fs::path maps = opt.out_dir / "maps";
            fs::create_directories(maps);
            for (const auto& c : res.cases) {
                for (std::size_t k = 0; k < methods.size(); ++k) {
                    const std::string stem = c.case_id + "." + std::string(ood::to_string(methods[k]));
                    npy::write(maps / (stem + ".npy"), synth::npy_shape(c.grid),
                               std::span<const double>(c.maps[k].scores));
                    if (!c.grid.volumetric())
                        imageio::write_pgm(maps / (stem + ".pgm"), imageio::to_gray(c.maps[k].scores, c.grid));
                }
            }
        }
    }
    return res;
}

/// Evaluates a saved checkpoint with the architecture from `cfg`.
inline EvalResult evaluate(const ExperimentConfig& cfg, const fs::path& ckpt, const synth::DatasetManifest& m,
                           const std::vector<ood::ScoreMethod>& methods, const EvalOptions& opt = {}) {
    model::MaskTransformer net(cfg.model);
    checkpoint::load(ckpt, net.params(), model_hash(cfg.model));
    return evaluate(net, m, methods, opt);
}

/// Evaluates a trained record's final checkpoint into `<run_dir>/eval` and
/// updates the record.
inline EvalResult evaluate_record(RunRecord& rec, const ExperimentConfig& cfg, const synth::DatasetManifest& m,
                                  const std::vector<ood::ScoreMethod>& methods) {
    const auto t0 = std::chrono::steady_clock::now();
    rec.eval_dir = rec.run_dir / "eval";
    auto res = evaluate(cfg, rec.checkpoint, m, methods, {rec.eval_dir, cfg.eval.export_maps, rec.tag});
    rec.report = res.report;
    rec.eval_seconds = detail::seconds_since(t0);
    save_record(rec, rec.run_dir / "run.json");
    return res;
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationAxis { QdOnOff, PartitionGrid, ScoreMethod };

inline std::string to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::QdOnOff: return "qd_on_off";
        case AblationAxis::PartitionGrid: return "partition_grid";
        case AblationAxis::ScoreMethod: return "score_method";
    }
    return "";
}

inline AblationAxis parse_axis(const std::string& s) {
    for (auto a : {AblationAxis::QdOnOff, AblationAxis::PartitionGrid, AblationAxis::ScoreMethod})
        if (to_string(a) == s) return a;
    fail(ErrorCategory::Config, "unknown ablation axis '" + s + "'");
}

inline const std::vector<loss::QDPartition>& partition_grid() {
    static const std::vector<loss::QDPartition> grid = {{8, 4, 20}, {8, 20, 4}, {16, 4, 12}, {20, 4, 8}, {24, 4, 4}};
    return grid;
}

struct TableRow {
    std::string tag;
    std::string method;
    metrics::MethodMetrics metrics;
    Real mean_inlier_dice = 0.0;
};

struct AblationResult {
    AblationAxis axis = AblationAxis::QdOnOff;
    std::vector<RunRecord> runs;
    std::vector<TableRow> rows;
    fs::path table_path;
};

inline std::vector<TableRow> table_rows(const std::vector<RunRecord>& records) {
    std::vector<TableRow> rows;
    for (const auto& r : records) {
        if (!r.report) continue;
        for (const auto& [method, mm] : r.report->methods) rows.push_back({r.tag, method, mm, r.report->mean_inlier_dice});
    }
    return rows;
}

inline std::string format_real(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_table(const std::vector<TableRow>& rows) {
    std::ostringstream s;
    s << "tag\tmethod\tauroc\taupr\tfpr95\tcase_auc\tmean_inlier_dice\n";
    for (const auto& r : rows)
        s << r.tag << '\t' << r.method << '\t' << format_real(r.metrics.auroc) << '\t' << format_real(r.metrics.aupr)
          << '\t' << format_real(r.metrics.fpr95) << '\t' << format_real(r.metrics.case_auc) << '\t'
          << format_real(r.mean_inlier_dice) << '\n';
    return s.str();
}

inline void write_table(const fs::path& path, const std::vector<TableRow>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write " + path.string());
    out << format_table(rows);
}

/// Key of everything phase 1 depends on; runs with equal keys share phase-1
/// weights.
inline std::uint64_t phase1_key(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("name");
    j.erase("output_dir");
    j.erase("loss");
    j.erase("eval");
    j["model"].erase("partition");
    j["optim"].erase("epochs_phase2");
    j["optim"].erase("freeze_fraction");
    j["optim"].erase("backbone_lr_mult");
    return fnv1a64(j.dump());
}

struct AblateOptions {
    /// Root for the per-variant run directories; empty means
    /// resolve_output_dir(base.output_dir) / ("ablate_" + axis).
    fs::path out_dir;
};

inline AblationResult ablate(const ExperimentConfig& base, AblationAxis axis, const AblateOptions& opt = {}) {
    validate(base);
    AblationResult res;
    res.axis = axis;
    const fs::path root =
        opt.out_dir.empty() ? resolve_output_dir(base.output_dir) / ("ablate_" + to_string(axis)) : opt.out_dir;
    const auto manifest = make_manifest(base);

    std::vector<ExperimentConfig> variants;
    if (axis == AblationAxis::QdOnOff) {
        for (Real lambda : {0.1, 0.0}) {
            auto c = base;
            c.loss.qd_weight = lambda;
            c.name = base.name + (lambda > 0.0 ? "_qd_on" : "_qd_off");
            variants.push_back(c);
        }
    } else if (axis == AblationAxis::PartitionGrid) {
        for (const auto& p : partition_grid()) {
            auto c = base;
            c.model.partition = p;
            c.model.num_queries = p.total();
            c.name = base.name + "_p" + std::to_string(p.background) + "_" + std::to_string(p.organ) + "_" +
                     std::to_string(p.tumor);
            variants.push_back(c);
        }
    } else {
        auto c = base;
        c.eval.methods.assign(ood::kAllMethods.begin(), ood::kAllMethods.end());
        variants.push_back(c);
    }

    std::optional<fs::path> shared_phase1;
    std::uint64_t shared_key = 0;
    for (auto& c : variants) {
        finalize(c);
        c.output_dir = (root / c.name).string();
        validate(c);
        TrainOptions topt;
        topt.run_dir = root / c.name;
        if (shared_phase1 && phase1_key(c) == shared_key) topt.phase1_checkpoint = shared_phase1;
        auto rec = train(c, manifest, topt);
        if (!shared_phase1 && !c.optim.joint_only) {
            shared_phase1 = rec.phase1_checkpoint;
            shared_key = phase1_key(c);
        }
        evaluate_record(rec, c, manifest, c.eval.methods);
        res.runs.push_back(std::move(rec));
    }
    res.rows = table_rows(res.runs);
    res.table_path = root / "table.tsv";
    write_table(res.table_path, res.rows);
    return res;
}

// ---------------------------------------------------------------------------
// Report export

namespace detail {

/// Middle depth slice of a volumetric field; identity in 2D.
inline std::vector<Real> middle_slice(const std::vector<Real>& values, const GridShape& g) {
    if (!g.volumetric()) return values;
    std::vector<Real> out(static_cast<std::size_t>(g.h) * g.w);
    for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w) out[static_cast<std::size_t>(h) * g.w + w] = values[g.index(h, w, g.d / 2)];
    return out;
}

inline std::vector<Real> read_map(const fs::path& path) {
    const auto a = npy::read(path);
    require(a.dtype == npy::DType::Float64, ErrorCategory::Io, "score map " + path.string() + " is not float64");
    const auto v = a.as<double>();
    return {v.begin(), v.end()};
}

}  // namespace detail

struct ExportSummary {
    fs::path table;
    std::vector<fs::path> images;
    std::vector<fs::path> montages;
};

/// Writes summary.tsv, per-case anomaly images and one montage per OOD test
/// case (image | ground truth | each method's map) for every evaluated record.
inline ExportSummary export_report(const std::vector<RunRecord>& records, const fs::path& out_dir) {
    require(!records.empty(), ErrorCategory::Config, "export_report needs at least one record");
    fs::create_directories(out_dir);
    ExportSummary out;
    out.table = out_dir / "summary.tsv";
    write_table(out.table, table_rows(records));
    for (const auto& r : records) {
        if (!r.report || r.eval_dir.empty() || !fs::exists(r.manifest_path)) continue;
        const auto m = synth::load_manifest(r.manifest_path);
        const GridShape g = m.spec.shape;
        const GridShape g2{g.h, g.w, 1};
        const fs::path img_dir = out_dir / r.tag / "images";
        const fs::path mon_dir = out_dir / r.tag / "montages";
        fs::create_directories(img_dir);
        fs::create_directories(mon_dir);
        for (const auto* part : {&m.test_inlier, &m.test_ood}) {
            for (const auto& c : *part) {
                const auto v = synth::load_volume(m, c);
                std::vector<imageio::Gray8> tiles;
                tiles.push_back(imageio::to_gray(detail::middle_slice(v.image, g), g2));
                std::vector<Real> gt(v.labels.begin(), v.labels.end());
                tiles.push_back(imageio::to_gray(detail::middle_slice(gt, g), g2));
                for (const auto& [method, mm] : r.report->methods) {
                    const fs::path src = r.eval_dir / "maps" / (c.case_id + "." + method + ".npy");
                    if (!fs::exists(src)) continue;
                    const auto gray = imageio::to_gray(detail::middle_slice(detail::read_map(src), g), g2);
                    const fs::path dst = img_dir / (c.case_id + "." + method + ".pgm");
                    imageio::write_pgm(dst, gray);
                    out.images.push_back(dst);
                    tiles.push_back(gray);
                }
                if (c.is_ood_case) {
                    const fs::path dst = mon_dir / (c.case_id + ".pgm");
                    imageio::write_pgm(dst, imageio::hconcat(tiles));
                    out.montages.push_back(dst);
                }
            }
        }
    }
    return out;
}

}  // namespace maxquery::harness
