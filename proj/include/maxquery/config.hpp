#pragma once
// Experiment configuration and its JSON form. The config hash is FNV-1a 64
// over the canonical serialization `to_json(config).dump()` (key-sorted, no
// whitespace).

#include "maxquery/core.hpp"
#include "maxquery/losses.hpp"
#include "maxquery/model.hpp"
#include "maxquery/oodscore.hpp"
#include "maxquery/synthdata.hpp"

#include "json.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace maxquery {

struct SplitConfig {
    int n_train = 32;
    int n_val = 8;
    int n_test_inlier = 8;
    int n_test_ood = 12;
};

struct LossConfig {
    Real qd_weight = 0.1;
    Real ds_weight = 0.1;
    bool deep_supervision = true;
};

struct OptimConfig {
    Real lr = 1e-3;
    Real backbone_lr_mult = 0.1;
    /// fraction of phase-2 epochs with the backbone frozen
    Real freeze_fraction = 0.25;
    int epochs_phase1 = 30;
    int epochs_phase2 = 30;
    int batch_size = 4;
    /// skip phase 1 and train everything jointly for epochs_phase1 + epochs_phase2 epochs
    bool joint_only = false;
    bool poly_decay = false;
    Real poly_power = 0.9;
    bool augment = false;
    std::uint64_t seed = 0;
};

struct EvalConfig {
    std::vector<ood::ScoreMethod> methods{ood::kAllMethods.begin(), ood::kAllMethods.end()};
    bool export_maps = true;
};

struct ExperimentConfig {
    std::string name = "default";
    synth::PhantomSpec phantom;
    SplitConfig split;
    model::ModelConfig model;
    LossConfig loss;
    OptimConfig optim;
    EvalConfig eval;
    std::string output_dir = "runs/default";
};

/// Derived fields: the model grid and class count follow the phantom, and the
/// init seed follows the training seed.
inline void finalize(ExperimentConfig& c) {
    c.model.grid = c.phantom.shape;
    c.model.num_classes = c.phantom.num_training_classes();
    c.model.init_seed = mix_seed(c.optim.seed, 0x1417);
}

inline void validate(const ExperimentConfig& c) {
    synth::validate(c.phantom);
    model::validate(c.model);
    require(c.model.grid == c.phantom.shape && c.model.num_classes == c.phantom.num_training_classes(),
            ErrorCategory::Config, "model grid/classes disagree with the phantom; call finalize()");
    require(c.loss.qd_weight >= 0.0 && c.loss.ds_weight >= 0.0, ErrorCategory::Config, "loss weights must be >= 0");
    require(c.optim.lr > 0.0 && c.optim.batch_size >= 1 && c.optim.epochs_phase1 >= 0 && c.optim.epochs_phase2 >= 0,
            ErrorCategory::Config, "invalid optimizer settings");
    require(c.optim.freeze_fraction >= 0.0 && c.optim.freeze_fraction <= 1.0, ErrorCategory::Config,
            "freeze_fraction must lie in [0, 1]");
    require(!c.eval.methods.empty(), ErrorCategory::Config, "no score methods requested");
}

using nlohmann::json;

inline json to_json(const ExperimentConfig& c) {
    json methods = json::array();
    for (auto m : c.eval.methods) methods.push_back(std::string(ood::to_string(m)));
    const auto& m = c.model;
    return json{
        {"name", c.name},
        {"phantom", c.phantom},
        {"split",
         {{"n_train", c.split.n_train},
          {"n_val", c.split.n_val},
          {"n_test_inlier", c.split.n_test_inlier},
          {"n_test_ood", c.split.n_test_ood}}},
        {"model",
         {{"levels", m.levels},
          {"base_width", m.base_width},
          {"embed_dim", m.embed_dim},
          {"num_queries", m.num_queries},
          {"partition", {m.partition.background, m.partition.organ, m.partition.tumor}},
          {"decoder_strides", m.decoder_strides},
          {"heads", m.heads},
          {"ffn_hidden", m.ffn_hidden}}},
        {"loss",
         {{"qd_weight", c.loss.qd_weight},
          {"ds_weight", c.loss.ds_weight},
          {"deep_supervision", c.loss.deep_supervision},
          {"qd_reduction", "mean"}}},
        {"optim",
         {{"lr", c.optim.lr},
          {"backbone_lr_mult", c.optim.backbone_lr_mult},
          {"freeze_fraction", c.optim.freeze_fraction},
          {"epochs_phase1", c.optim.epochs_phase1},
          {"epochs_phase2", c.optim.epochs_phase2},
          {"batch_size", c.optim.batch_size},
          {"joint_only", c.optim.joint_only},
          {"poly_decay", c.optim.poly_decay},
          {"poly_power", c.optim.poly_power},
          {"augment", c.optim.augment},
          {"seed", c.optim.seed}}},
        {"eval", {{"methods", methods}, {"export_maps", c.eval.export_maps}}},
        {"output_dir", c.output_dir}};
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        c.name = j.value("name", c.name);
        if (j.contains("phantom")) c.phantom = j.at("phantom").get<synth::PhantomSpec>();
        if (j.contains("split")) {
            const auto& s = j.at("split");
            c.split.n_train = s.value("n_train", c.split.n_train);
            c.split.n_val = s.value("n_val", c.split.n_val);
            c.split.n_test_inlier = s.value("n_test_inlier", c.split.n_test_inlier);
            c.split.n_test_ood = s.value("n_test_ood", c.split.n_test_ood);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.levels = m.value("levels", c.model.levels);
            c.model.base_width = m.value("base_width", c.model.base_width);
            c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
            c.model.num_queries = m.value("num_queries", c.model.num_queries);
            if (m.contains("partition")) {
                const auto p = m.at("partition").get<std::vector<int>>();
                require(p.size() == 3, ErrorCategory::Config, "model.partition must have three entries");
                c.model.partition = {p[0], p[1], p[2]};
            }
            if (m.contains("decoder_strides")) c.model.decoder_strides = m.at("decoder_strides").get<std::vector<int>>();
            c.model.heads = m.value("heads", c.model.heads);
            c.model.ffn_hidden = m.value("ffn_hidden", c.model.ffn_hidden);
        }
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            c.loss.qd_weight = l.value("qd_weight", c.loss.qd_weight);
            c.loss.ds_weight = l.value("ds_weight", c.loss.ds_weight);
            c.loss.deep_supervision = l.value("deep_supervision", c.loss.deep_supervision);
            require(l.value("qd_reduction", std::string("mean")) == "mean", ErrorCategory::Config,
                    "only the mean QD reduction is supported");
        }
        if (j.contains("optim")) {
            const auto& o = j.at("optim");
            c.optim.lr = o.value("lr", c.optim.lr);
            c.optim.backbone_lr_mult = o.value("backbone_lr_mult", c.optim.backbone_lr_mult);
            c.optim.freeze_fraction = o.value("freeze_fraction", c.optim.freeze_fraction);
            c.optim.epochs_phase1 = o.value("epochs_phase1", c.optim.epochs_phase1);
            c.optim.epochs_phase2 = o.value("epochs_phase2", c.optim.epochs_phase2);
            c.optim.batch_size = o.value("batch_size", c.optim.batch_size);
            c.optim.joint_only = o.value("joint_only", c.optim.joint_only);
            c.optim.poly_decay = o.value("poly_decay", c.optim.poly_decay);
            c.optim.poly_power = o.value("poly_power", c.optim.poly_power);
            c.optim.augment = o.value("augment", c.optim.augment);
            c.optim.seed = o.value("seed", c.optim.seed);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("methods")) {
                c.eval.methods.clear();
                for (const auto& s : e.at("methods")) c.eval.methods.push_back(ood::parse_method(s.get<std::string>()));
            }
            c.eval.export_maps = e.value("export_maps", c.eval.export_maps);
        }
        c.output_dir = j.value("output_dir", c.output_dir);
    } catch (const json::exception& e) {
        fail(ErrorCategory::Config, std::string("malformed config: ") + e.what());
    }
    finalize(c);
    validate(c);
    return c;
}

inline std::string serialize(const ExperimentConfig& c) { return to_json(c).dump(); }
inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(serialize(c)); }

inline std::string hex64(std::uint64_t h) {
    std::ostringstream s;
    s << std::hex;
    s.width(16);
    s.fill('0');
    s << h;
    return s.str();
}

/// Hash of the architecture-defining fields; a checkpoint is loadable into
/// any model with the same value.
inline std::uint64_t model_hash(const model::ModelConfig& m) {
    json j{{"grid", {m.grid.h, m.grid.w, m.grid.d}},
           {"in_channels", m.in_channels},
           {"levels", m.levels},
           {"base_width", m.base_width},
           {"embed_dim", m.embed_dim},
           {"num_queries", m.num_queries},
           {"num_classes", m.num_classes},
           {"decoder_strides", m.decoder_strides},
           {"heads", m.heads},
           {"ffn_hidden", m.ffn_hidden}};
    return fnv1a64(j.dump());
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCategory::Io, "cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCategory::Config, "config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCategory::Io, "cannot write config " + path.string());
    out << to_json(c).dump(2) << "\n";
}

/// Relative output paths resolve against $MAXQUERY_OUTPUT_ROOT when set.
inline std::filesystem::path resolve_output_dir(const std::string& dir) {
    std::filesystem::path p(dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("MAXQUERY_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
    return p;
}

}  // namespace maxquery
