// maxquery command line: gen-data, train, eval, ablate, report.
//
// Exit codes: 0 ok, 2 config/usage, 3 data, 4 shape, 5 numeric, 6 io,
// 1 anything else. Diagnostics go to stderr as "error[<category>]: ...".
// Relative output paths resolve against $MAXQUERY_OUTPUT_ROOT.

#include "maxquery/harness.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <sstream>

namespace mq = maxquery;
namespace fs = std::filesystem;

namespace {

int exit_code(mq::ErrorCategory c) {
    switch (c) {
        case mq::ErrorCategory::Config: return 2;
        case mq::ErrorCategory::Data: return 3;
        case mq::ErrorCategory::Shape: return 4;
        case mq::ErrorCategory::Numeric: return 5;
        case mq::ErrorCategory::Io: return 6;
    }
    return 1;
}

mq::ExperimentConfig config_or_default(const std::string& path, const std::string& out) {
    mq::ExperimentConfig c;
    if (!path.empty()) c = mq::load_config(path);
    if (!out.empty()) c.output_dir = out;
    mq::finalize(c);
    mq::validate(c);
    return c;
}

std::vector<mq::ood::ScoreMethod> parse_methods(const std::string& list, const mq::ExperimentConfig& c) {
    if (list.empty()) return c.eval.methods;
    std::vector<mq::ood::ScoreMethod> out;
    std::stringstream in(list);
    for (std::string item; std::getline(in, item, ',');)
        if (!item.empty()) out.push_back(mq::ood::parse_method(item));
    return out;
}

void print_report(const mq::metrics::EvalReport& r) {
    std::cout << "method\tauroc\taupr\tfpr95\tcase_auc\n";
    for (const auto& [name, m] : r.methods)
        std::cout << name << '\t' << m.auroc << '\t' << m.aupr << '\t' << m.fpr95 << '\t' << m.case_auc << '\n';
    std::cout << "mean_inlier_dice\t" << r.mean_inlier_dice << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MaxQuery desk-scale experiments"};
    app.require_subcommand(1);
    std::string config_path, out_dir, checkpoint_path, manifest_path, methods, axis, report_out;
    std::vector<std::string> runs;
    bool no_volumes = false, with_eval = false;

    auto* gen = app.add_subcommand("gen-data", "generate the phantom dataset and manifest");
    gen->add_option("-c,--config", config_path, "experiment config (JSON)");
    gen->add_option("-o,--out", out_dir, "output directory (default: config output_dir)");
    gen->add_flag("--no-volumes", no_volumes, "write only the manifest");

    auto* tr = app.add_subcommand("train", "two-phase training");
    tr->add_option("-c,--config", config_path, "experiment config (JSON)");
    tr->add_option("-o,--out", out_dir, "run directory (default: config output_dir)");
    tr->add_option("-m,--manifest", manifest_path, "existing manifest (default: generate from config)");
    tr->add_flag("--eval", with_eval, "evaluate the final checkpoint");

    auto* ev = app.add_subcommand("eval", "score a checkpoint on the test partitions");
    ev->add_option("-c,--config", config_path, "experiment config (JSON)");
    ev->add_option("-k,--checkpoint", checkpoint_path, "checkpoint file")->required();
    ev->add_option("-m,--manifest", manifest_path, "manifest (default: generate from config)");
    ev->add_option("--methods", methods, "comma-separated score methods");
    ev->add_option("-o,--out", out_dir, "output directory (default: <output_dir>/eval)");

    auto* ab = app.add_subcommand("ablate", "run an ablation axis");
    ab->add_option("-c,--config", config_path, "base experiment config (JSON)");
    ab->add_option("-a,--axis", axis, "qd_on_off | partition_grid | score_method")->required();
    ab->add_option("-o,--out", out_dir, "output root (default: <output_dir>/ablate_<axis>)");

    auto* rp = app.add_subcommand("report", "summary table, per-case images and montages");
    rp->add_option("-r,--runs", runs, "run.json files")->required();
    rp->add_option("-o,--out", report_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            auto c = config_or_default(config_path, "");
            const fs::path dir = out_dir.empty() ? mq::resolve_output_dir(c.output_dir) : mq::resolve_output_dir(out_dir);
            const auto m = mq::harness::generate_dataset(c, dir, !no_volumes);
            mq::save_config(c, dir / "config.json");
            std::cout << "wrote " << m.size() << " cases to " << dir.string() << "\n";
        } else if (tr->parsed()) {
            auto c = config_or_default(config_path, out_dir);
            const auto m = manifest_path.empty() ? mq::harness::make_manifest(c) : mq::synth::load_manifest(manifest_path);
            auto rec = mq::harness::train(c, m);
            std::cout << "trained " << rec.steps.size() << " steps in " << rec.train_seconds << " s; checkpoint "
                      << rec.checkpoint.string() << "\n";
            if (with_eval) {
                mq::harness::evaluate_record(rec, c, m, c.eval.methods);
                print_report(*rec.report);
            }
        } else if (ev->parsed()) {
            auto c = config_or_default(config_path, "");
            const auto m = manifest_path.empty() ? mq::harness::make_manifest(c) : mq::synth::load_manifest(manifest_path);
            const fs::path dir =
                out_dir.empty() ? mq::resolve_output_dir(c.output_dir) / "eval" : mq::resolve_output_dir(out_dir);
            auto res = mq::harness::evaluate(c, checkpoint_path, m, parse_methods(methods, c),
                                             {dir, c.eval.export_maps, c.name});
            mq::harness::RunRecord rec;
            rec.tag = c.name;
            rec.config_json = mq::serialize(c);
            rec.config_hash = mq::fnv1a64(rec.config_json);
            rec.run_dir = dir;
            rec.checkpoint = checkpoint_path;
            rec.manifest_path = dir / "manifest.json";
            mq::synth::save_manifest(m, rec.manifest_path);
            rec.eval_dir = dir;
            rec.report = res.report;
            mq::harness::save_record(rec, dir / "run.json");
            print_report(res.report);
        } else if (ab->parsed()) {
            auto c = config_or_default(config_path, "");
            mq::harness::AblateOptions opt;
            if (!out_dir.empty()) opt.out_dir = mq::resolve_output_dir(out_dir);
            const auto res = mq::harness::ablate(c, mq::harness::parse_axis(axis), opt);
            std::cout << mq::harness::format_table(res.rows);
            std::cout << "table: " << res.table_path.string() << "\n";
        } else if (rp->parsed()) {
            std::vector<mq::harness::RunRecord> records;
            for (const auto& r : runs) records.push_back(mq::harness::load_record(r));
            const auto s = mq::harness::export_report(records, mq::resolve_output_dir(report_out));
            std::cout << "summary " << s.table.string() << ", " << s.images.size() << " images, " << s.montages.size()
                      << " montages\n";
        }
    } catch (const mq::Error& e) {
        std::cerr << "error[" << mq::to_string(e.category()) << "]: " << e.what() << "\n";
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
