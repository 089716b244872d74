#include "maxquery/harness.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace maxquery;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(MAXQUERY_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = ::popen(cmd.c_str(), "r");
    Run r;
    if (!p) return r;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof(buf), p)) > 0;) r.output.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() /
                ("mq_cli_" + std::to_string(::getpid()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(root_);
        fs::create_directories(root_);
        ::unsetenv("MAXQUERY_OUTPUT_ROOT");
    }
    void TearDown() override {
        ::unsetenv("MAXQUERY_OUTPUT_ROOT");
        fs::remove_all(root_);
    }

    // small phantoms, one epoch per phase, relative output_dir
    fs::path write_config(const std::string& output_dir = "out") {
        ExperimentConfig c;
        c.name = "cli";
        c.phantom.shape = {32, 32, 1};
        c.phantom.organ.radius_frac_max = 0.40;
        c.phantom.tumor.radius_min = 2.0;
        c.phantom.tumor.radius_max = 4.0;
        c.phantom.background.structure_radius_min = 1.0;
        c.phantom.background.structure_radius_max = 2.0;
        c.split = {2, 1, 2, 2};
        c.model.base_width = 4;
        c.model.embed_dim = 16;
        c.model.heads = 2;
        c.model.ffn_hidden = 32;
        c.optim.epochs_phase1 = 1;
        c.optim.epochs_phase2 = 1;
        c.optim.batch_size = 2;
        c.output_dir = output_dir;
        finalize(c);
        const fs::path p = root_ / "config.json";
        save_config(c, p);
        return p;
    }

    std::string q(const fs::path& p) const { return "'" + p.string() + "'"; }

    fs::path root_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("frobnicate").code, 2);
    EXPECT_EQ(cli("eval").code, 2);  // checkpoint is required
    EXPECT_EQ(cli("ablate").code, 2);
    EXPECT_EQ(cli("train --no-such-flag").code, 2);
    EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Cli, BadConfigReportsConfigCategory) {
    std::ofstream(root_ / "bad.json") << R"({"loss": {"qd_reduction": "sum"}})";
    const auto r = cli("train -c " + q(root_ / "bad.json"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("error[config]"), std::string::npos) << r.output;
    std::ofstream(root_ / "broken.json") << "{";
    EXPECT_EQ(cli("gen-data -c " + q(root_ / "broken.json")).code, 2);
}

TEST_F(Cli, MissingFilesReportIoCategory) {
    const auto cfg = write_config((root_ / "o").string());
    const auto r = cli("eval -c " + q(cfg) + " -k " + q(root_ / "none.ckpt"));
    EXPECT_EQ(r.code, 6);
    EXPECT_NE(r.output.find("error[io]"), std::string::npos) << r.output;
    EXPECT_EQ(cli("train -c " + q(root_ / "missing.json")).code, 6);
    EXPECT_EQ(cli("train -c " + q(cfg) + " -m " + q(root_ / "nope.json")).code, 6);
    EXPECT_EQ(cli("report -r " + q(root_ / "run.json") + " -o " + q(root_ / "rep")).code, 6);
}

TEST_F(Cli, UnknownAxisAndMethodAreConfigErrors) {
    const auto cfg = write_config((root_ / "o").string());
    EXPECT_EQ(cli("ablate -c " + q(cfg) + " -a lr_sweep").code, 2);
    EXPECT_EQ(cli("eval -c " + q(cfg) + " -k x.ckpt --methods energy").code, 2);
}

TEST_F(Cli, GenDataHonoursOutputRoot) {
    const auto cfg = write_config("rel/data");
    ::setenv("MAXQUERY_OUTPUT_ROOT", (root_ / "envroot").c_str(), 1);
    const auto r = cli("gen-data -c " + q(cfg));
    ASSERT_EQ(r.code, 0) << r.output;
    const fs::path dir = root_ / "envroot" / "rel" / "data";
    ASSERT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "config.json"));
    const auto m = synth::load_manifest(dir / "manifest.json");
    EXPECT_EQ(m.size(), 7u);
    for (const auto* c : m.all()) {
        EXPECT_TRUE(fs::exists(dir / "volumes" / (c->case_id + ".image.npy")));
        EXPECT_TRUE(fs::exists(dir / "volumes" / (c->case_id + ".label.npy")));
    }
    EXPECT_EQ(load_config(dir / "config.json").name, "cli");

    const auto bare = cli("gen-data -c " + q(cfg) + " --no-volumes -o other");
    ASSERT_EQ(bare.code, 0) << bare.output;
    EXPECT_TRUE(fs::exists(root_ / "envroot" / "other" / "manifest.json"));
    EXPECT_FALSE(fs::exists(root_ / "envroot" / "other" / "volumes"));
}

TEST_F(Cli, TrainEvalReportPipeline) {
    const auto cfg = write_config("pipe");
    ::setenv("MAXQUERY_OUTPUT_ROOT", root_.c_str(), 1);
    const fs::path run = root_ / "pipe";

    const auto tr = cli("train -c " + q(cfg) + " --eval");
    ASSERT_EQ(tr.code, 0) << tr.output;
    EXPECT_NE(tr.output.find("mean_inlier_dice"), std::string::npos);
    const auto rec = harness::load_record(run / "run.json");
    ASSERT_TRUE(fs::exists(rec.checkpoint));
    ASSERT_TRUE(rec.report.has_value());
    EXPECT_EQ(rec.report->methods.size(), 4u);

    const auto ev = cli("eval -c " + q(cfg) + " -k " + q(rec.checkpoint) + " --methods msp -o ev");
    ASSERT_EQ(ev.code, 0) << ev.output;
    const auto single = harness::load_record(root_ / "ev" / "run.json");
    ASSERT_EQ(single.report->methods.size(), 1u);
    EXPECT_EQ(single.report->methods.at("msp").auroc, rec.report->methods.at("msp").auroc);
    EXPECT_TRUE(fs::exists(root_ / "ev" / "report.json"));

    const auto rp = cli("report -r " + q(run / "run.json") + " -r " + q(root_ / "ev" / "run.json") + " -o rep");
    ASSERT_EQ(rp.code, 0) << rp.output;
    std::ifstream in(root_ / "rep" / "summary.tsv");
    int lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, 1 + 4 + 1);
    EXPECT_EQ(std::distance(fs::directory_iterator(root_ / "rep" / "cli" / "montages"), fs::directory_iterator{}), 2);
}

TEST_F(Cli, AblateScoreMethodWritesTable) {
    const auto cfg = write_config((root_ / "o").string());
    const auto r = cli("ablate -c " + q(cfg) + " -a score_method -o " + q(root_ / "ab"));
    ASSERT_EQ(r.code, 0) << r.output;
    std::ifstream in(root_ / "ab" / "table.tsv");
    std::stringstream s;
    s << in.rdbuf();
    EXPECT_NE(r.output.find(s.str()), std::string::npos);
    int lines = 0;
    for (std::string l; std::getline(s, l);) ++lines;
    EXPECT_EQ(lines, 5);
}
