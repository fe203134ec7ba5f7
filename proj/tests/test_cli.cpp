#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <sstream>

#include "brainstr/explain.hpp"
#include "brainstr/io.hpp"
#include "test_util.hpp"

using namespace brainstr;
using brainstr::testing::TempDir;

namespace {

struct RunResult {
    int code;
    std::string output; // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + BRAINSTR_CLI_PATH + "\" " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {-1, "popen failed"};
    std::string out;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

const fs::path kSmoke = fs::path(BRAINSTR_SOURCE_DIR) / "configs" / "smoke.json";

// Smaller synthetic dataset for the commands that do not need the reference one.
fs::path write_small_config(const fs::path& dir) {
    Json j = read_json(kSmoke);
    j["synth"] = {{"n_rois", 6}, {"n_timepoints", 200}, {"min_phase_len", 50}, {"n_per_class", 4},
                  {"discriminative_block", {{0, 1}, {1, 2}}}};
    j["train"]["app"]["window"] = 10;
    write_json(dir / "small.json", j);
    return dir / "small.json";
}

} // namespace

TEST(Cli, SynthWritesTwiceNPerClassAndIsDeterministic) {
    TempDir d("cli_synth");
    const fs::path cfg = write_small_config(d.path());
    const auto a = run_cli("synth --config " + q(cfg) + " --out " + q(d.path() / "a"));
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(run_cli("synth --config " + q(cfg) + " --out " + q(d.path() / "b")).code, 0);
    const auto data = read_dataset(d.path() / "a");
    EXPECT_EQ(data.size(), 8u);
    for (const auto& r : data) {
        EXPECT_EQ(read_text(d.path() / "a" / "subjects" / (r.subject_id + ".csv")),
                  read_text(d.path() / "b" / "subjects" / (r.subject_id + ".csv")));
    }
    EXPECT_EQ(read_text(d.path() / "a" / "manifest.json"), read_text(d.path() / "b" / "manifest.json"));
    const auto c = run_cli("synth --config " + q(cfg) + " --seed 99 --out " + q(d.path() / "c"));
    ASSERT_EQ(c.code, 0);
    EXPECT_NE(read_text(d.path() / "a" / "subjects" / "sub-000.csv"), read_text(d.path() / "c" / "subjects" / "sub-000.csv"));
}

TEST(Cli, BadConfigKeyExitsOneAndNamesTheKey) {
    TempDir d("cli_badkey");
    write_text(d.path() / "bad.json", R"({"train": {"main_epoch": 3}})");
    const auto r = run_cli("synth --config " + q(d.path() / "bad.json") + " --out " + q(d.path() / "x"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("main_epoch"), std::string::npos) << r.output;
    EXPECT_EQ(run_cli("frobnicate").code, 1);
    EXPECT_EQ(run_cli("synth").code, 1); // --out is required
}

TEST(Cli, MissingSubjectFileFailsBeforeTraining) {
    TempDir d("cli_missing");
    const fs::path cfg = write_small_config(d.path());
    ASSERT_EQ(run_cli("synth --config " + q(cfg) + " --out " + q(d.path() / "data")).code, 0);
    fs::remove(d.path() / "data" / "subjects" / "sub-005.csv");
    const auto r = run_cli("train --config " + q(cfg) + " --data " + q(d.path() / "data") + " --out " + q(d.path() / "run"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("sub-005.csv"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(d.path() / "run" / "eval_report.json"));
}

// Trains once on the reference dataset, then drives eval and explain from the checkpoint.
TEST(Cli, SmokeTrainEvalExplainRoundTrip) {
    TempDir d("cli_smoke");
    ASSERT_EQ(run_cli("synth --out " + q(d.path() / "data")).code, 0);
    const auto t0 = std::chrono::steady_clock::now();
    const auto tr = run_cli("train --config " + q(kSmoke) + " --data " + q(d.path() / "data") + " --out " + q(d.path() / "run"));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ASSERT_EQ(tr.code, 0) << tr.output;
    EXPECT_LT(secs, 60.0);
    std::cout << "[ smoke    ] train took " << secs << " s\n";

    const fs::path run = d.path() / "run";
    const EvalReport rep = eval_report_from_json(read_json(run / "eval_report.json"), "report");
    EXPECT_TRUE(rep.leakage_checks_passed);
    EXPECT_EQ(rep.folds.size(), 2u);
    EXPECT_NO_THROW(parse_run_config(read_json(run / "config.json")));
    EXPECT_NO_THROW(load_checkpoint(run / "checkpoint.json"));
    EXPECT_NO_THROW(app_from_json(read_json(run / "app.json")));
    EXPECT_NO_THROW(model_from_json(read_json(run / "model.json")));
    for (const auto& e : fs::recursive_directory_iterator(run / "curves"))
        if (e.is_regular_file()) {
            EXPECT_FALSE(parse_curves_csv(read_text(e.path()), e.path().string()).empty()) << e.path();
        }

    const auto ev = run_cli("eval --checkpoint " + q(run / "checkpoint.json") + " --data " + q(d.path() / "data") + " --out " +
                            q(d.path() / "eval"));
    ASSERT_EQ(ev.code, 0) << ev.output;
    const Json pred = read_json(d.path() / "eval" / "predictions.json");
    EXPECT_EQ(pred["subjects"].size(), 50u);
    EXPECT_TRUE(pred.contains("metrics"));

    write_json(d.path() / "map.json", Json{{"left", {0, 1, 2, 3, 4, 5, 6, 7}}, {"right", {8, 9, 10, 11, 12, 13, 14, 15}}});
    const auto ex = run_cli("explain --checkpoint " + q(run / "checkpoint.json") + " --data " + q(d.path() / "data") +
                            " --subnet-map " + q(d.path() / "map.json") + " --out " + q(d.path() / "explain"));
    ASSERT_EQ(ex.code, 0) << ex.output;
    int records = 0;
    for (const auto& e : fs::directory_iterator(d.path() / "explain" / "records")) {
        const Json j = read_json(e.path());
        EXPECT_NO_THROW(validate_record_json(j, e.path().string()));
        EXPECT_EQ(j["subnetwork_pairs"].size(), 3u);
        ++records;
    }
    EXPECT_EQ(records, 50);
    EXPECT_NO_THROW(parse_group_edges_csv(read_text(d.path() / "explain" / "group_important.csv"), 16, "group"));

    write_json(d.path() / "short_map.json", Json{{"left", {0, 1, 2}}});
    const auto bad = run_cli("explain --checkpoint " + q(run / "checkpoint.json") + " --data " + q(d.path() / "data") +
                             " --subnet-map " + q(d.path() / "short_map.json") + " --out " + q(d.path() / "explain2"));
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.output.find("unmapped"), std::string::npos) << bad.output;
}

TEST(Cli, EvalRejectsAnIncompatibleDataset) {
    TempDir d("cli_incompat");
    const fs::path cfg = write_small_config(d.path());
    ASSERT_EQ(run_cli("synth --config " + q(cfg) + " --out " + q(d.path() / "small")).code, 0);
    // an untrained N=16 checkpoint against an N=6 dataset
    ModelConfig mc;
    mc.set_n_rois(16);
    AppArchitecture a;
    save_checkpoint(d.path() / "ck.json", Checkpoint{AppModel(a, 1), BrainStrModel(mc, 1), 0.1, 5, 1});
    const auto r = run_cli("eval --checkpoint " + q(d.path() / "ck.json") + " --data " + q(d.path() / "small") + " --out " +
                           q(d.path() / "e"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("N=6"), std::string::npos) << r.output;
}

TEST(Cli, GradcheckReportsOneLinePerTerm) {
    const auto ok = run_cli("gradcheck");
    EXPECT_EQ(ok.code, 0) << ok.output;
    std::istringstream in(ok.output);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        EXPECT_NE(line.find("max_rel_error"), std::string::npos) << line;
        EXPECT_EQ(line.find("FAIL"), std::string::npos) << line;
    }
    EXPECT_GE(lines, 11);

    const auto bad = run_cli("gradcheck --corrupt usl");
    EXPECT_EQ(bad.code, 1);
    bool flagged = false;
    std::istringstream in2(bad.output);
    while (std::getline(in2, line))
        if (line.rfind("usl", 0) == 0) flagged = line.find("FAIL") != std::string::npos;
    EXPECT_TRUE(flagged) << bad.output;
}
