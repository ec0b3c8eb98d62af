// End-to-end tests that spawn the installed command-line binary (path baked
// in at configure time) and assert on exit codes, streams, and artifacts.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "mitl/data.hpp"
#include "test_support.hpp"

using namespace mitl;
using namespace mitl_test;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    const auto bytes = read_bytes(p);
    return std::string(bytes.begin(), bytes.end());
}

CliResult run_cli(const TempDir& tmp, const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const fs::path out_file = tmp.path / ("stdout." + std::to_string(counter));
    const fs::path err_file = tmp.path / ("stderr." + std::to_string(counter));
    ++counter;
    const std::string cmd = env + (env.empty() ? "" : " ") + MITL_BIN_PATH + " " + args + " >" +
                            out_file.string() + " 2>" + err_file.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

// Small enough that a fold trains in well under a second.
std::string tiny_config_args() {
    return "--set data.domains=3 --set data.per_domain=8 --set data.patch_size=16"
           " --set data.atypical_ratio=0.25 --set data.seed=42"
           " --set model.input_size=16 --set model.stem_channels=4"
           " --set model.stage_channels=4,6,8,10 --set model.cls_hidden=8,4 --set model.seed=7"
           " --set train.epochs=1 --set train.batch_size=4 --set train.learning_rate=0.001"
           " --set train.seed=5";
}

} // namespace

TEST_CASE("synth generates a reproducible dataset and validates its arguments") {
    TempDir tmp;
    const std::string base = "synth --domains 3 --per-domain 4 --size 16 --seed 1 --out ";
    const CliResult first = run_cli(tmp, base + (tmp.path / "a").string());
    CHECK(first.exit_code == 0);
    CHECK(first.out.find("wrote 12 samples across 3 domains") != std::string::npos);

    const DatasetManifest manifest = load_manifest(tmp.path / "a" / "manifest.txt");
    CHECK(manifest.samples.size() == 12);
    CHECK(manifest.domains.size() == 3);

    const CliResult second = run_cli(tmp, base + (tmp.path / "b").string());
    CHECK(second.exit_code == 0);
    CHECK(read_bytes(tmp.path / "a" / "manifest.txt") ==
          read_bytes(tmp.path / "b" / "manifest.txt"));
    CHECK(read_bytes(tmp.path / "a" / "images" / "d0_s000.ppm") ==
          read_bytes(tmp.path / "b" / "images" / "d0_s000.ppm"));

    const CliResult bad = run_cli(tmp, "synth --domains 2 --out " + (tmp.path / "c").string());
    CHECK(bad.exit_code != 0);
    CHECK(bad.err.find("mitl: error:") != std::string::npos);
    CHECK(bad.err.find("at least 3 domains") != std::string::npos);
}

TEST_CASE("train writes fold artifacts and honors the fold index and variant") {
    TempDir tmp;
    const std::string out = (tmp.path / "runs").string();
    const std::string common = "train " + tiny_config_args() + " --name t --output-dir " + out;

    const CliResult ok = run_cli(tmp, common + " --fold 1");
    CHECK(ok.exit_code == 0);
    CHECK(ok.out.find("fold 1 (mtl) test=d1") != std::string::npos);
    for (const char* name :
         {"epochs.csv", "best.ckpt", "fold.json", "report.txt", "predictions.csv"}) {
        CHECK_MESSAGE(fs::exists(fs::path(out) / "t" / "fold-1" / "mtl" / name), name);
    }

    const CliResult single = run_cli(tmp, common + " --fold 0 --set train.multitask=off");
    CHECK(single.exit_code == 0);
    CHECK(fs::exists(fs::path(out) / "t" / "fold-0" / "single_task" / "best.ckpt"));

    const CliResult bad = run_cli(tmp, common + " --fold 9");
    CHECK(bad.exit_code != 0);
    CHECK(bad.err.find("mitl: error:") != std::string::npos);
    CHECK(bad.err.find("out of range") != std::string::npos);
}

TEST_CASE("lodo prints the aggregate table and reruns are byte-identical") {
    TempDir tmp;
    const std::string common = "lodo " + tiny_config_args() + " --name l --ablation";

    const CliResult first =
        run_cli(tmp, common + " --output-dir " + (tmp.path / "r1").string());
    CHECK(first.exit_code == 0);
    CHECK(first.out.find("Single task") != std::string::npos);
    CHECK(first.out.find("MTL") != std::string::npos);
    CHECK(first.out.find("config_digest:") != std::string::npos);

    const CliResult second =
        run_cli(tmp, common + " --output-dir " + (tmp.path / "r2").string());
    CHECK(second.exit_code == 0);
    CHECK(read_bytes(tmp.path / "r1" / "l" / "aggregate.txt") ==
          read_bytes(tmp.path / "r2" / "l" / "aggregate.txt"));
    CHECK(read_bytes(tmp.path / "r1" / "l" / "fold-2" / "mtl" / "best.ckpt") ==
          read_bytes(tmp.path / "r2" / "l" / "fold-2" / "mtl" / "best.ckpt"));
    // Stdout matches up to the artifacts line, which names the differing roots.
    const auto table = [](const std::string& s) { return s.substr(0, s.find("artifacts:")); };
    CHECK(table(first.out) == table(second.out));
}

TEST_CASE("eval votes checkpoint ensembles and rejects architecture mismatches") {
    TempDir tmp;
    const std::string runs = (tmp.path / "runs").string();
    REQUIRE(run_cli(tmp, "lodo " + tiny_config_args() + " --name e --output-dir " + runs)
                .exit_code == 0);
    REQUIRE(run_cli(tmp, "synth --domains 3 --per-domain 8 --size 16 --seed 42 --out " +
                             (tmp.path / "data").string())
                .exit_code == 0);
    const std::string manifest = (tmp.path / "data" / "manifest.txt").string();
    const std::string ensemble =
        runs + "/e/fold-0/mtl/best.ckpt " + runs + "/e/fold-1/mtl/best.ckpt " + runs +
        "/e/fold-2/mtl/best.ckpt";

    const CliResult off = run_cli(tmp, "eval --ensemble " + ensemble + " --manifest " + manifest +
                                           " --tta off --out " + (tmp.path / "ev").string());
    CHECK(off.exit_code == 0);
    CHECK(off.out.find("[overall]") != std::string::npos);
    CHECK(off.out.find("tta_views: 1") != std::string::npos);
    const std::string csv = slurp(tmp.path / "ev" / "predictions.csv");
    CHECK(csv.find(",8\n") == std::string::npos);
    CHECK(csv.find(",1\n") != std::string::npos);
    CHECK(fs::exists(tmp.path / "ev" / "report.txt"));

    // Same inputs, more workers: byte-identical artifacts.
    const CliResult jobs3 =
        run_cli(tmp, "eval --ensemble " + ensemble + " --manifest " + manifest +
                         " --tta off --jobs 3 --out " + (tmp.path / "ev3").string());
    CHECK(jobs3.exit_code == 0);
    CHECK(read_bytes(tmp.path / "ev" / "predictions.csv") ==
          read_bytes(tmp.path / "ev3" / "predictions.csv"));
    CHECK(read_bytes(tmp.path / "ev" / "report.txt") ==
          read_bytes(tmp.path / "ev3" / "report.txt"));

    // A checkpoint with different widths cannot join the ensemble.
    REQUIRE(run_cli(tmp, "train " + tiny_config_args() +
                             " --set model.stem_channels=6 --fold 0 --name w --output-dir " +
                             runs)
                .exit_code == 0);
    const CliResult mixed =
        run_cli(tmp, "eval --ensemble " + ensemble + " " + runs + "/w/fold-0/mtl/best.ckpt" +
                         " --manifest " + manifest + " --out " + (tmp.path / "ev4").string());
    CHECK(mixed.exit_code != 0);
    CHECK(mixed.err.find("VersionMismatch") != std::string::npos);

    const CliResult missing =
        run_cli(tmp, "eval --ensemble " + (tmp.path / "nope.ckpt").string() + " --manifest " +
                         manifest + " --out " + (tmp.path / "ev5").string());
    CHECK(missing.exit_code != 0);
    CHECK(missing.err.find("mitl: error:") != std::string::npos);
}

TEST_CASE("the environment variable provides the default output directory") {
    TempDir tmp;
    const std::string env_dir = (tmp.path / "envruns").string();
    const CliResult r = run_cli(tmp, "train " + tiny_config_args() + " --fold 0",
                                "MITL_OUTPUT_DIR=" + env_dir);
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(fs::path(env_dir) / "experiment" / "fold-0" / "mtl" / "best.ckpt"));
}

TEST_CASE("bad invocations fail with the stable error prefix") {
    TempDir tmp;
    const CliResult unknown = run_cli(tmp, "frobnicate");
    CHECK(unknown.exit_code != 0);
    CHECK(unknown.err.find("mitl: error:") != std::string::npos);

    const CliResult bad_key = run_cli(tmp, "lodo --set nope=1");
    CHECK(bad_key.exit_code != 0);
    CHECK(bad_key.err.find("unknown config key 'nope'") != std::string::npos);

    const CliResult bad_cfg = run_cli(tmp, "train --config " + (tmp.path / "none.cfg").string());
    CHECK(bad_cfg.exit_code != 0);
    CHECK(bad_cfg.err.find("mitl: error:") != std::string::npos);

    const CliResult help = run_cli(tmp, "--help");
    CHECK(help.exit_code == 0);
    CHECK(help.out.find("synth") != std::string::npos);
    CHECK(help.out.find("lodo") != std::string::npos);
}
