#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mitl/checkpoint.hpp"
#include "mitl/experiment.hpp"
#include "mitl/rng.hpp"
#include "test_support.hpp"

using namespace mitl;
using namespace mitl_test;
namespace fs = std::filesystem;

namespace {

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(bool(out));
    out << text;
}

// Small enough that LODO over three domains trains in seconds.
ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.name = "exp";
    cfg.data.synth.domains = 3;
    cfg.data.synth.per_domain = 8;
    cfg.data.synth.atypical_ratio = 0.25;
    cfg.data.synth.patch_size = 16;
    cfg.data.seed = 42;
    cfg.model.input_size = 16;
    cfg.model.stem_channels = 4;
    cfg.model.stage_channels = {4, 6, 8, 10};
    cfg.model.cls_hidden = {8, 4};
    cfg.model.seed = 7;
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.train.batch_size = 4;
    cfg.train.seed = 5;
    return cfg;
}

} // namespace

TEST_CASE("config files parse sections, comments, and whitespace") {
    TempDir tmp;
    const std::string path = tmp.file("run.cfg");
    write_text_file(path,
                    "# experiment definition\n"
                    "name = shifted\n"
                    "output_dir=out\n"
                    "\n"
                    "data.domains = 5   # five scanners\n"
                    "data.atypical_ratio=0.3\n"
                    "model.stage_channels = 8, 16, 32, 64\n"
                    "model.cls_hidden=24,12\n"
                    "train.learning_rate = 4e-05\n"
                    "train.multitask=off\n"
                    "aug.enable_stain = false\n"
                    "loss.coefficients=1,0.5,0.25\n"
                    "inference.tta=on\n"
                    "jobs=2\n"
                    "ablation=true\n");
    const ExperimentConfig cfg = load_experiment_config(path);
    CHECK(cfg.name == "shifted");
    CHECK(cfg.output_dir == "out");
    CHECK(cfg.data.synth.domains == 5);
    CHECK(cfg.data.synth.atypical_ratio == 0.3);
    CHECK(cfg.model.stage_channels == std::array<int, 4>{8, 16, 32, 64});
    CHECK(cfg.model.cls_hidden == std::array<int, 2>{24, 12});
    CHECK(cfg.train.learning_rate == 4e-05);
    CHECK(cfg.train.multitask == false);
    CHECK(cfg.aug.enable_stain == false);
    CHECK(cfg.loss.coefficients == std::array<double, 3>{1.0, 0.5, 0.25});
    CHECK(cfg.tta == true);
    CHECK(cfg.jobs == 2);
    CHECK(cfg.ablation == true);
    // Untouched keys keep their defaults.
    CHECK(cfg.model.input_size == 64);
    CHECK(cfg.train.epochs == 50);
}

TEST_CASE("canonical serialization round-trips through the parser") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.learning_rate = 4e-5;
    cfg.loss.coefficients = {1.0, 0.75, 0.3};
    cfg.data.manifest = "some/dir/manifest.txt";

    TempDir tmp;
    const std::string path = tmp.file("echo.cfg");
    write_text_file(path, to_key_values(cfg));
    const ExperimentConfig back = load_experiment_config(path);

    CHECK(to_key_values(back) == to_key_values(cfg));
    CHECK(config_digest(back) == config_digest(cfg));
    CHECK(back.model == cfg.model);
    CHECK(back.train.learning_rate == cfg.train.learning_rate);
    CHECK(back.data.manifest == cfg.data.manifest);
}

TEST_CASE("overrides apply on top of the file and reject bad input") {
    ExperimentConfig cfg = tiny_experiment();
    apply_override(cfg, "train.epochs=9");
    CHECK(cfg.train.epochs == 9);
    apply_override(cfg, " inference.tta = off ");
    CHECK(cfg.tta == false);
    apply_override(cfg, "model.stage_channels=2,4,6,8");
    CHECK(cfg.model.stage_channels == std::array<int, 4>{2, 4, 6, 8});

    CHECK_ERROR(apply_override(cfg, "nonsense.key=1"), SchemaViolation);
    CHECK_ERROR(apply_override(cfg, "train.epochs"), SchemaViolation);
    CHECK_ERROR(apply_override(cfg, "train.epochs=abc"), SchemaViolation);
    CHECK_ERROR(apply_override(cfg, "train.multitask=maybe"), SchemaViolation);
    CHECK_ERROR(apply_override(cfg, "model.stage_channels=1,2,3"), SchemaViolation);

    TempDir tmp;
    const std::string path = tmp.file("bad.cfg");
    write_text_file(path, "train.epochs 9\n");
    CHECK_ERROR(load_experiment_config(path), SchemaViolation);
    CHECK_ERROR(load_experiment_config(tmp.file("missing.cfg")), MissingFile);
}

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("config digest tracks substance but not run placement") {
    ExperimentConfig cfg = tiny_experiment();
    const std::string base = config_digest(cfg);
    CHECK(base.size() == 16);
    CHECK(base.find_first_not_of("0123456789abcdef") == std::string::npos);

    ExperimentConfig moved = cfg;
    moved.name = "elsewhere";
    moved.output_dir = "/tmp/other";
    moved.jobs = 8;
    CHECK(config_digest(moved) == base);

    ExperimentConfig reseeded = cfg;
    reseeded.train.seed += 1;
    CHECK(config_digest(reseeded) != base);
    ExperimentConfig wider = cfg;
    wider.model.stem_channels += 1;
    CHECK(config_digest(wider) != base);
}

TEST_CASE("open_store generates synthetic data or reads a manifest") {
    ExperimentConfig cfg = tiny_experiment();
    const SampleStore synthetic = open_store(cfg.data);
    CHECK(synthetic.size() == 24);
    CHECK(synthetic.manifest().domains.size() == 3);

    TempDir tmp;
    const DatasetManifest generated = generate_synthetic(cfg.data.synth, cfg.data.seed);
    const DatasetManifest materialized = materialize(generated, tmp.path);
    save_manifest(materialized, tmp.path / "manifest.txt");

    DataConfig from_disk;
    from_disk.manifest = (tmp.path / "manifest.txt").string();
    const SampleStore loaded = open_store(from_disk);
    REQUIRE(loaded.size() == synthetic.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded.desc(i).id == synthetic.desc(i).id);
        CHECK(loaded.desc(i).domain == synthetic.desc(i).domain);
        CHECK(loaded.desc(i).label == synthetic.desc(i).label);
    }
}

TEST_CASE("experiment validation rejects out-of-range settings") {
    auto expect_invalid = [](auto mutate) {
        ExperimentConfig cfg = tiny_experiment();
        mutate(cfg);
        CHECK_ERROR(cfg.validate(), InvalidConfig);
    };
    expect_invalid([](ExperimentConfig& c) { c.jobs = 0; });
    expect_invalid([](ExperimentConfig& c) { c.name = ""; });
    expect_invalid([](ExperimentConfig& c) { c.name = "a/b"; });
    expect_invalid([](ExperimentConfig& c) { c.loss.eps_prob = 0.6; });
    expect_invalid([](ExperimentConfig& c) { c.aug.sigma_alpha = -0.1; });
    expect_invalid([](ExperimentConfig& c) { c.loss.coefficients[1] = -1.0; });
    expect_invalid([](ExperimentConfig& c) { c.data.synth.atypical_ratio = 1.5; });
    expect_invalid([](ExperimentConfig& c) { c.train.epochs = 0; });
    expect_invalid([](ExperimentConfig& c) { c.model.input_size = 12; });

    ExperimentConfig ok = tiny_experiment();
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("run_single_fold writes a complete, reproducible fold directory") {
    const ExperimentConfig cfg = tiny_experiment();
    const SampleStore store = open_store(cfg.data);
    const auto folds = plan_lodo_folds(store.manifest().domains);

    TempDir tmp;
    const std::string dir = tmp.file("fold0");
    const FoldOutcome outcome = run_single_fold(store, folds[0], 0, cfg, true, dir);

    for (const char* name :
         {"epochs.csv", "best.ckpt", "fold.json", "report.txt", "predictions.csv"}) {
        CHECK_MESSAGE(fs::exists(fs::path(dir) / name), name);
    }
    CHECK(outcome.multitask);
    CHECK(outcome.best_epoch >= 1);
    CHECK(outcome.test_balanced_accuracy >= 0.0);
    CHECK(outcome.test_balanced_accuracy <= 1.0);

    // The checkpoint reloads and carries the fold-derived seed.
    const MultiTaskNet net = load_checkpoint((fs::path(dir) / "best.ckpt").string());
    ModelConfig expected = cfg.model;
    expected.seed = mix_seed(cfg.model.seed, 101, 0);
    CHECK(net.config() == expected);

    // Same inputs, second directory: byte-identical artifacts.
    const std::string again = tmp.file("fold0-again");
    const FoldOutcome repeat = run_single_fold(store, folds[0], 0, cfg, true, again);
    CHECK(repeat.test_balanced_accuracy == outcome.test_balanced_accuracy);
    for (const char* name :
         {"epochs.csv", "best.ckpt", "fold.json", "report.txt", "predictions.csv"}) {
        CHECK_MESSAGE(read_bytes((fs::path(dir) / name).string()) ==
                          read_bytes((fs::path(again) / name).string()),
                      name);
    }
}

TEST_CASE("run_lodo lays out fold directories and the aggregate table") {
    TempDir tmp;
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 1;
    cfg.output_dir = tmp.file("runs");

    const LodoOutcome outcome = run_lodo(cfg);
    CHECK(outcome.mtl.size() == 3);
    CHECK(outcome.single_task.empty());
    CHECK(outcome.digest == config_digest(cfg));

    const fs::path root = fs::path(cfg.output_dir) / "exp";
    for (int k = 0; k < 3; ++k) {
        CHECK(fs::exists(root / ("fold-" + std::to_string(k)) / "mtl" / "best.ckpt"));
        CHECK_FALSE(fs::exists(root / ("fold-" + std::to_string(k)) / "single_task"));
    }
    const auto aggregate = read_bytes((root / "aggregate.txt").string());
    const std::string text(aggregate.begin(), aggregate.end());
    CHECK(text.find("MTL") != std::string::npos);
    CHECK(text.find("Single task") == std::string::npos);
    CHECK(text.find("config_digest: " + outcome.digest) != std::string::npos);
    CHECK(text.find("\n0  d0  ") != std::string::npos);
    CHECK(text.find("\n2  d2  ") != std::string::npos);

    const auto echoed = read_bytes((root / "config.txt").string());
    CHECK(std::string(echoed.begin(), echoed.end()) == to_key_values(cfg));

    // Every fold holds out a distinct test domain.
    CHECK(outcome.mtl[0].fold.test_domain == "d0");
    CHECK(outcome.mtl[1].fold.test_domain == "d1");
    CHECK(outcome.mtl[2].fold.test_domain == "d2");
}

TEST_CASE("ablation trains paired single-task and multitask variants") {
    TempDir tmp;
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 1;
    cfg.ablation = true;
    cfg.output_dir = tmp.file("runs");

    const LodoOutcome outcome = run_lodo(cfg);
    REQUIRE(outcome.mtl.size() == 3);
    REQUIRE(outcome.single_task.size() == 3);

    const fs::path root = fs::path(cfg.output_dir) / "exp";
    const auto aggregate = read_bytes((root / "aggregate.txt").string());
    const std::string text(aggregate.begin(), aggregate.end());
    CHECK(text.find("Single task  ") != std::string::npos);
    CHECK(text.find("MTL  ") != std::string::npos);

    // The summary rows carry the recomputed means.
    double mtl_sum = 0.0;
    for (const auto& o : outcome.mtl) mtl_sum += o.test_balanced_accuracy;
    CHECK(outcome.mtl_mean == doctest::Approx(mtl_sum / 3.0).epsilon(1e-15));

    // Paired comparison: both variants of a fold start from the same weights.
    const MultiTaskNet mtl = load_checkpoint((root / "fold-1" / "mtl" / "best.ckpt").string());
    const MultiTaskNet single =
        load_checkpoint((root / "fold-1" / "single_task" / "best.ckpt").string());
    CHECK(mtl.config() == single.config());
}

TEST_CASE("rerunning a lodo experiment reproduces every byte") {
    TempDir tmp;
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 1;

    cfg.output_dir = tmp.file("first");
    run_lodo(cfg);
    cfg.output_dir = tmp.file("second");
    run_lodo(cfg);

    // config.txt is excluded: it echoes output_dir, which differs by design.
    for (const char* rel : {"aggregate.txt", "fold-1/mtl/best.ckpt", "fold-1/mtl/report.txt",
                            "fold-1/mtl/epochs.csv", "fold-1/mtl/predictions.csv",
                            "fold-1/mtl/fold.json"}) {
        const auto a = read_bytes((fs::path(tmp.file("first")) / "exp" / rel).string());
        const auto b = read_bytes((fs::path(tmp.file("second")) / "exp" / rel).string());
        CHECK_MESSAGE(a == b, rel);
    }
}
