#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ntklab/cli.hpp"

using namespace ntklab;
namespace fs = std::filesystem;

namespace {

bool has_mnist() { return fs::exists("data/mnist/train-images-idx3-ubyte.gz"); }

ExperimentConfig tiny_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    apply_profile(cfg, "desk");
    cfg.task.n_per_class = 4;
    cfg.task.test_per_class = 50;
    cfg.task.seed = 11;
    cfg.arch.width = 16;
    cfg.train.max_iters = 200;
    cfg.train.lr_per_example = 2e-6;
    cfg.train.early_stop_loss = 1e-12;
    cfg.attack.iters = 200;
    cfg.attack.seed = 5;
    cfg.sweep.widths = {8, 16};
    cfg.sweep.n_per_class = {2, 4};
    cfg.sweep.seeds = {1};
    cfg.sweep.attack_iters = 100;
    cfg.onion.n_start = 16;
    cfg.onion.remove_per_iter = 4;
    cfg.onion.iterations = 2;
    cfg.onion.train_iters = 100;
    cfg.onion.attack_iters = 100;
    cfg.distill.m = 4;
    cfg.distill.iters = 30;
    cfg.distill.retrain_seeds = 2;
    cfg.distill.retrain_width = 16;
    cfg.distill.retrain_iters = 100;
    cfg.distill.methods = {"full", "rkip", "random"};
    cfg.out_dir = out_dir;
    return cfg;
}

}  // namespace

TEST_CASE("config parsing: profiles, overrides, unknown keys") {
    ExperimentConfig desk = parse_config_text("{}", "desk");
    CHECK(desk.train.max_iters == 30000);
    ExperimentConfig paper = parse_config_text("{}", "paper");
    CHECK(paper.train.max_iters == 1000000);
    CHECK(paper.train.lr_per_example == doctest::Approx(2e-7));
    CHECK(paper.attack.iters == 80000);

    ExperimentConfig c = parse_config_text(
        R"({"task": {"kind": "mnist_10", "n_per_class": 3}, "arch": {"width": 64},
            "train": {"dynamics": "linearized"}, "out_dir": "x"})",
        "desk");
    CHECK(c.task.kind == TaskKind::mnist_10);
    CHECK(c.task.n_per_class == 3);
    CHECK(c.arch.width == 64);
    CHECK(c.train.dynamics == "linearized");
    CHECK(c.out_dir == "x");

    CHECK_THROWS_WITH_AS(parse_config_text(R"({"task": {"n_per_clas": 3}})", "desk"),
                         doctest::Contains("unknown key 'task.n_per_clas'"), ValidationError);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"wat": 1})", "desk"),
                         doctest::Contains("unknown key 'wat'"), ValidationError);
    CHECK_THROWS_AS(parse_config_text(R"({"train": {"dynamics": "warp"}})", "desk"),
                    ValidationError);
    CHECK_THROWS_AS(parse_config_text("not json", "desk"), ValidationError);

    // hash is stable and sensitive
    CHECK(config_hash(desk) == config_hash(parse_config_text("{}", "desk")));
    CHECK(config_hash(desk) != config_hash(c));
}

TEST_CASE("spearman rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(std::abs(spearman({1, 2, 3, 4, 5, 6}, {3, 1, 4, 1.5, 5, 2})) < 1.0);
    CHECK_THROWS_AS(spearman({1, 1}, {1, 2}), ValidationError);
}

TEST_CASE("train/attack pipeline with manifest resume") {
    if (!has_mnist()) {
        MESSAGE("data/mnist not present; skipping");
        return;
    }
    const std::string out = "test_cli_out";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_config(out);

    cmd_train(cfg, false);
    CHECK(fs::exists(out + "/checkpoint.bin"));
    CHECK(fs::exists(out + "/train_set.bin"));
    CHECK(fs::exists(out + "/loss_history.csv"));

    RunManifest manifest(out, config_hash(cfg));
    CHECK(manifest.stage_done("train"));
    CHECK(!manifest.stage_done("attack"));

    cmd_attack(cfg, false);
    CHECK(fs::exists(out + "/curve.csv"));
    CHECK(fs::exists(out + "/recon_trace.csv"));
    CHECK(fs::exists(out + "/recon_set.bin"));
    CHECK(fs::exists(out + "/alpha_table.csv"));

    // curve has exactly N rows
    std::ifstream f(out + "/curve.csv");
    std::string line;
    int rows = 0, data_rows = 0;
    while (std::getline(f, line)) {
        ++rows;
        if (!line.empty() && line[0] != '#' && line.find("rank") != 0) ++data_rows;
    }
    CHECK(data_rows == 8);  // n_per_class 4, binary task

    // resume skips; changing the config invalidates the stage
    const auto t0 = fs::last_write_time(out + "/checkpoint.bin");
    cmd_train(cfg, true);
    CHECK(fs::last_write_time(out + "/checkpoint.bin") == t0);
    ExperimentConfig cfg2 = cfg;
    cfg2.train.max_iters += 1;
    RunManifest manifest2(out, config_hash(cfg2));
    CHECK(!manifest2.stage_done("train"));

    // determinism: identical seeds give identical curve files
    const std::string out2 = "test_cli_out2";
    fs::remove_all(out2);
    ExperimentConfig cfgb = cfg;
    cfgb.out_dir = out2;
    cmd_train(cfgb, false);
    cmd_attack(cfgb, false);
    CHECK(file_checksum(out + "/curve.csv") == file_checksum(out2 + "/curve.csv"));
    fs::remove_all(out2);

    cmd_report(cfg);
    fs::remove_all(out);
}

TEST_CASE("attack without checkpoint is a validation error") {
    ExperimentConfig cfg = tiny_config("test_cli_nockpt");
    fs::remove_all(cfg.out_dir);
    CHECK_THROWS_WITH_AS(cmd_attack(cfg, false), doctest::Contains("run train first"),
                         ValidationError);
    fs::remove_all(cfg.out_dir);
}

TEST_CASE("sweep: grid rows, linearized kernel distance, failure rows survive") {
    if (!has_mnist()) {
        MESSAGE("data/mnist not present; skipping");
        return;
    }
    const std::string out = "test_cli_sweep";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_config(out);
    cfg.sweep.dynamics = {"standard", "linearized"};
    cmd_sweep(cfg, false);

    std::ifstream f(out + "/sweep_results.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "width,n_train,dynamics,seed,kernel_distance,mean_recon_error,status");
    int rows = 0, lin_ok = 0;
    while (std::getline(f, line)) {
        ++rows;
        if (line.find("linearized") != std::string::npos) {
            std::stringstream ss(line);
            std::string tok;
            for (int i = 0; i < 5; ++i) std::getline(ss, tok, ',');
            CHECK(std::stod(tok) <= 1e-10);
            ++lin_ok;
        }
    }
    CHECK(rows == 2 * 2 * 2);  // widths x n x dynamics, one seed
    CHECK(lin_ok == 4);
    fs::remove_all(out);
}

TEST_CASE("onion: two iterations, width rule, balanced removal") {
    if (!has_mnist()) {
        MESSAGE("data/mnist not present; skipping");
        return;
    }
    const std::string out = "test_cli_onion";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_config(out);
    cmd_onion(cfg, false);

    for (const std::string arm : {"recon", "random"}) {
        std::ifstream f(out + "/onion_" + arm + ".csv");
        std::string line;
        std::getline(f, line);
        CHECK(line == "iter,n_train,width,test_accuracy,removed");
        std::vector<std::vector<double>> rows;
        while (std::getline(f, line)) {
            std::stringstream ss(line);
            std::vector<double> vals;
            std::string tok;
            while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
            rows.push_back(vals);
        }
        REQUIRE(rows.size() == 2);
        CHECK(rows[0][1] == 16);
        CHECK(rows[1][1] == 12);  // removed 4
        CHECK(rows[0][2] == std::lround(55.0 * std::sqrt(16.0)));
        CHECK(rows[1][2] == std::lround(55.0 * std::sqrt(12.0)));
        CHECK(rows[0][4] == 4);
    }
    fs::remove_all(out);
}

TEST_CASE("distill + retrain: table schema and rkip-finite wiring") {
    if (!has_mnist()) {
        MESSAGE("data/mnist not present; skipping");
        return;
    }
    const std::string out = "test_cli_distill";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_config(out);
    cfg.attack.m = cfg.distill.m;  // attack output feeds rkip_finite
    cfg.distill.methods = {"full", "rkip", "rkip_finite", "random"};
    cmd_train(cfg, false);
    cmd_attack(cfg, false);
    cmd_distill(cfg, false);
    CHECK(fs::exists(out + "/distilled_full.bin"));
    CHECK(fs::exists(out + "/distilled_rkip.bin"));
    CHECK(fs::exists(out + "/distilled_rkip_finite.bin"));

    DistilledSet rf = load_distilled(out + "/distilled_rkip_finite.bin");
    CHECK(rf.m() == cfg.distill.m);
    CHECK(rf.loss_type == "rkip_finite");

    cmd_retrain(cfg, false);
    std::ifstream f(out + "/table.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "method,eval_mode,mean_acc,std_acc,n_seeds");
    int rows = 0;
    while (std::getline(f, line)) {
        ++rows;
        std::stringstream ss(line);
        std::string method, mode, mean, stddev, n;
        std::getline(ss, method, ',');
        std::getline(ss, mode, ',');
        std::getline(ss, mean, ',');
        std::getline(ss, stddev, ',');
        std::getline(ss, n, ',');
        CHECK(n == "2");
        CHECK(std::stod(mean) >= 0.0);
        CHECK(std::stod(mean) <= 1.0);
    }
    CHECK(rows == 4);  // four methods, one eval mode
    fs::remove_all(out);
}
