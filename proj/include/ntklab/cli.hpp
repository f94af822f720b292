#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ntklab/attack.hpp"
#include "ntklab/data.hpp"
#include "ntklab/distill.hpp"
#include "ntklab/dynamics.hpp"

namespace ntklab {

struct TaskConfig {
    TaskKind kind = TaskKind::mnist_odd_even;
    int n_per_class = 10;
    int test_per_class = 900;
    std::uint64_t seed = 1;
    bool unit_sphere = false;
    double negative_label = -1.0;
    std::string data_dir = "data";
};

struct ArchConfig {
    int width = 256;
    std::string activation = "relu";
    double temperature = 200.0;
};

struct TrainCmdConfig {
    double lr_per_example = 2e-7;        // eta = N * this
    std::optional<double> learning_rate;  // absolute override
    double momentum = 0.9;
    long max_iters = 1000000;
    double early_stop_loss = 1e-10;  // <= 0 disables
    std::string dynamics = "standard";
    std::uint64_t seed = 42;  // parameter init
    bool fast_linearized = true;
    int loss_history_stride = 100;
};

struct AttackCmdConfig {
    int m = 0;  // 0 means 2N
    long iters = 30000;
    double adam_lr = 0.02;
    double image_init_std = 0.2;
    double dual_init_range = 0.5;
    double temp_start = 10.0;
    double temp_end = 200.0;
    std::string kernel_choice = "final";
    std::optional<int> batch_size;
    std::uint64_t seed = 7;
    std::string precision = "f64";
};

struct DistillCmdConfig {
    int m = 20;
    std::string loss = "rkip";
    std::string kernel = "analytic";
    long iters = 50000;
    double adam_lr = 0.001;
    bool labels_trainable = false;
    std::uint64_t seed = 5;
    std::vector<std::string> methods = {"full", "rkip", "random"};
    std::vector<std::string> eval_modes = {"infinite"};
    int retrain_seeds = 7;
    int retrain_width = 1024;
    long retrain_iters = 30000;
    double retrain_lr_per_example = 6e-6;  // eta = M * this
};

struct SweepCmdConfig {
    std::vector<int> widths = {256, 1024};
    std::vector<int> n_per_class = {10, 50};
    std::vector<std::string> dynamics = {"standard"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    long attack_iters = 3000;
    std::string attack_precision = "f32";
};

struct OnionCmdConfig {
    int n_start = 100;  // per task definition this is the total training count
    int remove_per_iter = 20;
    int iterations = 2;
    bool balanced = true;
    double width_factor = 55.0;
    long train_iters = 10000;
    double train_lr_per_example = 3e-6;
    long attack_iters = 3000;
    std::string attack_precision = "f32";
};

struct ExperimentConfig {
    TaskConfig task;
    ArchConfig arch;
    TrainCmdConfig train;
    AttackCmdConfig attack;
    DistillCmdConfig distill;
    SweepCmdConfig sweep;
    OnionCmdConfig onion;
    std::string out_dir = "out";
    bool deterministic = true;
    std::string profile = "desk";
};

// Profile presets; "desk" is the default scale, "paper" matches the published
// hyperparameters (slow on a workstation).
void apply_profile(ExperimentConfig& cfg, const std::string& profile);

// Strict parse: unknown keys anywhere raise ValidationError naming the key.
ExperimentConfig parse_config_text(const std::string& json_text, const std::string& profile);
ExperimentConfig load_config_file(const std::string& path, const std::string& profile);

std::string canonical_config_string(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

// Stage ledger for resume: every emitted file is listed with its checksum.
class RunManifest {
   public:
    RunManifest(std::string out_dir, std::uint64_t cfg_hash);

    // True if the stage completed under the same config hash and all of its
    // files still match their checksums.
    bool stage_done(const std::string& stage) const;
    void record_stage(const std::string& stage, const std::vector<std::string>& files);

   private:
    std::string path_;
    std::string out_dir_;
    std::uint64_t cfg_hash_;
    struct Stage {
        std::map<std::string, std::uint64_t> files;
    };
    std::map<std::string, Stage> stages_;
    std::uint64_t recorded_hash_ = 0;

    void load();
    void save() const;
};

std::uint64_t file_checksum(const std::string& path);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Task data as consumed by the commands.
struct TaskData {
    LabeledDataset train;
    LabeledDataset test;
    Normalization norm;
};
TaskData load_task(const TaskConfig& cfg);
// Training split only, with an explicit per-class count (sweep/onion cells).
LabeledDataset load_task_train(const TaskConfig& cfg, int n_per_class, std::uint64_t seed);

Architecture make_arch(const ExperimentConfig& cfg, int input_dim, int output_dim);

// Commands. Each returns the list of files it wrote (relative to out_dir).
std::vector<std::string> cmd_train(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_attack(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_onion(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_distill(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_retrain(const ExperimentConfig& cfg, bool resume);
std::vector<std::string> cmd_report(const ExperimentConfig& cfg);

}  // namespace ntklab
