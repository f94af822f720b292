#include "ntklab/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "ntklab/kernel.hpp"
#include "ntklab/metrics.hpp"
#include "ntklab/nn_batch.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ntklab {

namespace {

// Strict object reader: every key must be consumed, leftovers are errors.
class Scope {
   public:
    Scope(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j_.is_object(), "config: " + path_ + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& target) {
        if (auto it = j_.find(key); it != j_.end()) {
            read(*it, target, key);
        }
        used_.push_back(key);
    }

    bool has(const char* key) {
        used_.push_back(key);
        return j_.contains(key);
    }

    const json& raw(const char* key) {
        used_.push_back(key);
        return j_.at(key);
    }

    ~Scope() noexcept(false) {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(used_.begin(), used_.end(), it.key()) == used_.end())
                throw ValidationError("config: unknown key '" + path_ + it.key() + "'");
        }
    }

   private:
    template <typename T>
    void read(const json& v, T& target, const char* key) {
        try {
            target = v.get<T>();
        } catch (const json::exception&) {
            throw ValidationError("config: bad value for '" + path_ + key + "'");
        }
    }
    void read(const json& v, std::optional<double>& target, const char* key) {
        if (v.is_null())
            target.reset();
        else {
            double d;
            read(v, d, key);
            target = d;
        }
    }
    void read(const json& v, std::optional<int>& target, const char* key) {
        if (v.is_null())
            target.reset();
        else {
            int d;
            read(v, d, key);
            target = d;
        }
    }

    const json& j_;
    std::string path_;
    std::vector<std::string> used_;
};

void parse_task(const json& j, TaskConfig& t) {
    Scope s(j, "task.");
    std::string kind = to_string(t.kind);
    s.get("kind", kind);
    t.kind = task_kind_from_string(kind);
    s.get("n_per_class", t.n_per_class);
    s.get("test_per_class", t.test_per_class);
    s.get("seed", t.seed);
    s.get("unit_sphere", t.unit_sphere);
    s.get("negative_label", t.negative_label);
    s.get("data_dir", t.data_dir);
}

void parse_arch(const json& j, ArchConfig& a) {
    Scope s(j, "arch.");
    s.get("width", a.width);
    s.get("activation", a.activation);
    s.get("temperature", a.temperature);
    require(a.activation == "relu" || a.activation == "softplus",
            "config: arch.activation must be relu or softplus");
}

void parse_train(const json& j, TrainCmdConfig& t) {
    Scope s(j, "train.");
    s.get("lr_per_example", t.lr_per_example);
    s.get("learning_rate", t.learning_rate);
    s.get("momentum", t.momentum);
    s.get("max_iters", t.max_iters);
    s.get("early_stop_loss", t.early_stop_loss);
    s.get("dynamics", t.dynamics);
    s.get("seed", t.seed);
    s.get("fast_linearized", t.fast_linearized);
    s.get("loss_history_stride", t.loss_history_stride);
    require(t.dynamics == "standard" || t.dynamics == "linearized",
            "config: train.dynamics must be standard or linearized");
}

void parse_attack(const json& j, AttackCmdConfig& a) {
    Scope s(j, "attack.");
    s.get("m", a.m);
    s.get("iters", a.iters);
    s.get("adam_lr", a.adam_lr);
    s.get("image_init_std", a.image_init_std);
    s.get("dual_init_range", a.dual_init_range);
    s.get("temperature_start", a.temp_start);
    s.get("temperature_end", a.temp_end);
    s.get("kernel_choice", a.kernel_choice);
    s.get("batch_size", a.batch_size);
    s.get("seed", a.seed);
    s.get("precision", a.precision);
    require(a.kernel_choice == "final" || a.kernel_choice == "initial" ||
                a.kernel_choice == "hybrid",
            "config: attack.kernel_choice must be final, initial or hybrid");
    require(a.precision == "f64" || a.precision == "f32",
            "config: attack.precision must be f64 or f32");
}

void parse_distill(const json& j, DistillCmdConfig& d) {
    Scope s(j, "distill.");
    s.get("m", d.m);
    s.get("loss", d.loss);
    s.get("kernel", d.kernel);
    s.get("iters", d.iters);
    s.get("adam_lr", d.adam_lr);
    s.get("labels_trainable", d.labels_trainable);
    s.get("seed", d.seed);
    s.get("methods", d.methods);
    s.get("eval_modes", d.eval_modes);
    s.get("retrain_seeds", d.retrain_seeds);
    s.get("retrain_width", d.retrain_width);
    s.get("retrain_iters", d.retrain_iters);
    s.get("retrain_lr_per_example", d.retrain_lr_per_example);
    require(d.loss == "kip" || d.loss == "rkip", "config: distill.loss must be kip or rkip");
    require(d.kernel == "analytic" || d.kernel == "empirical",
            "config: distill.kernel must be analytic or empirical");
    for (const auto& m : d.eval_modes)
        require(m == "standard" || m == "linearized" || m == "infinite",
                "config: distill.eval_modes entries must be standard, linearized or infinite");
    for (const auto& m : d.methods)
        require(m == "full" || m == "kip" || m == "rkip" || m == "rkip_finite" || m == "random",
                "config: distill.methods entry '" + m + "' unknown");
}

void parse_sweep(const json& j, SweepCmdConfig& w) {
    Scope s(j, "sweep.");
    s.get("widths", w.widths);
    s.get("n_per_class", w.n_per_class);
    s.get("dynamics", w.dynamics);
    s.get("seeds", w.seeds);
    s.get("attack_iters", w.attack_iters);
    s.get("attack_precision", w.attack_precision);
    for (const auto& d : w.dynamics)
        require(d == "standard" || d == "linearized",
                "config: sweep.dynamics entries must be standard or linearized");
}

void parse_onion(const json& j, OnionCmdConfig& o) {
    Scope s(j, "onion.");
    s.get("n_start", o.n_start);
    s.get("remove_per_iter", o.remove_per_iter);
    s.get("iterations", o.iterations);
    s.get("balanced", o.balanced);
    s.get("width_factor", o.width_factor);
    s.get("train_iters", o.train_iters);
    s.get("train_lr_per_example", o.train_lr_per_example);
    s.get("attack_iters", o.attack_iters);
    s.get("attack_precision", o.attack_precision);
}

}  // namespace

void apply_profile(ExperimentConfig& cfg, const std::string& profile) {
    require(profile == "desk" || profile == "paper", "unknown profile: " + profile);
    cfg.profile = profile;
    if (profile == "desk") {
        // single-workstation scale: 10x the paper learning rate over 30k
        // iterations trades wall-clock for slightly underfit standard runs
        cfg.train.lr_per_example = 2e-6;
        cfg.train.max_iters = 30000;
        cfg.attack.iters = 3000;
        cfg.sweep = SweepCmdConfig{};
        cfg.onion = OnionCmdConfig{};
    } else {
        cfg.train.lr_per_example = 2e-7;
        cfg.train.max_iters = 1000000;
        cfg.attack.iters = 80000;
        cfg.attack.precision = "f64";
        cfg.sweep.widths = {256, 512, 1024, 2048, 4096};
        cfg.sweep.n_per_class = {10, 25, 50, 100, 150, 250};
        cfg.sweep.seeds = {1, 2, 3};
        cfg.sweep.attack_iters = 80000;
        cfg.sweep.attack_precision = "f64";
        cfg.onion.n_start = 900;
        cfg.onion.iterations = 40;
        cfg.onion.train_iters = 100000;
        cfg.onion.attack_iters = 30000;
        cfg.onion.attack_precision = "f64";
    }
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& profile) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    apply_profile(cfg, profile);
    Scope s(j, "");
    if (s.has("task")) parse_task(s.raw("task"), cfg.task);
    if (s.has("arch")) parse_arch(s.raw("arch"), cfg.arch);
    if (s.has("train")) parse_train(s.raw("train"), cfg.train);
    if (s.has("attack")) parse_attack(s.raw("attack"), cfg.attack);
    if (s.has("distill")) parse_distill(s.raw("distill"), cfg.distill);
    if (s.has("sweep")) parse_sweep(s.raw("sweep"), cfg.sweep);
    if (s.has("onion")) parse_onion(s.raw("onion"), cfg.onion);
    s.get("out_dir", cfg.out_dir);
    s.get("deterministic", cfg.deterministic);
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path, const std::string& profile) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), profile);
}

std::string canonical_config_string(const ExperimentConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "task{" << to_string(c.task.kind) << ',' << c.task.n_per_class << ','
       << c.task.test_per_class << ',' << c.task.seed << ',' << c.task.unit_sphere << ','
       << c.task.negative_label << ',' << c.task.data_dir << "}";
    os << "arch{" << c.arch.width << ',' << c.arch.activation << ',' << c.arch.temperature << "}";
    os << "train{" << c.train.lr_per_example << ','
       << (c.train.learning_rate ? *c.train.learning_rate : -1.0) << ',' << c.train.momentum << ','
       << c.train.max_iters << ',' << c.train.early_stop_loss << ',' << c.train.dynamics << ','
       << c.train.seed << ',' << c.train.fast_linearized << ',' << c.train.loss_history_stride
       << "}";
    os << "attack{" << c.attack.m << ',' << c.attack.iters << ',' << c.attack.adam_lr << ','
       << c.attack.image_init_std << ',' << c.attack.dual_init_range << ',' << c.attack.temp_start
       << ',' << c.attack.temp_end << ',' << c.attack.kernel_choice << ','
       << (c.attack.batch_size ? *c.attack.batch_size : -1) << ',' << c.attack.seed << ','
       << c.attack.precision << "}";
    os << "distill{" << c.distill.m << ',' << c.distill.loss << ',' << c.distill.kernel << ','
       << c.distill.iters << ',' << c.distill.adam_lr << ',' << c.distill.labels_trainable << ','
       << c.distill.seed << ',' << c.distill.retrain_seeds << ',' << c.distill.retrain_width << ','
       << c.distill.retrain_iters << ',' << c.distill.retrain_lr_per_example << ",[";
    for (const auto& m : c.distill.methods) os << m << ';';
    os << "],[";
    for (const auto& m : c.distill.eval_modes) os << m << ';';
    os << "]}";
    os << "sweep{[";
    for (int w : c.sweep.widths) os << w << ';';
    os << "],[";
    for (int n : c.sweep.n_per_class) os << n << ';';
    os << "],[";
    for (const auto& d : c.sweep.dynamics) os << d << ';';
    os << "],[";
    for (auto sd : c.sweep.seeds) os << sd << ';';
    os << "]," << c.sweep.attack_iters << ',' << c.sweep.attack_precision << "}";
    os << "onion{" << c.onion.n_start << ',' << c.onion.remove_per_iter << ','
       << c.onion.iterations << ',' << c.onion.balanced << ',' << c.onion.width_factor << ','
       << c.onion.train_iters << ',' << c.onion.train_lr_per_example << ',' << c.onion.attack_iters
       << ',' << c.onion.attack_precision << "}";
    os << "out{" << c.out_dir << ',' << c.deterministic << "}";
    return os.str();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    return fnv1a64(canonical_config_string(cfg));
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("checksum: cannot open " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(buf.data(), buf.size());
}

RunManifest::RunManifest(std::string out_dir, std::uint64_t cfg_hash)
    : path_(out_dir + "/manifest.json"), out_dir_(std::move(out_dir)), cfg_hash_(cfg_hash) {
    load();
}

void RunManifest::load() {
    std::ifstream f(path_);
    if (!f) return;
    json j;
    try {
        f >> j;
    } catch (const json::exception&) {
        return;  // unreadable manifest: treat as no prior progress
    }
    recorded_hash_ = std::stoull(j.value("config_hash", "0"));
    if (j.contains("stages"))
        for (auto it = j["stages"].begin(); it != j["stages"].end(); ++it) {
            Stage st;
            for (auto fit = it.value().begin(); fit != it.value().end(); ++fit)
                st.files[fit.key()] = std::stoull(fit.value().get<std::string>());
            stages_[it.key()] = st;
        }
}

void RunManifest::save() const {
    json j;
    j["config_hash"] = std::to_string(cfg_hash_);
    for (const auto& [name, st] : stages_) {
        json files = json::object();
        for (const auto& [file, sum] : st.files) files[file] = std::to_string(sum);
        j["stages"][name] = files;
    }
    std::ofstream f(path_);
    f << j.dump(2) << '\n';
}

bool RunManifest::stage_done(const std::string& stage) const {
    if (recorded_hash_ != cfg_hash_) return false;
    auto it = stages_.find(stage);
    if (it == stages_.end()) return false;
    for (const auto& [file, sum] : it->second.files) {
        const std::string full = out_dir_ + "/" + file;
        if (!fs::exists(full)) return false;
        try {
            if (file_checksum(full) != sum) return false;
        } catch (const ValidationError&) {
            return false;
        }
    }
    return true;
}

void RunManifest::record_stage(const std::string& stage, const std::vector<std::string>& files) {
    Stage st;
    for (const auto& f : files) st.files[f] = file_checksum(out_dir_ + "/" + f);
    stages_[stage] = st;
    recorded_hash_ = cfg_hash_;
    save();
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size() && a.size() >= 2, "spearman: need two equal-length samples");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    require(da > 0 && db > 0, "spearman: constant sample");
    return num / std::sqrt(da * db);
}

namespace {

bool task_is_mnist(TaskKind k) { return k == TaskKind::mnist_odd_even || k == TaskKind::mnist_10; }

RawDataset load_raw_split(const TaskConfig& cfg, bool train_split) {
    if (task_is_mnist(cfg.kind)) {
        const std::string base = cfg.data_dir + "/mnist/";
        const std::string img =
            base + (train_split ? "train-images-idx3-ubyte.gz" : "t10k-images-idx3-ubyte.gz");
        const std::string lbl =
            base + (train_split ? "train-labels-idx1-ubyte.gz" : "t10k-labels-idx1-ubyte.gz");
        if (!fs::exists(img) && fs::exists(base + (train_split ? "train-images-idx3-ubyte"
                                                               : "t10k-images-idx3-ubyte")))
            return load_mnist(base + (train_split ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte"),
                              base + (train_split ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte"));
        return load_mnist(img, lbl);
    }
    const std::string base = cfg.data_dir + "/cifar10/";
    std::vector<std::string> paths;
    if (train_split) {
        for (int b = 1; b <= 5; ++b) {
            const std::string p = base + "data_batch_" + std::to_string(b) + ".bin";
            if (fs::exists(p)) paths.push_back(p);
        }
    } else if (fs::exists(base + "test_batch.bin")) {
        paths.push_back(base + "test_batch.bin");
    }
    if (paths.empty())
        throw ValidationError("CIFAR-10 binaries not found under " + base +
                              " (see scripts/fetch_cifar10.sh)");
    return load_cifar10(paths);
}

int mix_seed(std::uint64_t base, const std::string& salt) {
    return static_cast<int>(fnv1a64(salt) ^ base);
}

std::uint64_t mix_seed64(std::uint64_t base, const std::string& salt) {
    return fnv1a64(salt) ^ (base * 0x9e3779b97f4a7c15ull);
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

TrainConfig train_config_for(const ExperimentConfig& cfg, int n) {
    TrainConfig tc;
    tc.learning_rate = cfg.train.learning_rate ? *cfg.train.learning_rate
                                               : cfg.train.lr_per_example * static_cast<double>(n);
    tc.momentum = cfg.train.momentum;
    tc.max_iters = cfg.train.max_iters;
    if (cfg.train.early_stop_loss > 0)
        tc.early_stop_loss = cfg.train.early_stop_loss;
    else
        tc.early_stop_loss.reset();
    tc.dynamics = cfg.train.dynamics == "linearized" ? DynamicsMode::linearized
                                                     : DynamicsMode::standard;
    tc.seed = cfg.train.seed;
    tc.fast_linearized = cfg.train.fast_linearized;
    tc.loss_history_stride = cfg.train.loss_history_stride;
    return tc;
}

AttackConfig attack_config_for(const ExperimentConfig& cfg, int n) {
    AttackConfig ac;
    ac.m = cfg.attack.m > 0 ? cfg.attack.m : 2 * n;
    ac.iters = cfg.attack.iters;
    ac.adam_lr = cfg.attack.adam_lr;
    ac.image_init_std = cfg.attack.image_init_std;
    ac.dual_init_lo = -cfg.attack.dual_init_range;
    ac.dual_init_hi = cfg.attack.dual_init_range;
    ac.temp_start = cfg.attack.temp_start;
    ac.temp_end = cfg.attack.temp_end;
    ac.kernel_choice = cfg.attack.kernel_choice == "initial"
                           ? KernelChoice::initial_params
                           : (cfg.attack.kernel_choice == "hybrid" ? KernelChoice::hybrid
                                                                   : KernelChoice::final_params);
    ac.batch_size = cfg.attack.batch_size;
    ac.seed = cfg.attack.seed;
    ac.precision = cfg.attack.precision == "f32" ? Precision::f32 : Precision::f64;
    return ac;
}

void save_loss_history_csv(const std::string& path, const TrainResult& tr) {
    std::ofstream f(path);
    if (!f) throw ValidationError("cannot open " + path);
    f << "iter,mean_loss\n";
    f.precision(12);
    for (const auto& [it, loss] : tr.loss_history) f << it << ',' << loss << '\n';
}

struct CellResult {
    double kernel_distance = 0.0;
    double mean_error = 0.0;
    std::string status = "ok";
};

// train + attack + measure for one sweep cell
CellResult run_cell(const ExperimentConfig& cfg, int width, int n_per_class,
                    const std::string& dynamics, std::uint64_t seed, const std::string& cell_dir) {
    CellResult out;
    ensure_dir(cell_dir);
    // data split depends only on (n, seed): widths share splits per seed
    LabeledDataset train_set = load_task_train(cfg.task, n_per_class, seed);
    ExperimentConfig cell_cfg = cfg;
    cell_cfg.arch.width = width;
    cell_cfg.train.dynamics = dynamics;
    Architecture arch = make_arch(cell_cfg, train_set.dim(), train_set.classes());
    const int n = train_set.n();

    TrainConfig tc = train_config_for(cell_cfg, n);
    tc.seed = mix_seed64(seed, "init|w=" + std::to_string(width));
    Vec theta0 = init_params(arch, tc.seed);
    TrainResult tr = train(arch, theta0, train_set, tc);

    if (dynamics == "linearized") {
        // the training kernel is frozen at theta0 by construction
        out.kernel_distance = 0.0;
    } else {
        Mat K0 = empirical_ntk(arch, theta0, train_set.images, train_set.images);
        Mat Kf = empirical_ntk(arch, tr.theta_final, train_set.images, train_set.images);
        out.kernel_distance = kernel_distance(K0, Kf);
    }

    AttackConfig ac = attack_config_for(cell_cfg, n);
    ac.iters = cfg.sweep.attack_iters;
    ac.precision = cfg.sweep.attack_precision == "f32" ? Precision::f32 : Precision::f64;
    ac.seed = mix_seed64(seed, "attack|w=" + std::to_string(width) + "|" + dynamics);
    AttackTargets targets;
    targets.delta_theta = tr.theta_final - tr.theta0;
    targets.theta_final = tr.theta_final;
    targets.theta_initial = tr.theta0;
    AttackTrace trace = run_attack(arch, targets, ac);
    if (trace.aborted_nonfinite) {
        out.status = "failed: non-finite attack loss";
        return out;
    }
    ReconstructionCurve curve = greedy_pair(train_set.images, trace.best.images);
    out.mean_error = mean_recon_error(curve);
    save_curve_csv(cell_dir + "/curve.csv", curve, {"normalization=" + train_set.normalization});
    return out;
}

}  // namespace

TaskData load_task(const TaskConfig& cfg) {
    RawDataset train_raw = load_raw_split(cfg, true);
    RawDataset test_raw = load_raw_split(cfg, false);
    TaskData td;
    td.norm = default_normalization(train_raw);
    td.norm.unit_sphere = cfg.unit_sphere;
    TaskSpec spec;
    spec.kind = cfg.kind;
    spec.n_per_class = cfg.n_per_class;
    spec.seed = cfg.seed;
    spec.unit_sphere = cfg.unit_sphere;
    spec.negative_label = cfg.negative_label;
    td.train = make_task(train_raw, spec, td.norm);
    TaskSpec tspec = spec;
    tspec.n_per_class = cfg.test_per_class;
    tspec.seed = mix_seed64(cfg.seed, "test-split");
    td.test = make_task(test_raw, tspec, td.norm);
    return td;
}

LabeledDataset load_task_train(const TaskConfig& cfg, int n_per_class, std::uint64_t seed) {
    RawDataset train_raw = load_raw_split(cfg, true);
    Normalization norm = default_normalization(train_raw);
    norm.unit_sphere = cfg.unit_sphere;
    TaskSpec spec;
    spec.kind = cfg.kind;
    spec.n_per_class = n_per_class;
    spec.seed = seed;
    spec.unit_sphere = cfg.unit_sphere;
    spec.negative_label = cfg.negative_label;
    return make_task(train_raw, spec, norm);
}

Architecture make_arch(const ExperimentConfig& cfg, int input_dim, int output_dim) {
    Architecture a;
    a.input_dim = input_dim;
    a.hidden_width = cfg.arch.width;
    a.output_dim = output_dim;
    a.activation = cfg.arch.activation == "softplus" ? Activation::softplus : Activation::relu;
    a.temperature = cfg.arch.temperature;
    a.validate();
    return a;
}

std::vector<std::string> cmd_train(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    const std::vector<std::string> files = {"checkpoint.bin", "train_set.bin", "test_set.bin",
                                            "loss_history.csv"};
    if (resume && manifest.stage_done("train")) {
        std::cout << "train: up to date, skipping\n";
        return files;
    }
    TaskData td = load_task(cfg.task);
    Architecture arch = make_arch(cfg, td.train.dim(), td.train.classes());
    TrainConfig tc = train_config_for(cfg, td.train.n());
    Vec theta0 = init_params(arch, tc.seed);
    std::cout << "train: n=" << td.train.n() << " width=" << arch.hidden_width << " dynamics="
              << cfg.train.dynamics << " lr=" << tc.learning_rate << "\n";
    TrainResult tr = train(arch, theta0, td.train, tc);
    std::cout << "train: stopped at iter " << tr.stopped_at_iter << " loss " << tr.final_loss
              << "\n";
    save_checkpoint(cfg.out_dir + "/checkpoint.bin", {arch, tr.theta0, tr.theta_final});
    save_dataset_cache(cfg.out_dir + "/train_set.bin", td.train);
    save_dataset_cache(cfg.out_dir + "/test_set.bin", td.test);
    save_loss_history_csv(cfg.out_dir + "/loss_history.csv", tr);
    manifest.record_stage("train", files);
    return files;
}

std::vector<std::string> cmd_attack(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    if (resume && manifest.stage_done("attack")) {
        std::cout << "attack: up to date, skipping\n";
        return {"recon_trace.csv", "recon_set.bin"};
    }
    require(fs::exists(cfg.out_dir + "/checkpoint.bin"),
            "attack: no checkpoint in " + cfg.out_dir + " (run train first)");
    Checkpoint ck = load_checkpoint(cfg.out_dir + "/checkpoint.bin");
    LabeledDataset train_set = load_dataset_cache(cfg.out_dir + "/train_set.bin");

    AttackConfig ac = attack_config_for(cfg, train_set.n());
    std::vector<std::string> files = {"recon_trace.csv", "recon_set.bin", "recon_images.pnm"};
    const bool full_recovery = ac.m >= train_set.n();  // m < n is the distillation-style attack
    if (full_recovery) {
        files.push_back("curve.csv");
        files.push_back("alpha_table.csv");
        files.push_back("train_images.pnm");
    }
    AttackTargets targets;
    targets.delta_theta = ck.theta_final - ck.theta0;
    targets.theta_final = ck.theta_final;
    targets.theta_initial = ck.theta0;
    std::cout << "attack: m=" << ac.m << " iters=" << ac.iters << "\n";
    AttackTrace trace = ac.batch_size ? run_attack_batched(ck.arch, targets, ac)
                                      : run_attack(ck.arch, targets, ac);
    if (trace.aborted_nonfinite) throw NumericalError("attack: non-finite loss, trace saved");
    std::cout << "attack: best loss " << trace.best_loss << " at iter " << trace.best_iter << "\n";

    save_trace_csv(cfg.out_dir + "/recon_trace.csv", trace, ac);

    // reconstruction set on disk: images with the duals in the label slot
    DistilledSet recon;
    recon.images = trace.best.images;
    recon.labels = trace.best.duals;
    recon.loss_type = "attack_recon";
    recon.kernel_type = cfg.attack.kernel_choice;
    recon.seed = ac.seed;
    recon.normalization = train_set.normalization;
    save_distilled(cfg.out_dir + "/recon_set.bin", recon);

    Normalization norm;  // descriptor-recorded values are what matter for export
    std::sscanf(train_set.normalization.c_str(), "scale=%lf,shift=%lf", &norm.scale, &norm.shift);
    export_grid(trace.best.images, 10, norm, cfg.out_dir + "/recon_images.pnm");

    if (full_recovery) {
        ReconstructionCurve curve = greedy_pair(train_set.images, trace.best.images);
        save_curve_csv(cfg.out_dir + "/curve.csv", curve,
                       {"normalization=" + train_set.normalization});

        // |alpha| scatter against the initial kernel
        Mat K0 = empirical_ntk(ck.arch, ck.theta0, train_set.images, train_set.images);
        Mat f0(train_set.n(), train_set.classes());
        {
            const ParamLayout L = ParamLayout::of(ck.arch);
            NetView<double> net(L, ck.theta0.data());
            Mat Xc = train_set.images.transpose();
            ForwardPass<double> fp;
            forward_batch<double>(L, net, Act::of(ck.arch), Xc, fp, false);
            f0 = fp.F.transpose();
        }
        Mat alpha = solve_alpha(K0, Mat(train_set.labels - f0), RidgePolicy::standard());
        save_alpha_table_csv(cfg.out_dir + "/alpha_table.csv", alpha_error_table(curve, alpha),
                             {"normalization=" + train_set.normalization,
                              "ridge=" + RidgePolicy::standard().describe()});
        export_grid(train_set.images, 10, norm, cfg.out_dir + "/train_images.pnm");
    }
    manifest.record_stage("attack", files);
    return files;
}

std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    const std::vector<std::string> files = {"sweep_results.csv"};
    if (resume && manifest.stage_done("sweep")) {
        std::cout << "sweep: up to date, skipping\n";
        return files;
    }
    require(!cfg.sweep.widths.empty() && !cfg.sweep.n_per_class.empty() &&
                !cfg.sweep.dynamics.empty() && !cfg.sweep.seeds.empty(),
            "sweep: empty axis");
    std::ofstream f(cfg.out_dir + "/sweep_results.csv");
    f << "width,n_train,dynamics,seed,kernel_distance,mean_recon_error,status\n";
    f.precision(12);
    for (int width : cfg.sweep.widths)
        for (int npc : cfg.sweep.n_per_class)
            for (const auto& dyn : cfg.sweep.dynamics)
                for (std::uint64_t seed : cfg.sweep.seeds) {
                    const std::string cell = cfg.out_dir + "/cells/w" + std::to_string(width) +
                                             "_n" + std::to_string(npc) + "_" + dyn + "_s" +
                                             std::to_string(seed);
                    CellResult r;
                    try {
                        r = run_cell(cfg, width, npc, dyn, seed, cell);
                    } catch (const std::exception& e) {
                        r.status = std::string("failed: ") + e.what();
                    }
                    const int n_train = npc * (task_is_binary(cfg.task.kind) ? 2 : 10);
                    f << width << ',' << n_train << ',' << dyn << ',' << seed << ','
                      << r.kernel_distance << ',' << r.mean_error << ',' << '"' << r.status << '"'
                      << '\n';
                    f.flush();
                    std::cout << "sweep cell w=" << width << " n=" << n_train << " " << dyn
                              << " seed=" << seed << ": kd=" << r.kernel_distance
                              << " err=" << r.mean_error << " (" << r.status << ")\n";
                }
    f.close();
    manifest.record_stage("sweep", files);
    return files;
}

std::vector<std::string> cmd_onion(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    const std::vector<std::string> files = {"onion_recon.csv", "onion_random.csv"};
    if (resume && manifest.stage_done("onion")) {
        std::cout << "onion: up to date, skipping\n";
        return files;
    }
    const int classes = task_is_binary(cfg.task.kind) ? 2 : 10;
    require(cfg.onion.n_start % classes == 0, "onion: n_start must divide evenly across classes");
    require(cfg.onion.n_start >= cfg.onion.remove_per_iter * 1, "onion: n_start below removal budget");

    TaskConfig tcfg = cfg.task;
    tcfg.n_per_class = cfg.onion.n_start / classes;
    TaskData td;
    {
        ExperimentConfig tmp = cfg;
        tmp.task = tcfg;
        td = load_task(tmp.task);
    }

    for (const std::string arm : {"recon", "random"}) {
        LabeledDataset current = td.train;
        std::ofstream f(cfg.out_dir + "/onion_" + arm + ".csv");
        f << "iter,n_train,width,test_accuracy,removed\n";
        f.precision(10);
        for (int it = 0; it < cfg.onion.iterations; ++it) {
            const int n = current.n();
            if (n < cfg.onion.remove_per_iter) break;
            const int width =
                static_cast<int>(std::lround(cfg.onion.width_factor * std::sqrt(double(n))));
            ExperimentConfig cell = cfg;
            cell.arch.width = width;
            Architecture arch = make_arch(cell, current.dim(), current.classes());
            TrainConfig tc = train_config_for(cell, n);
            tc.learning_rate = cfg.onion.train_lr_per_example * n;
            tc.max_iters = cfg.onion.train_iters;
            tc.seed = mix_seed64(cfg.train.seed, "onion|" + std::to_string(it));
            Vec theta0 = init_params(arch, tc.seed);
            TrainResult tr = train(arch, theta0, current, tc);
            const double acc = model_accuracy(arch, tr.theta_final, td.test);

            if (arm == "recon") {
                AttackConfig ac = attack_config_for(cell, n);
                ac.iters = cfg.onion.attack_iters;
                ac.precision =
                    cfg.onion.attack_precision == "f32" ? Precision::f32 : Precision::f64;
                ac.seed = mix_seed64(cfg.attack.seed, "onion|" + std::to_string(it));
                AttackTargets targets;
                targets.delta_theta = tr.theta_final - tr.theta0;
                targets.theta_final = tr.theta_final;
                targets.theta_initial = tr.theta0;
                AttackTrace trace = run_attack(arch, targets, ac);
                ReconstructionCurve curve = greedy_pair(current.images, trace.best.images);
                current = prune_most_reconstructed(curve, current, cfg.onion.remove_per_iter,
                                                   cfg.onion.balanced);
            } else {
                current = prune_random(current, cfg.onion.remove_per_iter, cfg.onion.balanced,
                                       mix_seed64(cfg.task.seed, "onion-rand|" + std::to_string(it)));
            }
            f << it << ',' << n << ',' << width << ',' << acc << ',' << cfg.onion.remove_per_iter
              << '\n';
            std::cout << "onion[" << arm << "] iter " << it << ": n=" << n << " width=" << width
                      << " acc=" << acc << "\n";
        }
    }
    manifest.record_stage("onion", files);
    return files;
}

namespace {

DistilledSet make_method_set(const ExperimentConfig& cfg, const std::string& method,
                             const TaskData& td) {
    if (method == "full") {
        DistilledSet ds;
        ds.images = td.train.images;
        ds.labels = td.train.labels;
        ds.loss_type = "full";
        ds.kernel_type = "-";
        ds.normalization = td.train.normalization;
        return ds;
    }
    if (method == "rkip" || method == "kip") {
        DistillConfig dc;
        dc.m = cfg.distill.m;
        dc.loss = method == "kip" ? DistillLoss::kip : DistillLoss::rkip;
        dc.iters = cfg.distill.iters;
        dc.adam_lr = cfg.distill.adam_lr;
        dc.labels_trainable = cfg.distill.labels_trainable;
        dc.seed = cfg.distill.seed;
        DistillKernel kern = DistillKernel::analytic();
        if (cfg.distill.kernel == "empirical") {
            ExperimentConfig tmp = cfg;
            Architecture arch = make_arch(tmp, td.train.dim(), td.train.classes());
            kern = DistillKernel::empirical(arch, init_params(arch, cfg.train.seed));
        }
        return distill(td.train, dc, kern);
    }
    if (method == "rkip_finite") {
        // consumes the attack stage: reconstruction images + duals
        const std::string recon_path = cfg.out_dir + "/recon_set.bin";
        require(fs::exists(recon_path),
                "distill: method rkip_finite needs " + recon_path + " (run attack with m=" +
                    std::to_string(cfg.distill.m) + " first)");
        DistilledSet recon = load_distilled(recon_path);
        require(recon.loss_type == "attack_recon", "distill: " + recon_path + " is not an attack output");
        Checkpoint ck = load_checkpoint(cfg.out_dir + "/checkpoint.bin");
        Mat K_RR = empirical_ntk(ck.arch, ck.theta0, recon.images, recon.images);
        DistilledSet ds;
        ds.images = recon.images;
        ds.labels = rkip_finite_labels(K_RR, recon.labels);
        ds.loss_type = "rkip_finite";
        ds.kernel_type = "empirical";
        ds.seed = recon.seed;
        ds.normalization = recon.normalization;
        return ds;
    }
    throw ValidationError("distill: method '" + method + "' has no distilled artifact");
}

}  // namespace

std::vector<std::string> cmd_distill(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    std::vector<std::string> files;
    for (const auto& m : cfg.distill.methods)
        if (m != "random") files.push_back("distilled_" + m + ".bin");
    if (resume && manifest.stage_done("distill")) {
        std::cout << "distill: up to date, skipping\n";
        return files;
    }
    TaskData td = load_task(cfg.task);
    for (const auto& method : cfg.distill.methods) {
        if (method == "random") continue;  // drawn per retrain seed
        std::cout << "distill: method " << method << "\n";
        DistilledSet ds = make_method_set(cfg, method, td);
        save_distilled(cfg.out_dir + "/distilled_" + method + ".bin", ds);
    }
    manifest.record_stage("distill", files);
    return files;
}

std::vector<std::string> cmd_retrain(const ExperimentConfig& cfg, bool resume) {
    ensure_dir(cfg.out_dir);
    RunManifest manifest(cfg.out_dir, config_hash(cfg));
    const std::vector<std::string> files = {"table.csv"};
    if (resume && manifest.stage_done("retrain")) {
        std::cout << "retrain: up to date, skipping\n";
        return files;
    }
    TaskData td = load_task(cfg.task);
    RawDataset train_raw = load_raw_split(cfg.task, true);
    Normalization norm = default_normalization(train_raw);
    norm.unit_sphere = cfg.task.unit_sphere;

    std::ofstream f(cfg.out_dir + "/table.csv");
    f << "method,eval_mode,mean_acc,std_acc,n_seeds\n";
    f.precision(10);
    for (const auto& method : cfg.distill.methods) {
        for (const auto& mode_name : cfg.distill.eval_modes) {
            const EvalMode mode = mode_name == "infinite"
                                      ? EvalMode::infinite
                                      : (mode_name == "linearized" ? EvalMode::finite_linearized
                                                                   : EvalMode::finite_standard);
            std::vector<double> accs;
            for (int s = 0; s < cfg.distill.retrain_seeds; ++s) {
                DistilledSet ds;
                if (method == "random") {
                    TaskSpec spec;
                    spec.kind = cfg.task.kind;
                    const int classes = task_is_binary(cfg.task.kind) ? 2 : 10;
                    spec.n_per_class = cfg.distill.m / classes;
                    spec.seed = mix_seed64(cfg.distill.seed, "random-subset|" + std::to_string(s));
                    spec.unit_sphere = cfg.task.unit_sphere;
                    spec.negative_label = cfg.task.negative_label;
                    LabeledDataset sub = make_task(train_raw, spec, norm);
                    ds.images = sub.images;
                    ds.labels = sub.labels;
                    ds.loss_type = "random";
                } else {
                    ds = load_distilled(cfg.out_dir + "/distilled_" + method + ".bin");
                }
                RetrainConfig rc;
                rc.arch.input_dim = static_cast<int>(ds.images.cols());
                rc.arch.hidden_width = cfg.distill.retrain_width;
                rc.arch.output_dim = static_cast<int>(ds.labels.cols());
                rc.arch.activation = Activation::relu;
                rc.train.learning_rate = cfg.distill.retrain_lr_per_example * ds.m();
                rc.train.max_iters = cfg.distill.retrain_iters;
                rc.train.early_stop_loss = 1e-10;
                rc.init_seed = mix_seed64(cfg.distill.seed, "retrain|" + std::to_string(s));
                accs.push_back(retrain_eval(ds, mode, rc, td.test));
            }
            double mean = 0;
            for (double a : accs) mean += a;
            mean /= static_cast<double>(accs.size());
            double var = 0;
            for (double a : accs) var += (a - mean) * (a - mean);
            const double stdev =
                accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
            f << method << ',' << mode_name << ',' << mean << ',' << stdev << ',' << accs.size()
              << '\n';
            f.flush();
            std::cout << "retrain: " << method << "/" << mode_name << " = " << mean * 100 << " +- "
                      << stdev * 100 << " (n=" << accs.size() << ")\n";
        }
    }
    f.close();
    manifest.record_stage("retrain", files);
    return files;
}

std::vector<std::string> cmd_report(const ExperimentConfig& cfg) {
    std::ostringstream rep;
    rep.precision(6);
    const std::string sweep_path = cfg.out_dir + "/sweep_results.csv";
    if (fs::exists(sweep_path)) {
        std::ifstream f(sweep_path);
        std::string line;
        std::getline(f, line);
        std::vector<double> kd, err;
        int linearized_cells = 0;
        double max_lin_kd = 0.0;
        while (std::getline(f, line)) {
            std::stringstream ss(line);
            std::string width, n, dyn, seed, kds, errs, status;
            std::getline(ss, width, ',');
            std::getline(ss, n, ',');
            std::getline(ss, dyn, ',');
            std::getline(ss, seed, ',');
            std::getline(ss, kds, ',');
            std::getline(ss, errs, ',');
            std::getline(ss, status, ',');
            if (status.find("ok") == std::string::npos) continue;
            if (dyn == "standard") {
                kd.push_back(std::stod(kds));
                err.push_back(std::stod(errs));
            } else {
                ++linearized_cells;
                max_lin_kd = std::max(max_lin_kd, std::stod(kds));
            }
        }
        rep << "sweep: " << kd.size() << " standard cells";
        if (kd.size() >= 2) rep << ", spearman(kernel_distance, mean_error) = " << spearman(kd, err);
        rep << "\n";
        if (linearized_cells > 0)
            rep << "sweep: " << linearized_cells << " linearized cells, max kernel distance "
                << max_lin_kd << "\n";
    }
    const std::string table_path = cfg.out_dir + "/table.csv";
    if (fs::exists(table_path)) {
        std::ifstream f(table_path);
        rep << "distillation table (" << table_path << "):\n" << f.rdbuf();
    }
    for (const std::string arm : {"recon", "random"}) {
        const std::string p = cfg.out_dir + "/onion_" + arm + ".csv";
        if (fs::exists(p)) {
            std::ifstream f(p);
            rep << "onion[" << arm << "]:\n" << f.rdbuf();
        }
    }
    if (rep.str().empty()) rep << "nothing to report in " << cfg.out_dir << "\n";
    std::cout << rep.str();
    std::ofstream out(cfg.out_dir + "/report.txt");
    out << rep.str();
    return {"report.txt"};
}

}  // namespace ntklab
