#pragma once

#include <optional>
#include <vector>

#include "ntklab/common.hpp"
#include "ntklab/nn.hpp"

namespace ntklab {

// Which tangent space explains delta_theta: the trained parameters, the
// initialization, or both with separate dual banks.
enum class KernelChoice { final_params, initial_params, hybrid };

enum class Precision { f64, f32 };

struct ReconstructionSet {
    Mat images;         // M x d
    Mat duals;          // M x C; final-parameter bank (the only one unless hybrid)
    Mat duals_initial;  // M x C in hybrid mode, otherwise empty

    int m() const { return static_cast<int>(images.rows()); }
};

struct AttackConfig {
    int m = 0;  // reconstruction count; drivers default this to 2N
    long iters = 80000;
    double adam_lr = 0.02;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double image_init_std = 0.2;
    double dual_init_lo = -0.5;
    double dual_init_hi = 0.5;
    double temp_start = 10.0;
    double temp_end = 200.0;
    KernelChoice kernel_choice = KernelChoice::final_params;
    std::optional<int> batch_size;  // batched driver only
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;
    long audit_stride = 0;  // batched driver: verify the gradient buffer every k iters

    void validate() const;
};

struct AttackTargets {
    Vec delta_theta;
    Vec theta_final;    // needed for final_params / hybrid
    Vec theta_initial;  // needed for initial_params / hybrid
};

struct AttackTrace {
    std::vector<double> loss_history;  // loss at the parameters entering each step
    ReconstructionSet final_set;
    ReconstructionSet best;  // lowest-loss snapshot over the run
    double best_loss = 0.0;
    long best_iter = 0;
    double final_loss = 0.0;
    bool aborted_nonfinite = false;
    double buffer_audit_max_rel_err = 0.0;  // batched driver with audit_stride > 0
};

// Linear softplus-temperature anneal over the run.
double temperature_at(long iter, const AttackConfig& cfg);

struct ReconLossResult {
    double loss;
    Mat grad_images;         // M x d
    Mat grad_duals;          // M x C
    Mat grad_duals_initial;  // hybrid only
};

// L = | delta_theta - sum_c sum_j alpha_jc grad f_c(x_j) |^2 evaluated in the
// tangent space(s) selected by `choice`, plus its gradients with respect to
// the images and the dual banks. arch must use softplus.
ReconLossResult recon_loss(const Architecture& arch, const AttackTargets& targets,
                           const ReconstructionSet& recon, double temperature,
                           KernelChoice choice);

// Standard attack: Adam on (X_R, alpha_R) with the annealed softplus
// temperature. Deterministic in cfg.seed.
AttackTrace run_attack(const Architecture& arch, const AttackTargets& targets,
                       const AttackConfig& cfg);

// Buffered-gradient variant: keeps G_R = sum_j alpha_j^T grad f(x_j), samples
// a uniform batch each step, optimizes only its members and patches G_R by
// subtract-old/add-new. With batch_size == M it reproduces run_attack
// step-for-step.
AttackTrace run_attack_batched(const Architecture& arch, const AttackTargets& targets,
                               const AttackConfig& cfg);

void save_trace_csv(const std::string& path, const AttackTrace& trace, const AttackConfig& cfg);

}  // namespace ntklab
