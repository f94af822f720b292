#pragma once

#include <cstdint>
#include <string>

#include "ntklab/common.hpp"
#include "ntklab/dynamics.hpp"
#include "ntklab/kernel.hpp"

namespace ntklab {

struct DistilledSet {
    Mat images;  // M x d
    Mat labels;  // M x C, not constrained to encoded values
    bool labels_trainable = false;
    std::string loss_type;    // "kip" | "rkip" | "rkip_finite" | "random" | "full"
    std::string kernel_type;  // "analytic" | "empirical"
    std::uint64_t seed = 0;
    std::string normalization;

    int m() const { return static_cast<int>(images.rows()); }
};

struct KipLossResult {
    double loss;
    Mat dK_TS;  // entry partials, N x M
    Mat dK_SS;  // entry partials (unsymmetrized), M x M
    Mat dy_S;   // M x C
};

// L = 1/2 | y_T - K_TS K_SS^{-1} y_S |^2 with entry-level gradients for the
// kernel chain rule. The ridge shift is treated as constant in the gradients.
KipLossResult kip_loss(const Mat& K_TS, const Mat& K_SS, const Mat& y_T, const Mat& y_S,
                       const RidgePolicy& ridge);

struct RkipLossResult {
    double total;
    double label_term;     // | y_T - K_TR K_RR^{-1} y_R |^2 in the K_TT^{-1} norm
    double variance_term;  // y_R^T K_RR^{-1} (K_RR - K_RT K_TT^{-1} K_TR) K_RR^{-1} y_R
    Mat dK_TR;             // N x M
    Mat dK_RR;             // M x M
    Mat dy_R;              // M x C
};

// Reconstruction loss in Gram form: alpha^T K_TT alpha - 2 alpha^T K_TR
// alpha_R + alpha_R^T K_RR alpha_R with alpha = K_TT^{-1} y_T and alpha_R =
// K_RR^{-1} y_R; total = label_term + variance_term exactly.
RkipLossResult rkip_loss(const Mat& K_TT, const Mat& K_TR, const Mat& K_RR, const Mat& y_T,
                         const Mat& y_R, const RidgePolicy& ridge);

enum class DistillLoss { kip, rkip };

struct DistillKernel {
    enum class Kind { analytic, empirical };
    Kind kind = Kind::analytic;
    // empirical kernels evaluate parameter-gradient inner products of this net
    Architecture arch;
    Vec params;

    static DistillKernel analytic() { return {}; }
    static DistillKernel empirical(const Architecture& a, const Vec& p) {
        DistillKernel k;
        k.kind = Kind::empirical;
        k.arch = a;
        k.params = p;
        return k;
    }
};

struct DistillConfig {
    int m = 20;
    DistillLoss loss = DistillLoss::rkip;
    long iters = 50000;
    double adam_lr = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double image_init_std = 0.2;
    bool labels_trainable = false;
    bool init_images_from_train = false;  // take the first m train images instead of noise
    std::uint64_t seed = 0;
    RidgePolicy ridge = RidgePolicy::standard();
    int log_stride = 1000;
};

// Loss and gradients with respect to the distilled images/labels through the
// chosen kernel backend; this is exactly one optimizer step's work.
struct DistillEval {
    double loss;
    double label_term = 0.0;     // rkip only
    double variance_term = 0.0;  // rkip only
    Mat grad_images;             // M x d
    Mat grad_labels;             // M x C
};
DistillEval eval_distill_loss(const LabeledDataset& train, const Mat& S_images, const Mat& S_labels,
                              DistillLoss loss, const DistillKernel& kernel,
                              const RidgePolicy& ridge);

// Adam optimization of the distilled images (and labels when trainable).
DistilledSet distill(const LabeledDataset& train, const DistillConfig& cfg,
                     const DistillKernel& kernel);

// Retraining labels from a finite network's attack output: y_R = K_RR alpha_R.
Mat rkip_finite_labels(const Mat& K_RR, const Mat& alpha_R);

enum class EvalMode { finite_standard, finite_linearized, infinite };

struct RetrainConfig {
    Architecture arch;  // evaluation network for the finite modes
    TrainConfig train;
    std::uint64_t init_seed = 0;
    RidgePolicy ridge = RidgePolicy::standard();
};

// Accuracy of a model trained on the distilled set: finite modes train a
// fresh network, infinite mode is analytic-NTK kernel regression. Binary
// accuracy is by sign, multiclass by argmax.
double retrain_eval(const DistilledSet& distilled, EvalMode mode, const RetrainConfig& rc,
                    const LabeledDataset& test);

// Test accuracy of a fixed parameter vector (sign / argmax as above).
double model_accuracy(const Architecture& arch, const Vec& theta, const LabeledDataset& test);

void save_distilled(const std::string& path, const DistilledSet& ds);
DistilledSet load_distilled(const std::string& path);

}  // namespace ntklab
