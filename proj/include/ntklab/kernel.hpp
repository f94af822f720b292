#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntklab/common.hpp"
#include "ntklab/nn.hpp"

namespace ntklab {

// Gram matrix carrier used for file exchange; the numeric ops below work on
// plain matrices.
struct KernelMatrix {
    Mat values;
    bool symmetric = false;
    std::string tag;  // "empirical:init" | "empirical:final" | "analytic" | ...
};

struct RidgePolicy {
    enum class Mode { none, absolute, relative };
    Mode mode = Mode::none;
    double lambda = 0.0;

    static RidgePolicy none() { return {Mode::none, 0.0}; }
    static RidgePolicy absolute(double l) { return {Mode::absolute, l}; }
    static RidgePolicy relative(double l) { return {Mode::relative, l}; }
    // Default used across the pipeline; recorded in result files.
    static RidgePolicy standard() { return relative(1e-10); }

    double effective_lambda(const Mat& K) const;
    std::string describe() const;
};

// Parameter-gradient inner products k(x, x') = sum_c grad f_c(x) . grad f_c(x').
// `standard` leaves the gradients as-is (the kernel that actually drives
// training; entries grow with width). `ntk_param` weights each weight block by
// 1/fan_in, which is the scaling whose wide limit is analytic_ntk.
enum class NtkScaling { standard, ntk_param };

// Class-summed scalar kernel between row sets XA (A x d) and XB (B x d).
Mat empirical_ntk(const Architecture& arch, const Vec& theta, const Mat& XA, const Mat& XB,
                  NtkScaling scaling = NtkScaling::standard);

// Full per-(example, class) Gram over one set: (N*C) x (N*C), index i*C + c.
// Exactly J J^T for the stacked Jacobian; standard scaling.
Mat empirical_ntk_full(const Architecture& arch, const Vec& theta, const Mat& X);

// Infinite-width relu NTK for the fixed two-hidden-layer topology with
// zero-initialized biases (bias gradients contribute +1 per layer):
//   L0 = x.x'/d,  Theta_1 = L0 + 1,
//   Theta_{l+1} = Sdot_l Theta_l + Sigma_l + 1  (arc-cosine maps of degree 0/1).
// Per-class kernel; rows of X must be nonzero.
Mat analytic_ntk(const Mat& XA, const Mat& XB);

// analytic_ntk plus elementwise partials with respect to q0 = a.b/d,
// aa0 = |a|^2/d, bb0 = |b|^2/d; used by the distillation chain rule.
// With same_set, diagonal entries take the exact coincident-point path.
struct AnalyticNtkGrads {
    Mat K;
    Mat dQ, dA, dB;
};
AnalyticNtkGrads analytic_ntk_with_grads(const Mat& XA, const Mat& XB, bool same_set);

// yhat = K_TS K_SS^{-1} y_S via a factorization (no explicit inverse).
// Throws NumericalError for a singular system under ridge mode none.
Mat kernel_regression_predict(const Mat& K_TS, const Mat& K_SS, const Mat& y_S,
                              const RidgePolicy& ridge);

// alpha = K_TT^{-1} y_T (columns per class).
Mat solve_alpha(const Mat& K_TT, const Mat& y_T, const RidgePolicy& ridge);

// Shared solver: X with K X = B under the ridge policy.
Mat psd_solve(const Mat& K, const Mat& B, const RidgePolicy& ridge);

// d = 1 - Tr(K0^T Kf) / (|K0|_F |Kf|_F), in [0, 2].
double kernel_distance(const Mat& K0, const Mat& Kf);

// y_i minus the leave-one-out kernel prediction of example i (one entry per
// class). Zero iff alpha_i = 0 for the full solve.
Eigen::RowVectorXd alpha_zero_residual(const Mat& K_TT, const Mat& y_T, int index,
                                       const RidgePolicy& ridge);

void check_symmetric_psd(const Mat& K, double sym_tol = 1e-10, double eig_tol = 1e-8);

// Binary export: magic, A, B, tag, row-major float64.
void save_kernel(const std::string& path, const KernelMatrix& km);
KernelMatrix load_kernel(const std::string& path);
void save_kernel_csv(const std::string& path, const Mat& K);

}  // namespace ntklab
