#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ntklab/common.hpp"
#include "ntklab/kernel.hpp"
#include "ntklab/nn.hpp"

namespace ntklab {

struct LabeledDataset {
    Mat images;  // N x d, normalized pixel representation
    Mat labels;  // N x C, encoded
    std::vector<int> raw_class_ids;   // original dataset classes (0..9)
    std::vector<int> task_class_ids;  // task classes (0/1 binary, 0..9 multiclass)
    std::string normalization;        // descriptor, carried into outputs

    int n() const { return static_cast<int>(images.rows()); }
    int dim() const { return static_cast<int>(images.cols()); }
    int classes() const { return static_cast<int>(labels.cols()); }
};

enum class LabelScheme { binary, multiclass };

// binary: id 1 -> +1, id 0 -> negative_label (single column).
// multiclass: 0.9 at the true class, -0.1 elsewhere.
Mat encode_labels(LabelScheme scheme, const std::vector<int>& class_ids, int n_classes,
                  double negative_label = -1.0);

enum class DynamicsMode { standard, linearized };

struct TrainConfig {
    double learning_rate = 0.0;  // absolute; mean-loss convention L = sum |r_i|^2 / (2N)
    double momentum = 0.9;
    long max_iters = 1000000;
    std::optional<double> early_stop_loss = 1e-10;
    DynamicsMode dynamics = DynamicsMode::standard;
    std::uint64_t seed = 0;
    // Linearized dynamics admit an exact reformulation on the frozen Gram
    // (identical update sequence, one (NC)^2 matvec per step instead of
    // per-example jvp/vjp passes). The slow path exists for the equivalence
    // test and as a reference.
    bool fast_linearized = true;
    int loss_history_stride = 100;
    double divergence_factor = 1e6;
};

struct TrainResult {
    Vec theta0;
    Vec theta_final;
    std::vector<std::pair<long, double>> loss_history;  // (iter, mean loss)
    Mat alpha_integral;  // N x C running residual accumulation; converges to
                         // K0^{-1}(y - f0) in linearized mode (App-style identity)
    long stopped_at_iter = 0;
    double final_loss = 0.0;
};

// Full-batch heavy-ball gradient descent on L = sum_i |y_i - f(x_i)|^2 / (2N).
// Velocity update v <- m v + g, theta <- theta - lr v. Aborts with
// NumericalError if the loss exceeds divergence_factor times its initial
// value or turns non-finite.
TrainResult train(const Architecture& arch, const Vec& theta0, const LabeledDataset& data,
                  const TrainConfig& cfg);

// Least-norm interpolating update of the linearized model:
//   delta = J^T (J J^T)^{-1} vec(y - f0)
// with J the stacked per-(example, class) Jacobian at theta0.
Vec closed_form_delta_theta(const Architecture& arch, const Vec& theta0,
                            const LabeledDataset& data,
                            const RidgePolicy& ridge = RidgePolicy::standard());

struct Checkpoint {
    Architecture arch;
    Vec theta0;
    Vec theta_final;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ntklab
