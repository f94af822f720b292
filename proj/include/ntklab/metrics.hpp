#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntklab/common.hpp"
#include "ntklab/dynamics.hpp"

namespace ntklab {

struct CurvePair {
    int train_index;
    int recon_index;
    double sq_dist;  // squared l2 in the normalized pixel representation
};

// Greedy train/reconstruction matching, ascending by construction.
struct ReconstructionCurve {
    std::vector<CurvePair> pairs;

    int n() const { return static_cast<int>(pairs.size()); }
};

// Repeatedly extracts the globally smallest remaining (train, recon) squared
// distance until every train row is matched. Ties break on (train_index,
// recon_index) lexicographic order. Requires M >= N.
ReconstructionCurve greedy_pair(const Mat& X_train, const Mat& X_recon);

// Same extraction on a precomputed N x M squared-distance matrix.
ReconstructionCurve greedy_pair_from_distances(const Mat& D);

double mean_recon_error(const ReconstructionCurve& curve);

struct AlphaErrorRow {
    int train_index;
    double alpha_abs;  // |alpha| (l2 over classes for multiclass)
    double sq_dist;
};

// Joins the curve with dual magnitudes from solve_alpha for scatter export.
std::vector<AlphaErrorRow> alpha_error_table(const ReconstructionCurve& curve, const Mat& alpha);

// Removes the k training points with the smallest paired distances. Balanced
// mode removes k / #classes per task class by within-class distance rank and
// requires k to be divisible by the class count.
LabeledDataset prune_most_reconstructed(const ReconstructionCurve& curve, const LabeledDataset& data,
                                        int k, bool balanced);

// Control arm: removes k uniformly at random (per class when balanced).
LabeledDataset prune_random(const LabeledDataset& data, int k, bool balanced, std::uint64_t seed);

// Columns: rank, train_index, recon_index, sq_l2. `meta` lines are written as
// leading '#' comments (normalization descriptor etc).
void save_curve_csv(const std::string& path, const ReconstructionCurve& curve,
                    const std::vector<std::string>& meta = {});

void save_alpha_table_csv(const std::string& path, const std::vector<AlphaErrorRow>& rows,
                          const std::vector<std::string>& meta = {});

}  // namespace ntklab
