#include "ntklab/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "ntklab/rng.hpp"

namespace ntklab {

ReconstructionCurve greedy_pair_from_distances(const Mat& D) {
    const int N = static_cast<int>(D.rows()), M = static_cast<int>(D.cols());
    require(M >= N, "greedy_pair: need at least as many reconstructions as train images");
    require(N >= 1, "greedy_pair: empty train set");

    std::vector<char> row_used(N, 0), col_used(M, 0);
    ReconstructionCurve curve;
    curve.pairs.reserve(N);
    for (int step = 0; step < N; ++step) {
        int bi = -1, bj = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < N; ++i) {
            if (row_used[i]) continue;
            for (int j = 0; j < M; ++j) {
                if (col_used[j]) continue;
                if (D(i, j) < best) {  // strict: first hit wins ties lexicographically
                    best = D(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        row_used[bi] = 1;
        col_used[bj] = 1;
        curve.pairs.push_back({bi, bj, best});
    }
    return curve;
}

ReconstructionCurve greedy_pair(const Mat& X_train, const Mat& X_recon) {
    require(X_train.cols() == X_recon.cols(), "greedy_pair: dimension mismatch");
    const Eigen::Index N = X_train.rows(), M = X_recon.rows();
    require(M >= N, "greedy_pair: need at least as many reconstructions as train images");
    Mat D(N, M);
    Vec tn = X_train.rowwise().squaredNorm();
    Vec rn = X_recon.rowwise().squaredNorm();
    D.noalias() = -2.0 * X_train * X_recon.transpose();
    D.colwise() += tn;
    D.rowwise() += rn.transpose();
    D = D.cwiseMax(0.0);  // clamp the occasional -1e-16 from cancellation
    return greedy_pair_from_distances(D);
}

double mean_recon_error(const ReconstructionCurve& curve) {
    require(!curve.pairs.empty(), "mean_recon_error: empty curve");
    double s = 0.0;
    for (const auto& p : curve.pairs) s += p.sq_dist;
    return s / static_cast<double>(curve.pairs.size());
}

std::vector<AlphaErrorRow> alpha_error_table(const ReconstructionCurve& curve, const Mat& alpha) {
    require(alpha.rows() >= curve.n(), "alpha_error_table: alpha rows do not cover the train set");
    for (const auto& p : curve.pairs)
        require(p.train_index < alpha.rows(), "alpha_error_table: train index out of range");
    std::vector<AlphaErrorRow> rows;
    rows.reserve(curve.pairs.size());
    for (const auto& p : curve.pairs)
        rows.push_back({p.train_index, alpha.row(p.train_index).norm(), p.sq_dist});
    std::sort(rows.begin(), rows.end(),
              [](const AlphaErrorRow& a, const AlphaErrorRow& b) { return a.train_index < b.train_index; });
    return rows;
}

namespace {

LabeledDataset remove_rows(const LabeledDataset& data, const std::vector<int>& remove) {
    std::vector<char> drop(data.n(), 0);
    for (int r : remove) drop[static_cast<std::size_t>(r)] = 1;
    const int keep = data.n() - static_cast<int>(remove.size());
    LabeledDataset out;
    out.images.resize(keep, data.images.cols());
    out.labels.resize(keep, data.labels.cols());
    out.raw_class_ids.reserve(keep);
    out.task_class_ids.reserve(keep);
    out.normalization = data.normalization;
    int w = 0;
    for (int i = 0; i < data.n(); ++i) {
        if (drop[static_cast<std::size_t>(i)]) continue;
        out.images.row(w) = data.images.row(i);
        out.labels.row(w) = data.labels.row(i);
        out.raw_class_ids.push_back(data.raw_class_ids[static_cast<std::size_t>(i)]);
        out.task_class_ids.push_back(data.task_class_ids[static_cast<std::size_t>(i)]);
        ++w;
    }
    return out;
}

int task_class_count(const LabeledDataset& data) {
    int n_classes = 0;
    for (int c : data.task_class_ids) n_classes = std::max(n_classes, c + 1);
    return n_classes;
}

}  // namespace

LabeledDataset prune_most_reconstructed(const ReconstructionCurve& curve, const LabeledDataset& data,
                                        int k, bool balanced) {
    require(k >= 0 && k <= data.n(), "prune: k out of range");
    require(curve.n() == data.n(), "prune: curve does not match the dataset");

    std::vector<int> remove;
    if (!balanced) {
        for (int i = 0; i < k; ++i) remove.push_back(curve.pairs[static_cast<std::size_t>(i)].train_index);
    } else {
        const int n_classes = task_class_count(data);
        require(n_classes >= 1, "prune: dataset has no task classes");
        require(k % n_classes == 0, "prune: balanced mode needs k divisible by the class count");
        const int per_class = k / n_classes;
        std::vector<int> taken(n_classes, 0);
        for (const auto& p : curve.pairs) {  // ascending by distance
            const int c = data.task_class_ids[static_cast<std::size_t>(p.train_index)];
            if (taken[static_cast<std::size_t>(c)] < per_class) {
                remove.push_back(p.train_index);
                ++taken[static_cast<std::size_t>(c)];
            }
        }
        require(static_cast<int>(remove.size()) == k,
                "prune: not enough examples in some class for balanced removal");
    }
    return remove_rows(data, remove);
}

LabeledDataset prune_random(const LabeledDataset& data, int k, bool balanced, std::uint64_t seed) {
    require(k >= 0 && k <= data.n(), "prune_random: k out of range");
    Rng rng(seed);
    std::vector<int> remove;
    if (!balanced) {
        remove = rng.sample_indices(data.n(), k);
    } else {
        const int n_classes = task_class_count(data);
        require(k % n_classes == 0, "prune_random: balanced mode needs k divisible by the class count");
        const int per_class = k / n_classes;
        for (int c = 0; c < n_classes; ++c) {
            std::vector<int> members;
            for (int i = 0; i < data.n(); ++i)
                if (data.task_class_ids[static_cast<std::size_t>(i)] == c) members.push_back(i);
            require(static_cast<int>(members.size()) >= per_class,
                    "prune_random: class too small for balanced removal");
            for (int idx : rng.sample_indices(static_cast<int>(members.size()), per_class))
                remove.push_back(members[static_cast<std::size_t>(idx)]);
        }
    }
    return remove_rows(data, remove);
}

void save_curve_csv(const std::string& path, const ReconstructionCurve& curve,
                    const std::vector<std::string>& meta) {
    std::ofstream f(path);
    if (!f) throw ValidationError("save_curve_csv: cannot open " + path);
    for (const auto& m : meta) f << "# " << m << '\n';
    f << "rank,train_index,recon_index,sq_l2\n";
    f.precision(12);
    for (std::size_t i = 0; i < curve.pairs.size(); ++i)
        f << i << ',' << curve.pairs[i].train_index << ',' << curve.pairs[i].recon_index << ','
          << curve.pairs[i].sq_dist << '\n';
}

void save_alpha_table_csv(const std::string& path, const std::vector<AlphaErrorRow>& rows,
                          const std::vector<std::string>& meta) {
    std::ofstream f(path);
    if (!f) throw ValidationError("save_alpha_table_csv: cannot open " + path);
    for (const auto& m : meta) f << "# " << m << '\n';
    f << "train_index,alpha_abs,sq_l2\n";
    f.precision(12);
    for (const auto& r : rows) f << r.train_index << ',' << r.alpha_abs << ',' << r.sq_dist << '\n';
}

}  // namespace ntklab
