#include "ntklab/kernel.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ntklab/nn_batch.hpp"

namespace ntklab {

double RidgePolicy::effective_lambda(const Mat& K) const {
    switch (mode) {
        case Mode::none:
            return 0.0;
        case Mode::absolute:
            return lambda;
        case Mode::relative:
            return lambda * K.trace() / static_cast<double>(K.rows());
    }
    return 0.0;
}

std::string RidgePolicy::describe() const {
    switch (mode) {
        case Mode::none:
            return "none";
        case Mode::absolute:
            return "absolute(" + std::to_string(lambda) + ")";
        case Mode::relative:
            return "relative(" + std::to_string(lambda) + ")";
    }
    return "?";
}

namespace {

// Per-example tangent features. The empirical NTK of the fixed topology
// factorizes exactly:
//   k(x, x') = sum_c psi_c.psi_c' (x.x' + 1) + phi2.phi2' (h1.h1' + 1)
//            + C (h2.h2' + 1)
// with psi_c = D1 o (W2^T (W3[c,:] o D2)) and phi2 = D2 o sqrt(sum_c W3^2).
// This matches grad-dot-grad entrywise (tested against materialized
// Jacobians) while never materializing a Jacobian.
struct FeatureSet {
    Mat Xc;         // d x B (inputs as columns)
    Mat H1, H2;     // w x B
    Mat Phi2;       // w x B
    std::vector<Mat> Psi;  // per class: w x B
};

FeatureSet build_features(const Architecture& arch, const Vec& theta, const Mat& X_rows) {
    const ParamLayout L = ParamLayout::of(arch);
    require(theta.size() == L.total, "empirical_ntk: parameter vector length mismatch");
    require(X_rows.cols() == L.d, "empirical_ntk: input dimension mismatch");
    NetView<double> net(L, theta.data());
    FeatureSet fs;
    fs.Xc = X_rows.transpose();
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), fs.Xc, fp, true);
    fs.H1 = std::move(fp.H1);
    fs.H2 = std::move(fp.H2);
    Vec s3 = net.W3.array().square().colwise().sum().sqrt().matrix().transpose();
    fs.Phi2 = s3.asDiagonal() * fp.D2;
    fs.Psi.reserve(L.c);
    for (int c = 0; c < L.c; ++c) {
        Vec t = net.W3.row(c).transpose();
        Mat u2 = t.asDiagonal() * fp.D2;
        fs.Psi.emplace_back((net.W2.transpose() * u2).cwiseProduct(fp.D1));
    }
    return fs;
}

}  // namespace

Mat empirical_ntk(const Architecture& arch, const Vec& theta, const Mat& XA, const Mat& XB,
                  NtkScaling scaling) {
    const FeatureSet fa = build_features(arch, theta, XA);
    const bool same = (&XA == &XB) || (XA.rows() == XB.rows() && XA.data() == XB.data());
    const FeatureSet fb_own = same ? FeatureSet{} : build_features(arch, theta, XB);
    const FeatureSet& fb = same ? fa : fb_own;

    const double d = static_cast<double>(arch.input_dim);
    const double w = static_cast<double>(arch.hidden_width);
    const double sx = scaling == NtkScaling::ntk_param ? 1.0 / d : 1.0;
    const double sh = scaling == NtkScaling::ntk_param ? 1.0 / w : 1.0;

    Mat A1 = fa.Psi[0].transpose() * fb.Psi[0];
    for (int c = 1; c < arch.output_dim; ++c) A1.noalias() += fa.Psi[c].transpose() * fb.Psi[c];
    Mat Gx = fa.Xc.transpose() * fb.Xc * sx;
    Gx.array() += 1.0;
    Mat G1 = fa.H1.transpose() * fb.H1 * sh;
    G1.array() += 1.0;
    Mat G2 = fa.H2.transpose() * fb.H2 * sh;
    G2.array() += 1.0;
    Mat K = A1.cwiseProduct(Gx);
    K.noalias() += (fa.Phi2.transpose() * fb.Phi2).cwiseProduct(G1);
    K += static_cast<double>(arch.output_dim) * G2;
    return K;
}

Mat empirical_ntk_full(const Architecture& arch, const Vec& theta, const Mat& X) {
    const ParamLayout L = ParamLayout::of(arch);
    require(theta.size() == L.total, "empirical_ntk_full: parameter vector length mismatch");
    require(X.cols() == L.d, "empirical_ntk_full: input dimension mismatch");
    const int N = static_cast<int>(X.rows());
    const int C = L.c;
    NetView<double> net(L, theta.data());
    Mat Xc = X.transpose();
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), Xc, fp, true);

    // Stacked per-(example, class) tangent features, column index i*C + c.
    Mat U2(L.w, N * C), U1(L.w, N * C);
    for (int c = 0; c < C; ++c) {
        Vec t = net.W3.row(c).transpose();
        Mat u2 = t.asDiagonal() * fp.D2;
        Mat u1 = (net.W2.transpose() * u2).cwiseProduct(fp.D1);
        for (int i = 0; i < N; ++i) {
            U2.col(i * C + c) = u2.col(i);
            U1.col(i * C + c) = u1.col(i);
        }
    }
    Mat Gx = Xc.transpose() * Xc;
    Gx.array() += 1.0;
    Mat G1 = fp.H1.transpose() * fp.H1;
    G1.array() += 1.0;
    Mat G2 = fp.H2.transpose() * fp.H2;
    G2.array() += 1.0;
    Mat K = U1.transpose() * U1;
    Mat K2 = U2.transpose() * U2;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            for (int c = 0; c < C; ++c)
                for (int cc = 0; cc < C; ++cc) {
                    double v = K(i * C + c, j * C + cc) * Gx(i, j) +
                               K2(i * C + c, j * C + cc) * G1(i, j);
                    if (c == cc) v += G2(i, j);
                    K(i * C + c, j * C + cc) = v;
                }
    return K;
}

namespace {

using Arr = Eigen::ArrayXXd;

constexpr double kTwoPiInv = 1.0 / (2.0 * M_PI);

void check_nonzero_rows(const Mat& X, const char* who) {
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        if (X.row(i).squaredNorm() == 0.0)
            throw ValidationError(std::string(who) + ": zero-norm input row " + std::to_string(i));
}

}  // namespace

Mat analytic_ntk(const Mat& XA, const Mat& XB) {
    require(XA.cols() == XB.cols(), "analytic_ntk: dimension mismatch");
    check_nonzero_rows(XA, "analytic_ntk");
    check_nonzero_rows(XB, "analytic_ntk");
    const double d = static_cast<double>(XA.cols());

    Eigen::ArrayXd qa = XA.rowwise().squaredNorm().array() / d;  // length A
    Eigen::ArrayXd qb = XB.rowwise().squaredNorm().array() / d;  // length B
    Eigen::ArrayXd qa0 = qa;
    Arr Q = (XA * XB.transpose()).array() / d;  // A x B
    Arr Theta = Q + 1.0;

    for (int layer = 0; layer < 2; ++layer) {
        Arr s = (qa.sqrt().matrix() * qb.sqrt().matrix().transpose()).array();
        Arr rho = (Q / s).min(1.0).max(-1.0);
        // acos amplifies ulp-level rounding near rho = 1 into ~1e-8 noise;
        // snap numerically coincident directions to theta = 0 exactly.
        Arr th = rho.acos() * (rho <= 1.0 - 1e-12).cast<double>();
        Arr sdot = (M_PI - th) * kTwoPiInv;
        Arr scross = s * (th.sin() + (M_PI - th) * th.cos()) * kTwoPiInv;
        Theta = sdot * Theta + scross + 1.0;
        Q = scross;
        qa /= 2.0;
        qb /= 2.0;
    }
    Mat K = Theta.matrix();
    // Same-set diagonals take the exact coincident-point path: acos near
    // rho = 1 turns ulp-level rounding in sqrt(qa)*sqrt(qb) into ~1e-8 noise.
    const bool same = XA.rows() == XB.rows() && XA.data() == XB.data();
    if (same)
        for (Eigen::Index i = 0; i < K.rows(); ++i) K(i, i) = 0.75 * qa0(i) + 1.75;
    return K;
}

AnalyticNtkGrads analytic_ntk_with_grads(const Mat& XA, const Mat& XB, bool same_set) {
    require(XA.cols() == XB.cols(), "analytic_ntk: dimension mismatch");
    check_nonzero_rows(XA, "analytic_ntk");
    check_nonzero_rows(XB, "analytic_ntk");
    const double d = static_cast<double>(XA.cols());
    const Eigen::Index A = XA.rows(), B = XB.rows();

    Eigen::ArrayXd qa0 = XA.rowwise().squaredNorm().array() / d;
    Eigen::ArrayXd qb0 = XB.rowwise().squaredNorm().array() / d;
    Eigen::ArrayXd qa = qa0, qb = qb0;
    double ka = 1.0, kb = 1.0;  // d qa / d a0, d qb / d b0 (diagonal chains)

    Arr Q = (XA * XB.transpose()).array() / d;
    Arr TQq = Arr::Ones(A, B), TQa = Arr::Zero(A, B), TQb = Arr::Zero(A, B);
    Arr Th = Q + 1.0;
    Arr TTq = Arr::Ones(A, B), TTa = Arr::Zero(A, B), TTb = Arr::Zero(A, B);

    for (int layer = 0; layer < 2; ++layer) {
        Arr s = (qa.sqrt().matrix() * qb.sqrt().matrix().transpose()).array();
        Arr inv_s = s.inverse();
        Arr rho = (Q * inv_s).min(1.0).max(-1.0);
        Arr coincident = (rho > 1.0 - 1e-12).cast<double>();
        Arr th = rho.acos() * (1.0 - coincident);
        Arr sdot = (M_PI - th) * kTwoPiInv;
        Arr j1 = th.sin() + (M_PI - th) * th.cos();
        Arr scross = s * j1 * kTwoPiInv;

        // s depends on the diagonal chains only: ds/da0 = s * ka / (2 qa_i).
        Arr Tsa = s * ((0.5 * ka) * qa.inverse()).matrix().replicate(1, B).array();
        Arr Tsb = s * ((0.5 * kb) * qb.inverse()).matrix().transpose().replicate(A, 1).array();

        Arr Trq = TQq * inv_s;
        Arr Tra = TQa * inv_s - rho * inv_s * Tsa;
        Arr Trb = TQb * inv_s - rho * inv_s * Tsb;

        // d sdot / d rho = 1 / (2 pi sqrt(1 - rho^2)): the square-root cusp
        // at coincident directions would amplify ulp-level rho noise, so that
        // channel is dropped there (exact same-set diagonals are replaced
        // below anyway).
        Arr dsdot =
            ((1.0 - rho.square()).max(1e-18)).sqrt().inverse() * kTwoPiInv * (1.0 - coincident);
        Arr TSdq = dsdot * Trq, TSda = dsdot * Tra, TSdb = dsdot * Trb;

        // d scross / d rho = s * (pi - th) / (2 pi) = s * sdot (smooth).
        Arr j1f = j1 * kTwoPiInv;
        Arr TScq = s * sdot * Trq;
        Arr TSca = Tsa * j1f + s * sdot * Tra;
        Arr TScb = Tsb * j1f + s * sdot * Trb;

        Arr TTq_n = TSdq * Th + sdot * TTq + TScq;
        Arr TTa_n = TSda * Th + sdot * TTa + TSca;
        Arr TTb_n = TSdb * Th + sdot * TTb + TScb;
        Th = sdot * Th + scross + 1.0;
        TTq = TTq_n;
        TTa = TTa_n;
        TTb = TTb_n;

        Q = scross;
        TQq = TScq;
        TQa = TSca;
        TQb = TScb;
        qa /= 2.0;
        qb /= 2.0;
        ka /= 2.0;
        kb /= 2.0;
    }

    AnalyticNtkGrads out;
    out.K = Th.matrix();
    out.dQ = TTq.matrix();
    out.dA = TTa.matrix();
    out.dB = TTb.matrix();
    if (same_set) {
        require(A == B, "analytic_ntk: same_set grams must be square");
        // Coincident-point path: Theta(x, x) = 0.75 |x|^2/d + 1.75 for two
        // hidden relu layers; the rho-channel vanishes identically.
        for (Eigen::Index i = 0; i < A; ++i) {
            out.K(i, i) = 0.75 * qa0(i) + 1.75;
            out.dQ(i, i) = 0.0;
            out.dA(i, i) = 0.375;
            out.dB(i, i) = 0.375;
        }
    }
    return out;
}

Mat psd_solve(const Mat& K, const Mat& B, const RidgePolicy& ridge) {
    require(K.rows() == K.cols(), "psd_solve: kernel must be square");
    require(K.rows() == B.rows(), "psd_solve: right-hand side rows mismatch");
    Mat Kr = K;
    const double lam = ridge.effective_lambda(K);
    if (lam != 0.0) Kr.diagonal().array() += lam;
    Eigen::LDLT<Mat> ldlt(Kr);
    Mat X = ldlt.solve(B);
    if (ridge.mode == RidgePolicy::Mode::none) {
        const double denom = std::max(B.norm(), 1e-300);
        const double rel = (K * X - B).norm() / denom;
        if (!(rel < 1e-6))
            throw NumericalError("psd_solve: singular system under ridge mode none (residual " +
                                 std::to_string(rel) + ")");
    }
    return X;
}

Mat kernel_regression_predict(const Mat& K_TS, const Mat& K_SS, const Mat& y_S,
                              const RidgePolicy& ridge) {
    require(K_SS.rows() == K_SS.cols(), "kernel_regression_predict: K_SS must be square");
    require(K_TS.cols() == K_SS.rows(), "kernel_regression_predict: K_TS/K_SS shape mismatch");
    require(y_S.rows() == K_SS.rows(), "kernel_regression_predict: label rows mismatch");
    return K_TS * psd_solve(K_SS, y_S, ridge);
}

Mat solve_alpha(const Mat& K_TT, const Mat& y_T, const RidgePolicy& ridge) {
    return psd_solve(K_TT, y_T, ridge);
}

double kernel_distance(const Mat& K0, const Mat& Kf) {
    require(K0.rows() == Kf.rows() && K0.cols() == Kf.cols(), "kernel_distance: shape mismatch");
    const double n0 = K0.norm(), nf = Kf.norm();
    if (n0 == 0.0 || nf == 0.0) throw ValidationError("kernel_distance: zero-norm kernel");
    return 1.0 - K0.cwiseProduct(Kf).sum() / (n0 * nf);
}

Eigen::RowVectorXd alpha_zero_residual(const Mat& K_TT, const Mat& y_T, int index,
                                       const RidgePolicy& ridge) {
    const int N = static_cast<int>(K_TT.rows());
    require(K_TT.cols() == N, "alpha_zero_residual: kernel must be square");
    require(N >= 2, "alpha_zero_residual: needs at least two examples");
    require(index >= 0 && index < N, "alpha_zero_residual: index out of range");
    require(y_T.rows() == N, "alpha_zero_residual: label rows mismatch");

    std::vector<int> rest;
    rest.reserve(N - 1);
    for (int i = 0; i < N; ++i)
        if (i != index) rest.push_back(i);

    Mat Km(N - 1, N - 1), ym(N - 1, y_T.cols());
    Vec ki(N - 1);
    for (int a = 0; a < N - 1; ++a) {
        ym.row(a) = y_T.row(rest[a]);
        ki[a] = K_TT(rest[a], index);
        for (int b = 0; b < N - 1; ++b) Km(a, b) = K_TT(rest[a], rest[b]);
    }
    Mat coeff = psd_solve(Km, ym, ridge);
    return y_T.row(index) - ki.transpose() * coeff;
}

void check_symmetric_psd(const Mat& K, double sym_tol, double eig_tol) {
    require(K.rows() == K.cols(), "kernel matrix not square");
    const double scale = std::max(1.0, K.cwiseAbs().maxCoeff());
    if ((K - K.transpose()).cwiseAbs().maxCoeff() > sym_tol * scale)
        throw NumericalError("kernel matrix not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(K, Eigen::EigenvaluesOnly);
    const double floor = -eig_tol * std::max(K.trace(), 1.0);
    if (es.eigenvalues().minCoeff() < floor)
        throw NumericalError("kernel matrix not PSD: min eigenvalue " +
                             std::to_string(es.eigenvalues().minCoeff()));
}

namespace {
constexpr char kKernelMagic[8] = {'N', 'T', 'K', 'K', 'M', 'A', 'T', '1'};
}

void save_kernel(const std::string& path, const KernelMatrix& km) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("save_kernel: cannot open " + path);
    f.write(kKernelMagic, 8);
    const std::uint64_t A = km.values.rows(), B = km.values.cols();
    const std::uint16_t taglen = static_cast<std::uint16_t>(km.tag.size());
    const std::uint8_t sym = km.symmetric ? 1 : 0;
    f.write(reinterpret_cast<const char*>(&A), 8);
    f.write(reinterpret_cast<const char*>(&B), 8);
    f.write(reinterpret_cast<const char*>(&taglen), 2);
    f.write(km.tag.data(), taglen);
    f.write(reinterpret_cast<const char*>(&sym), 1);
    for (std::uint64_t i = 0; i < A; ++i) {
        Eigen::RowVectorXd row = km.values.row(static_cast<Eigen::Index>(i));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(8 * B));
    }
    if (!f) throw NumericalError("save_kernel: write failed for " + path);
}

KernelMatrix load_kernel(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("load_kernel: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kKernelMagic, 8) != 0)
        throw ValidationError("load_kernel: bad magic in " + path);
    std::uint64_t A = 0, B = 0;
    std::uint16_t taglen = 0;
    std::uint8_t sym = 0;
    f.read(reinterpret_cast<char*>(&A), 8);
    f.read(reinterpret_cast<char*>(&B), 8);
    f.read(reinterpret_cast<char*>(&taglen), 2);
    KernelMatrix km;
    km.tag.resize(taglen);
    f.read(km.tag.data(), taglen);
    f.read(reinterpret_cast<char*>(&sym), 1);
    km.symmetric = sym != 0;
    km.values.resize(static_cast<Eigen::Index>(A), static_cast<Eigen::Index>(B));
    for (std::uint64_t i = 0; i < A; ++i) {
        Eigen::RowVectorXd row(static_cast<Eigen::Index>(B));
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(8 * B));
        km.values.row(static_cast<Eigen::Index>(i)) = row;
    }
    if (!f) throw ValidationError("load_kernel: truncated file " + path);
    return km;
}

void save_kernel_csv(const std::string& path, const Mat& K) {
    std::ofstream f(path);
    if (!f) throw ValidationError("save_kernel_csv: cannot open " + path);
    f.precision(17);
    for (Eigen::Index i = 0; i < K.rows(); ++i) {
        for (Eigen::Index j = 0; j < K.cols(); ++j) {
            if (j) f << ',';
            f << K(i, j);
        }
        f << '\n';
    }
}

}  // namespace ntklab
