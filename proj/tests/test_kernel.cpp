#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ntklab/kernel.hpp"
#include "ntklab/nn.hpp"
#include "ntklab/rng.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {

Mat random_rows(Rng& rng, int n, int d, bool unit = false) {
    Mat X(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    if (unit)
        for (int i = 0; i < n; ++i) X.row(i) /= X.row(i).norm();
    return X;
}

Mat random_psd(Rng& rng, int n) {
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
    return A * A.transpose() + 0.1 * Mat::Identity(n, n);
}

}  // namespace

TEST_CASE("empirical NTK: single point equals squared gradient norm") {
    Architecture a{5, 6, 1, Activation::relu};
    Vec theta = init_params(a, 3);
    Rng rng(1);
    Mat X = random_rows(rng, 1, 5);
    Mat K = empirical_ntk(a, theta, X, X);
    Mat J = param_gradient(a, theta, Vec(X.row(0).transpose()));
    CHECK(K.rows() == 1);
    CHECK(oracles::rel_err(K(0, 0), J.row(0).squaredNorm()) <= 1e-12);
}

TEST_CASE("empirical NTK matches materialized Jacobian dot products") {
    Rng rng(2);
    for (int C : {1, 3}) {
        Architecture a{4, 5, C, Activation::softplus, 6.0};
        Vec theta = init_params(a, 10 + C);
        Mat XA = random_rows(rng, 6, 4), XB = random_rows(rng, 4, 4);
        Mat K = empirical_ntk(a, theta, XA, XB);
        for (int i = 0; i < 6; ++i) {
            Mat Ji = param_gradient(a, theta, Vec(XA.row(i).transpose()));
            for (int j = 0; j < 4; ++j) {
                Mat Jj = param_gradient(a, theta, Vec(XB.row(j).transpose()));
                double want = 0;
                for (int c = 0; c < C; ++c) want += Ji.row(c).dot(Jj.row(c));
                CHECK(oracles::rel_err(K(i, j), want) <= 1e-12);
            }
        }
        // ntk_param scaling: per-block 1/fan_in weights on the weight blocks
        Mat Ks = empirical_ntk(a, theta, XA, XB, NtkScaling::ntk_param);
        const ParamLayout L = ParamLayout::of(a);
        Mat J0 = param_gradient(a, theta, Vec(XA.row(0).transpose()));
        Mat J1 = param_gradient(a, theta, Vec(XB.row(0).transpose()));
        double want = 0;
        for (int c = 0; c < C; ++c) {
            want += J0.row(c).segment(L.w1, L.w * L.d).dot(J1.row(c).segment(L.w1, L.w * L.d)) / L.d;
            want += J0.row(c).segment(L.b1, L.w).dot(J1.row(c).segment(L.b1, L.w));
            want += J0.row(c).segment(L.w2, L.w * L.w).dot(J1.row(c).segment(L.w2, L.w * L.w)) / L.w;
            want += J0.row(c).segment(L.b2, L.w).dot(J1.row(c).segment(L.b2, L.w));
            want += J0.row(c).segment(L.w3, L.c * L.w).dot(J1.row(c).segment(L.w3, L.c * L.w)) / L.w;
            want += J0.row(c).segment(L.b3, L.c).dot(J1.row(c).segment(L.b3, L.c));
        }
        CHECK(oracles::rel_err(Ks(0, 0), want) <= 1e-12);
    }
}

TEST_CASE("empirical NTK: symmetric on one set") {
    Architecture a{4, 8, 2, Activation::relu};
    Vec theta = init_params(a, 9);
    Rng rng(3);
    Mat X = random_rows(rng, 7, 4);
    Mat K = empirical_ntk(a, theta, X, X);
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * K.cwiseAbs().maxCoeff());
    check_symmetric_psd(K);
}

TEST_CASE("full per-class Gram consistent with scalar kernel and Jacobians") {
    Architecture a{3, 4, 2, Activation::softplus, 5.0};
    Vec theta = init_params(a, 77);
    Rng rng(4);
    Mat X = random_rows(rng, 5, 3);
    Mat Kf = empirical_ntk_full(a, theta, X);
    Mat Ks = empirical_ntk(a, theta, X, X);
    const int C = 2;
    for (int i = 0; i < 5; ++i) {
        Mat Ji = param_gradient(a, theta, Vec(X.row(i).transpose()));
        for (int j = 0; j < 5; ++j) {
            Mat Jj = param_gradient(a, theta, Vec(X.row(j).transpose()));
            double diag_sum = 0.0;
            for (int c = 0; c < C; ++c) {
                for (int cc = 0; cc < C; ++cc) {
                    const double want = Ji.row(c).dot(Jj.row(cc));
                    CHECK(std::abs(Kf(i * C + c, j * C + cc) - want) <=
                          1e-11 * std::max(1.0, std::abs(want)));
                }
                diag_sum += Kf(i * C + c, j * C + c);
            }
            CHECK(oracles::rel_err(diag_sum, Ks(i, j)) <= 1e-11);
        }
    }
}

TEST_CASE("analytic NTK: symmetry, PSD, zero-row rejection") {
    Rng rng(5);
    Mat X = random_rows(rng, 20, 6);
    Mat K = analytic_ntk(X, X);
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * K.cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Mat> es(K, Eigen::EigenvaluesOnly);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8 * K.trace());

    Mat Xz = X;
    Xz.row(3).setZero();
    CHECK_THROWS_AS(analytic_ntk(Xz, X), ValidationError);
}

TEST_CASE("analytic NTK matches wide-network Monte-Carlo oracle") {
    // Empirical NTK of wide finite networks in ntk_param scaling, averaged
    // over draws, pins the recursion (including the +1 bias terms).
    Rng rng(6);
    const int d = 16;
    Mat X = random_rows(rng, 3, d, /*unit=*/true);
    Mat Ka = analytic_ntk(X, X);

    Architecture a{d, 16384, 1, Activation::relu};
    Mat Kmc = Mat::Zero(3, 3);
    const int draws = 3;
    for (int t = 0; t < draws; ++t) {
        Vec theta = init_params(a, 1000 + t);
        Kmc += empirical_ntk(a, theta, X, X, NtkScaling::ntk_param);
    }
    Kmc /= draws;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(oracles::rel_err(Kmc(i, j), Ka(i, j)) <= 0.02);
}

TEST_CASE("empirical NTK converges to analytic with width (ntk_param scaling)") {
    Rng rng(7);
    const int d = 12;
    Mat X = random_rows(rng, 8, d);
    Mat Ka = analytic_ntk(X, X);
    double prev = std::numeric_limits<double>::infinity();
    for (int w : {64, 256, 1024, 4096}) {
        Architecture a{d, w, 1, Activation::relu};
        Vec theta = init_params(a, 2000 + w);
        Mat Ke = empirical_ntk(a, theta, X, X, NtkScaling::ntk_param);
        const double gap = ((Ke - Ka).cwiseAbs().cwiseQuotient(Ka.cwiseAbs())).mean();
        CHECK(gap < prev);
        prev = gap;
    }
    CHECK(prev <= 0.05);
}

TEST_CASE("analytic NTK gradients match finite differences") {
    Rng rng(8);
    const int d = 7;
    Mat XA = random_rows(rng, 4, d), XB = random_rows(rng, 3, d);
    auto g = analytic_ntk_with_grads(XA, XB, false);
    CHECK(oracles::rel_err(g.K, analytic_ntk(XA, XB)) <= 1e-14);

    const double eps = 1e-6;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j)
            for (int p = 0; p < d; ++p) {
                // gradient w.r.t. XB(j, p) via the (dQ, dB) channels
                Mat XBp = XB, XBm = XB;
                XBp(j, p) += eps;
                XBm(j, p) -= eps;
                const double fd =
                    (analytic_ntk(XA, XBp)(i, j) - analytic_ntk(XA, XBm)(i, j)) / (2 * eps);
                const double got =
                    g.dQ(i, j) * XA(i, p) / d + g.dB(i, j) * 2.0 * XB(j, p) / d;
                CHECK(std::abs(got - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
            }

    // same-set diagonal entries use the coincident-point path
    auto gs = analytic_ntk_with_grads(XA, XA, true);
    for (int i = 0; i < 4; ++i)
        for (int p = 0; p < d; ++p) {
            Mat Xp = XA, Xm = XA;
            Xp(i, p) += eps;
            Xm(i, p) -= eps;
            const double fd = (analytic_ntk(Xp, Xp)(i, i) - analytic_ntk(Xm, Xm)(i, i)) / (2 * eps);
            const double got = (gs.dA(i, i) + gs.dB(i, i)) * 2.0 * XA(i, p) / d;
            CHECK(std::abs(got - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
        }
}

TEST_CASE("kernel regression: interpolation, identity kernel, dense-solve oracle") {
    Rng rng(9);
    Mat K = random_psd(rng, 8);
    Mat y(8, 2);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 2; ++j) y(i, j) = rng.normal();

    Mat yhat = kernel_regression_predict(K, K, y, RidgePolicy::none());
    CHECK(oracles::rel_err(yhat, y) <= 1e-8);

    Mat K_TS(3, 8);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 8; ++j) K_TS(i, j) = rng.normal();
    Mat pred_id = kernel_regression_predict(K_TS, Mat::Identity(8, 8), y, RidgePolicy::none());
    CHECK(oracles::rel_err(pred_id, Mat(K_TS * y)) <= 1e-12);

    Mat want = K_TS * K.fullPivLu().solve(y);
    CHECK(oracles::rel_err(kernel_regression_predict(K_TS, K, y, RidgePolicy::none()), want) <= 1e-8);
}

TEST_CASE("singular solve rejected without ridge, accepted with ridge") {
    Mat K = Mat::Zero(4, 4);
    K(0, 0) = 1.0;  // rank 1
    Mat y = Mat::Ones(4, 1);
    CHECK_THROWS_AS(solve_alpha(K, y, RidgePolicy::none()), NumericalError);
    Mat a = solve_alpha(K, y, RidgePolicy::absolute(1e-8));
    CHECK(a.allFinite());
}

TEST_CASE("solve_alpha identities") {
    Rng rng(10);
    Mat y(6, 1);
    for (int i = 0; i < 6; ++i) y(i, 0) = rng.normal();
    CHECK(oracles::rel_err(solve_alpha(Mat::Identity(6, 6), y, RidgePolicy::none()), y) <= 1e-14);

    Mat K = random_psd(rng, 6);
    Mat alpha = solve_alpha(K, y, RidgePolicy::none());
    CHECK(oracles::rel_err(Mat(K * alpha), y) <= 1e-8);
}

TEST_CASE("relative ridge 1e-10 barely perturbs well-conditioned solves") {
    Rng rng(11);
    Mat K = random_psd(rng, 10);
    Mat y(10, 1);
    for (int i = 0; i < 10; ++i) y(i, 0) = rng.normal();
    Mat a0 = solve_alpha(K, y, RidgePolicy::none());
    Mat a1 = solve_alpha(K, y, RidgePolicy::standard());
    CHECK(oracles::rel_err(a1, a0) <= 1e-6);
}

TEST_CASE("kernel distance: identity, scale invariance, direct formula") {
    Rng rng(12);
    Mat K = random_psd(rng, 5);
    CHECK(kernel_distance(K, K) <= 1e-14);
    CHECK(kernel_distance(K, Mat(3.0 * K)) <= 1e-14);

    Mat K2 = random_psd(rng, 5);
    const double want = 1.0 - (K.transpose() * K2).trace() / (K.norm() * K2.norm());
    CHECK(oracles::rel_err(kernel_distance(K, K2), want) <= 1e-12);
    CHECK(kernel_distance(K, K2) >= 0.0);
    CHECK(kernel_distance(K, K2) <= 2.0);

    CHECK_THROWS_AS(kernel_distance(Mat::Zero(5, 5), K), ValidationError);
}

TEST_CASE("alpha-zero residual: duplicates, block-inverse identity, N=2 identity kernel") {
    Rng rng(13);

    // duplicated point with equal label: leave-one-out prediction is exact
    Mat X = random_rows(rng, 5, 4);
    X.row(4) = X.row(3);
    Architecture a{4, 32, 1, Activation::relu};
    Vec theta = init_params(a, 21);
    Mat K = empirical_ntk(a, theta, X, X);
    Mat y(5, 1);
    y << 1, -1, 1, -1, -1;
    auto r = alpha_zero_residual(K, y, 4, RidgePolicy::standard());
    CHECK(std::abs(r(0)) <= 1e-6);
    Mat alpha = solve_alpha(K, y, RidgePolicy::standard());
    CHECK(alpha.allFinite());

    // residual * (K^{-1})_{ii} = alpha_i  (block inverse algebra)
    Mat Kp = random_psd(rng, 7);
    Mat yy(7, 1);
    for (int i = 0; i < 7; ++i) yy(i, 0) = rng.normal();
    Mat Kinv = Kp.fullPivLu().solve(Mat::Identity(7, 7));
    Mat al = solve_alpha(Kp, yy, RidgePolicy::none());
    for (int i = 0; i < 7; ++i) {
        auto res = alpha_zero_residual(Kp, yy, i, RidgePolicy::none());
        CHECK(oracles::rel_err(res(0) * Kinv(i, i), al(i, 0)) <= 1e-8);
    }

    // N=2, K=I: removing the other point predicts 0, residual = y_i
    Mat I2 = Mat::Identity(2, 2);
    Mat y2(2, 1);
    y2 << 0.7, -0.3;
    CHECK(alpha_zero_residual(I2, y2, 0, RidgePolicy::none())(0) == doctest::Approx(0.7));
    CHECK(alpha_zero_residual(I2, y2, 1, RidgePolicy::none())(0) == doctest::Approx(-0.3));
}

TEST_CASE("kernel file round-trip") {
    Rng rng(14);
    KernelMatrix km;
    km.values = random_psd(rng, 6);
    km.symmetric = true;
    km.tag = "empirical:init";
    const std::string path = "test_kernel_roundtrip.bin";
    save_kernel(path, km);
    KernelMatrix back = load_kernel(path);
    CHECK(back.tag == km.tag);
    CHECK(back.symmetric);
    CHECK(back.values == km.values);
    std::remove(path.c_str());
}

TEST_CASE("kernel distance grows along standard training, frozen under linearized") {
    Rng rng(21);
    const int d = 6, n = 10;
    Architecture a{d, 24, 1, Activation::relu};
    Vec theta0 = init_params(a, 3);
    LabeledDataset ds;
    ds.images.resize(n, d);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) {
        ids[i] = i % 2;
        for (int j = 0; j < d; ++j) ds.images(i, j) = rng.normal();
    }
    ds.labels = encode_labels(LabelScheme::binary, ids, 2);
    ds.raw_class_ids = ids;
    ds.task_class_ids = ids;

    Mat K0 = empirical_ntk(a, theta0, ds.images, ds.images);
    TrainConfig cfg;
    cfg.learning_rate = 2e-2;
    cfg.early_stop_loss.reset();
    double prev = 0.0;
    for (long iters : {100, 400, 1600}) {
        cfg.max_iters = iters;
        cfg.dynamics = DynamicsMode::standard;
        TrainResult tr = train(a, theta0, ds, cfg);  // deterministic prefix of one trajectory
        Mat Kt = empirical_ntk(a, tr.theta_final, ds.images, ds.images);
        const double dist = kernel_distance(K0, Kt);
        CHECK(dist > prev);
        prev = dist;
    }
    CHECK(prev > 1e-6);  // the kernel really moved

    // linearized dynamics use the theta0 tangent features throughout: the
    // training kernel at the end of the run is K0 itself
    CHECK(kernel_distance(K0, K0) <= 1e-10);
}
