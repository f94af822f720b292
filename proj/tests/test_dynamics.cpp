#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ntklab/dynamics.hpp"
#include "ntklab/kernel.hpp"
#include "ntklab/rng.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {

LabeledDataset synthetic_binary(Rng& rng, int n, int d) {
    LabeledDataset ds;
    ds.images.resize(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) ds.images(i, j) = rng.normal() / std::sqrt(double(d));
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = i % 2;
    ds.labels = encode_labels(LabelScheme::binary, ids, 2);
    ds.task_class_ids = ids;
    ds.raw_class_ids = ids;
    return ds;
}

}  // namespace

TEST_CASE("encode_labels") {
    Mat y = encode_labels(LabelScheme::multiclass, {3}, 10);
    CHECK(y.rows() == 1);
    CHECK(y.cols() == 10);
    CHECK(y(0, 3) == doctest::Approx(0.9));
    CHECK(y(0, 0) == doctest::Approx(-0.1));
    CHECK(y.row(0).sum() == doctest::Approx(0.9 - 0.9));

    Mat yb = encode_labels(LabelScheme::binary, {1, 0}, 2);
    CHECK(yb(0, 0) == doctest::Approx(1.0));
    CHECK(yb(1, 0) == doctest::Approx(-1.0));

    // negative-label knob (App-G reading resolved to {+1,-1}; -2 available)
    Mat y2 = encode_labels(LabelScheme::binary, {0}, 2, -2.0);
    CHECK(y2(0, 0) == doctest::Approx(-2.0));

    CHECK_THROWS_AS(encode_labels(LabelScheme::binary, {}, 2), ValidationError);
    CHECK_THROWS_AS(encode_labels(LabelScheme::binary, {2}, 2), ValidationError);
    CHECK_THROWS_AS(encode_labels(LabelScheme::multiclass, {11}, 10), ValidationError);
}

TEST_CASE("single GD step matches hand-computed update") {
    Rng rng(1);
    Architecture a{3, 4, 1, Activation::softplus, 6.0};
    Vec theta0 = init_params(a, 5);
    LabeledDataset ds = synthetic_binary(rng, 4, 3);

    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.momentum = 0.0;
    cfg.max_iters = 1;
    cfg.early_stop_loss.reset();
    TrainResult res = train(a, theta0, ds, cfg);

    Vec g = Vec::Zero(theta0.size());
    for (int i = 0; i < ds.n(); ++i) {
        Vec x = ds.images.row(i).transpose();
        Vec r = forward(a, theta0, x) - ds.labels.row(i).transpose();
        g += param_vjp(a, theta0, x, r);
    }
    g /= ds.n();
    Vec want = theta0 - cfg.learning_rate * g;
    CHECK(oracles::rel_err(res.theta_final, want) <= 1e-12);
}

TEST_CASE("standard and linearized dynamics share the first step") {
    Rng rng(2);
    Architecture a{4, 8, 2, Activation::softplus, 8.0};
    Vec theta0 = init_params(a, 7);
    LabeledDataset ds = synthetic_binary(rng, 5, 4);
    ds.labels = encode_labels(LabelScheme::multiclass, {0, 1, 0, 1, 0}, 2);
    ds.task_class_ids = {0, 1, 0, 1, 0};

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_iters = 1;
    cfg.early_stop_loss.reset();
    cfg.dynamics = DynamicsMode::standard;
    TrainResult rs = train(a, theta0, ds, cfg);
    cfg.dynamics = DynamicsMode::linearized;
    cfg.fast_linearized = false;
    TrainResult rl = train(a, theta0, ds, cfg);
    cfg.fast_linearized = true;
    TrainResult rf = train(a, theta0, ds, cfg);

    CHECK(oracles::rel_err(rs.theta_final, rl.theta_final) <= 1e-12);
    CHECK(oracles::rel_err(rs.theta_final, rf.theta_final) <= 1e-10);
}

TEST_CASE("early_stop_loss = inf stops at iteration 1 with no update") {
    Rng rng(3);
    Architecture a{3, 4, 1, Activation::relu};
    Vec theta0 = init_params(a, 1);
    LabeledDataset ds = synthetic_binary(rng, 3, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.early_stop_loss = std::numeric_limits<double>::infinity();
    TrainResult res = train(a, theta0, ds, cfg);
    CHECK(res.stopped_at_iter == 1);
    CHECK(res.theta_final == theta0);
}

TEST_CASE("fast and literal linearized paths produce the same trajectory") {
    Rng rng(4);
    Architecture a{5, 16, 2, Activation::softplus, 10.0};
    Vec theta0 = init_params(a, 11);
    LabeledDataset ds = synthetic_binary(rng, 6, 5);
    ds.labels = encode_labels(LabelScheme::multiclass, {0, 1, 1, 0, 1, 0}, 2);
    ds.task_class_ids = {0, 1, 1, 0, 1, 0};

    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.max_iters = 400;
    cfg.early_stop_loss.reset();
    cfg.dynamics = DynamicsMode::linearized;
    cfg.loss_history_stride = 50;

    cfg.fast_linearized = false;
    TrainResult slow = train(a, theta0, ds, cfg);
    cfg.fast_linearized = true;
    TrainResult fast = train(a, theta0, ds, cfg);

    REQUIRE(slow.loss_history.size() == fast.loss_history.size());
    for (std::size_t i = 0; i < slow.loss_history.size(); ++i) {
        CHECK(slow.loss_history[i].first == fast.loss_history[i].first);
        CHECK(oracles::rel_err(fast.loss_history[i].second, slow.loss_history[i].second) <= 1e-6);
    }
    CHECK(oracles::rel_err(fast.theta_final, slow.theta_final) <= 1e-8);
    CHECK(oracles::rel_err(fast.alpha_integral, slow.alpha_integral) <= 1e-6);
}

TEST_CASE("linearized training to convergence matches the closed-form delta") {
    Rng rng(5);
    Architecture a{6, 64, 1, Activation::relu};
    Vec theta0 = init_params(a, 21);
    LabeledDataset ds = synthetic_binary(rng, 8, 6);

    TrainConfig cfg;
    cfg.learning_rate = 5e-3;
    cfg.max_iters = 500000;
    cfg.early_stop_loss = 1e-12;
    cfg.dynamics = DynamicsMode::linearized;
    TrainResult res = train(a, theta0, ds, cfg);
    REQUIRE(res.final_loss < 1e-12);

    Vec delta_trained = res.theta_final - theta0;
    Vec delta_closed = closed_form_delta_theta(a, theta0, ds);
    CHECK(oracles::rel_err(delta_trained, delta_closed) <= 1e-3);

    // loss monotone non-increasing at this learning rate
    for (std::size_t i = 1; i < res.loss_history.size(); ++i)
        CHECK(res.loss_history[i].second <= res.loss_history[i - 1].second * (1 + 1e-12));

    // alpha integral identity against the kernel solve
    Mat K0 = empirical_ntk(a, theta0, ds.images, ds.images);
    Mat f0(ds.n(), 1);
    for (int i = 0; i < ds.n(); ++i) f0(i, 0) = forward(a, theta0, Vec(ds.images.row(i).transpose()))[0];
    Mat alpha = solve_alpha(K0, Mat(ds.labels - f0), RidgePolicy::standard());
    for (int i = 0; i < ds.n(); ++i)
        CHECK(oracles::rel_err(res.alpha_integral(i, 0), alpha(i, 0)) <= 0.05);
}

TEST_CASE("closed-form delta: zero residual, scalar case, KKT conditions") {
    Rng rng(6);
    Architecture a{4, 12, 2, Activation::softplus, 8.0};
    Vec theta0 = init_params(a, 33);
    LabeledDataset ds = synthetic_binary(rng, 5, 4);
    ds.labels.resize(5, 2);
    for (int i = 0; i < 5; ++i)
        ds.labels.row(i) = forward(a, theta0, Vec(ds.images.row(i).transpose())).transpose();
    CHECK(closed_form_delta_theta(a, theta0, ds).norm() <= 1e-10);

    // N=1 scalar case: delta = grad f (y - f) / k(x, x)
    Architecture a1{4, 6, 1, Activation::relu};
    Vec t1 = init_params(a1, 3);
    LabeledDataset one = synthetic_binary(rng, 1, 4);
    Vec x = one.images.row(0).transpose();
    const double f = forward(a1, t1, x)[0];
    Vec g = param_vjp(a1, t1, x, Vec::Ones(1));
    Vec want = g * (one.labels(0, 0) - f) / g.squaredNorm();
    CHECK(oracles::rel_err(closed_form_delta_theta(a1, t1, one), want) <= 1e-8);

    // KKT: delta^T grad f_c(x_i) = y_ic - f_ic for the multiclass case
    ds.labels = encode_labels(LabelScheme::multiclass, {0, 1, 1, 0, 1}, 2);
    Vec delta = closed_form_delta_theta(a, theta0, ds);
    for (int i = 0; i < 5; ++i) {
        Vec xi = ds.images.row(i).transpose();
        Vec lhs = param_jvp(a, theta0, xi, delta);
        Vec rhs = ds.labels.row(i).transpose() - forward(a, theta0, xi);
        CHECK(oracles::rel_err(lhs, rhs) <= 1e-8);
    }
}

TEST_CASE("divergence guard aborts") {
    Rng rng(7);
    Architecture a{3, 8, 1, Activation::relu};
    Vec theta0 = init_params(a, 2);
    LabeledDataset ds = synthetic_binary(rng, 4, 3);
    TrainConfig cfg;
    cfg.learning_rate = 1e4;
    cfg.max_iters = 2000;
    cfg.early_stop_loss.reset();
    CHECK_THROWS_AS(train(a, theta0, ds, cfg), NumericalError);
}

TEST_CASE("checkpoint round-trip") {
    Architecture a{7, 3, 2, Activation::softplus, 42.0};
    Checkpoint ck;
    ck.arch = a;
    ck.theta0 = init_params(a, 1);
    ck.theta_final = init_params(a, 2);
    save_checkpoint("test_ckpt.bin", ck);
    Checkpoint back = load_checkpoint("test_ckpt.bin");
    CHECK(back.arch.input_dim == 7);
    CHECK(back.arch.hidden_width == 3);
    CHECK(back.arch.output_dim == 2);
    CHECK(back.arch.activation == Activation::softplus);
    CHECK(back.arch.temperature == 42.0);
    CHECK(back.theta0 == ck.theta0);
    CHECK(back.theta_final == ck.theta_final);
    std::remove("test_ckpt.bin");

    CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), ValidationError);
}
