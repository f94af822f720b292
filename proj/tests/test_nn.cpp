#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ntklab/nn.hpp"
#include "ntklab/rng.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {

Architecture softplus_arch(int d, int w, int c, double tau = 8.0) {
    return {d, w, c, Activation::softplus, tau};
}

Vec random_input(Rng& rng, int d) {
    Vec x(d);
    for (int i = 0; i < d; ++i) x[i] = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("parameter count and layout") {
    Architecture a{4, 2, 1, Activation::relu};
    // (d*w + w) + (w*w + w) + (w*C + C) = (8+2) + (4+2) + (2+1)
    CHECK(a.param_count() == 19);
    Vec theta = init_params(a, 123);
    CHECK(theta.size() == 19);

    Vec theta2 = init_params(a, 123);
    CHECK(theta == theta2);  // bitwise determinism
    Vec theta3 = init_params(a, 124);
    CHECK(theta != theta3);
}

TEST_CASE("flatten/unflatten round-trip") {
    Architecture a = softplus_arch(3, 5, 2);
    Vec theta = init_params(a, 9);
    Rng rng(7);
    for (int i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.normal();  // nonzero biases too
    CHECK(flatten(a, unflatten(a, theta)) == theta);
}

TEST_CASE("init statistics: per-layer std near 1/sqrt(fan_in)") {
    Architecture a{784, 4096, 1, Activation::relu};
    Vec theta = init_params(a, 42);
    auto p = unflatten(a, theta);
    auto sample_std = [](const Mat& W, int count) {
        Rng rng(5);
        double s = 0, s2 = 0;
        for (int i = 0; i < count; ++i) {
            const double v = W.data()[rng.below(static_cast<std::uint64_t>(W.size()))];
            s += v;
            s2 += v * v;
        }
        const double mean = s / count;
        return std::sqrt(s2 / count - mean * mean);
    };
    CHECK(sample_std(p.W1, 100000) == doctest::Approx(1.0 / std::sqrt(784.0)).epsilon(0.05));
    CHECK(sample_std(p.W2, 100000) == doctest::Approx(1.0 / std::sqrt(4096.0)).epsilon(0.05));
    CHECK(p.b1.norm() == 0.0);
    CHECK(p.b2.norm() == 0.0);
    CHECK(p.b3.norm() == 0.0);
}

TEST_CASE("forward: zero network and identity chain") {
    Architecture a{4, 3, 2, Activation::relu};
    Vec theta = Vec::Zero(a.param_count());
    Vec x(4);
    x << 1, -2, 3, 4;
    CHECK(forward(a, theta, x).norm() == 0.0);

    Architecture id{1, 1, 1, Activation::relu};
    Params p;
    p.W1 = Mat::Ones(1, 1);
    p.b1 = Vec::Zero(1);
    p.W2 = Mat::Ones(1, 1);
    p.b2 = Vec::Zero(1);
    p.W3 = Mat::Ones(1, 1);
    p.b3 = Vec::Zero(1);
    Vec x1(1);
    x1 << 2.0;
    CHECK(forward(id, flatten(id, p), x1)[0] == doctest::Approx(2.0));
}

TEST_CASE("forward: dimension mismatch rejected") {
    Architecture a{4, 3, 2, Activation::relu};
    Vec theta = init_params(a, 1);
    CHECK_THROWS_AS(forward(a, theta, Vec::Zero(5)), ValidationError);
    CHECK_THROWS_AS(forward(a, Vec::Zero(3), Vec::Zero(4)), ValidationError);
}

TEST_CASE("forward: softplus approaches relu, oracle-bounded gap") {
    Rng rng(11);
    Architecture relu{6, 8, 2, Activation::relu};
    Vec theta = init_params(relu, 3);
    double prev_worst = std::numeric_limits<double>::infinity();
    for (double tau : {10.0, 50.0, 200.0}) {
        Architecture sp = relu;
        sp.activation = Activation::softplus;
        sp.temperature = tau;
        const double bound = oracles::softplus_gap_bound(sp, theta);
        double worst = 0.0;
        Rng local(17);
        for (int t = 0; t < 50; ++t) {
            Vec x = random_input(local, 6);
            worst = std::max(worst,
                             (forward(sp, theta, x) - forward(relu, theta, x)).cwiseAbs().maxCoeff());
        }
        CHECK(worst <= bound);
        CHECK(worst <= prev_worst + 1e-12);  // monotone shrink in tau
        prev_worst = worst;
    }
}

TEST_CASE("param_gradient: last layer is linear in its weights") {
    Architecture a = softplus_arch(5, 4, 2);
    Vec theta = init_params(a, 21);
    Rng rng(4);
    Vec x = random_input(rng, 5);
    Mat J = param_gradient(a, theta, x);
    auto p = unflatten(a, theta);

    // hidden activations after layer 2
    Vec h1 = (p.W1 * x + p.b1).unaryExpr([&](double z) {
        return std::log1p(std::exp(-std::abs(z * a.temperature))) / a.temperature + std::max(z, 0.0);
    });
    Vec h2 = (p.W2 * h1 + p.b2).unaryExpr([&](double z) {
        return std::log1p(std::exp(-std::abs(z * a.temperature))) / a.temperature + std::max(z, 0.0);
    });
    const ParamLayout L = ParamLayout::of(a);
    for (int c = 0; c < 2; ++c) {
        // dW3 block of row c, at column-major position (c, k)
        for (int k = 0; k < 4; ++k) {
            CHECK(J(c, L.w3 + k * L.c + c) == doctest::Approx(h2[k]).epsilon(1e-12));
            CHECK(J(1 - c, L.w3 + k * L.c + c) == 0.0);
        }
        CHECK(J(c, L.b3 + c) == doctest::Approx(1.0));
    }
}

TEST_CASE("param_gradient matches finite differences") {
    Architecture a = softplus_arch(5, 4, 2);
    Vec theta = init_params(a, 77);
    Rng rng(8);
    Vec x = random_input(rng, 5);
    Mat J = param_gradient(a, theta, x);
    Mat Jfd = oracles::fd_param_gradient(a, theta, x, 1e-4);
    CHECK(oracles::rel_err(J, Jfd) <= 1e-5);
}

TEST_CASE("param_gradient: dead input with relu") {
    Architecture a{4, 3, 1, Activation::relu};
    Vec theta = init_params(a, 5);
    Mat J = param_gradient(a, theta, Vec::Zero(4));
    const ParamLayout L = ParamLayout::of(a);
    CHECK(J.block(0, L.w1, 1, L.w * L.d).norm() == 0.0);
}

TEST_CASE("param_jvp: zero direction, Jacobian product, directional FD") {
    Architecture a = softplus_arch(6, 5, 3);
    Vec theta = init_params(a, 13);
    Rng rng(19);
    Vec x = random_input(rng, 6);
    CHECK(param_jvp(a, theta, x, Vec::Zero(theta.size())).norm() == 0.0);

    Vec v(theta.size());
    for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
    Vec got = param_jvp(a, theta, x, v);
    Mat J = param_gradient(a, theta, x);
    CHECK(oracles::rel_err(got, Vec(J * v)) <= 1e-10);
    CHECK(oracles::rel_err(got, oracles::fd_directional(a, theta, x, v)) <= 1e-5);
}

TEST_CASE("param_vjp: basis rows, transpose product, zero cotangent") {
    Architecture a = softplus_arch(4, 6, 3);
    Vec theta = init_params(a, 31);
    Rng rng(23);
    Vec x = random_input(rng, 4);
    Mat J = param_gradient(a, theta, x);
    for (int c = 0; c < 3; ++c) {
        Vec e = Vec::Zero(3);
        e[c] = 1.0;
        CHECK(oracles::rel_err(param_vjp(a, theta, x, e), Vec(J.row(c).transpose())) <= 1e-12);
    }
    Vec u(3);
    for (int i = 0; i < 3; ++i) u[i] = rng.normal();
    CHECK(oracles::rel_err(param_vjp(a, theta, x, u), Vec(J.transpose() * u)) <= 1e-10);
    CHECK(param_vjp(a, theta, x, Vec::Zero(3)).norm() == 0.0);
}

TEST_CASE("jvp/vjp adjoint identity") {
    Rng rng(3);
    for (int w : {2, 4, 8, 32}) {
        Architecture a = softplus_arch(7, w, 2);
        Vec theta = init_params(a, 100 + w);
        for (int t = 0; t < 10; ++t) {
            Vec x = random_input(rng, 7);
            Vec v(theta.size()), u(2);
            for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
            for (int i = 0; i < 2; ++i) u[i] = rng.normal();
            const double lhs = u.dot(param_jvp(a, theta, x, v));
            const double rhs = v.dot(param_vjp(a, theta, x, u));
            CHECK(oracles::rel_err(lhs, rhs) <= 1e-12);
        }
    }
}

TEST_CASE("input_grad_of_vjp: zeros, FD match, relu rejected") {
    Architecture a = softplus_arch(5, 4, 2);
    Vec theta = init_params(a, 55);
    Rng rng(29);
    Vec x = random_input(rng, 5);
    Vec u(2), r(theta.size());
    for (int i = 0; i < 2; ++i) u[i] = rng.normal();
    for (int i = 0; i < r.size(); ++i) r[i] = rng.normal();

    CHECK(input_grad_of_vjp(a, theta, x, u, Vec::Zero(theta.size())).norm() == 0.0);
    CHECK(input_grad_of_vjp(a, theta, x, Vec::Zero(2), r).norm() == 0.0);

    Vec got = input_grad_of_vjp(a, theta, x, u, r);
    Vec fd = oracles::fd_input_grad(a, theta, x, u, r);
    CHECK(oracles::rel_err(got, fd) <= 1e-4);

    Architecture rl = a;
    rl.activation = Activation::relu;
    CHECK_THROWS_AS(input_grad_of_vjp(rl, theta, x, u, r), ValidationError);
}

TEST_CASE("finite-difference sweep across widths") {
    Rng rng(404);
    int done = 0;
    for (int w : {2, 4, 8, 32}) {
        Architecture a = softplus_arch(6, w, 2);
        for (int t = 0; t < 10; ++t) {
            Vec theta = init_params(a, rng.next_u64());
            Vec x = random_input(rng, 6);
            Mat J = param_gradient(a, theta, x);
            CHECK(oracles::rel_err(J, oracles::fd_param_gradient(a, theta, x)) <= 1e-4);

            Vec v(theta.size()), u(2);
            for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
            for (int i = 0; i < 2; ++i) u[i] = rng.normal();
            CHECK(oracles::rel_err(param_jvp(a, theta, x, v), oracles::fd_directional(a, theta, x, v)) <=
                  1e-4);
            CHECK(oracles::rel_err(param_vjp(a, theta, x, u), Vec(J.transpose() * u)) <= 1e-10);
            CHECK(oracles::rel_err(input_grad_of_vjp(a, theta, x, u, v),
                                   oracles::fd_input_grad(a, theta, x, u, v)) <= 1e-4);
            ++done;
        }
    }
    CHECK(done == 40);
}

TEST_CASE("relu param_gradient matches FD away from kinks") {
    Rng rng(606);
    Architecture a{5, 8, 2, Activation::relu};
    int checked = 0;
    while (checked < 10) {
        Vec theta = init_params(a, rng.next_u64());
        Vec x = random_input(rng, 5);
        auto p = unflatten(a, theta);
        Vec z1 = p.W1 * x + p.b1;
        Vec z2 = p.W2 * z1.cwiseMax(0.0) + p.b2;
        if (z1.cwiseAbs().minCoeff() < 1e-3 || z2.cwiseAbs().minCoeff() < 1e-3) continue;
        Mat J = param_gradient(a, theta, x);
        CHECK(oracles::rel_err(J, oracles::fd_param_gradient(a, theta, x, 1e-6)) <= 1e-5);
        ++checked;
    }
}
