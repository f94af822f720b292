#include "ntklab/nn.hpp"

#include "ntklab/nn_batch.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

void Architecture::validate() const {
    require(input_dim >= 1, "architecture: input_dim must be >= 1");
    require(hidden_width >= 1, "architecture: hidden_width must be >= 1");
    require(output_dim >= 1, "architecture: output_dim must be >= 1");
    if (activation == Activation::softplus)
        require(temperature > 0.0, "architecture: softplus temperature must be > 0");
}

ParamLayout ParamLayout::of(const Architecture& arch) {
    arch.validate();
    ParamLayout L;
    L.d = arch.input_dim;
    L.w = arch.hidden_width;
    L.c = arch.output_dim;
    L.w1 = 0;
    L.b1 = L.w1 + L.w * L.d;
    L.w2 = L.b1 + L.w;
    L.b2 = L.w2 + L.w * L.w;
    L.w3 = L.b2 + L.w;
    L.b3 = L.w3 + L.c * L.w;
    L.total = L.b3 + L.c;
    return L;
}

Vec flatten(const Architecture& arch, const Params& p) {
    const ParamLayout L = ParamLayout::of(arch);
    require(p.W1.rows() == L.w && p.W1.cols() == L.d && p.b1.size() == L.w &&
                p.W2.rows() == L.w && p.W2.cols() == L.w && p.b2.size() == L.w &&
                p.W3.rows() == L.c && p.W3.cols() == L.w && p.b3.size() == L.c,
            "flatten: parameter shapes do not match architecture");
    Vec theta(L.total);
    NetViewMut<double> v(L, theta.data());
    v.W1 = p.W1;
    v.b1 = p.b1;
    v.W2 = p.W2;
    v.b2 = p.b2;
    v.W3 = p.W3;
    v.b3 = p.b3;
    return theta;
}

Params unflatten(const Architecture& arch, const Vec& theta) {
    const ParamLayout L = ParamLayout::of(arch);
    require(theta.size() == L.total, "unflatten: parameter vector length mismatch");
    NetView<double> v(L, theta.data());
    return Params{v.W1, v.b1, v.W2, v.b2, v.W3, v.b3};
}

Vec init_params(const Architecture& arch, std::uint64_t seed) {
    const ParamLayout L = ParamLayout::of(arch);
    Vec theta = Vec::Zero(L.total);
    Rng rng(seed);
    NetViewMut<double> v(L, theta.data());
    const double s1 = 1.0 / std::sqrt(static_cast<double>(L.d));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(L.w));
    for (Eigen::Index i = 0; i < v.W1.size(); ++i) v.W1.data()[i] = s1 * rng.normal();
    for (Eigen::Index i = 0; i < v.W2.size(); ++i) v.W2.data()[i] = s2 * rng.normal();
    for (Eigen::Index i = 0; i < v.W3.size(); ++i) v.W3.data()[i] = s2 * rng.normal();
    // biases stay zero
    return theta;
}

namespace {

struct SingleEval {
    ParamLayout L;
    NetView<double> net;
    ForwardPass<double> fp;
    Mat X;

    SingleEval(const Architecture& arch, const Vec& theta, const Vec& x, bool want_derivs)
        : L(ParamLayout::of(arch)), net(L, theta.data()) {
        require(theta.size() == L.total, "parameter vector length mismatch");
        require(x.size() == L.d, "input dimension mismatch");
        X = x;
        forward_batch<double>(L, net, Act::of(arch), X, fp, want_derivs);
    }
};

}  // namespace

Vec forward(const Architecture& arch, const Vec& theta, const Vec& x) {
    SingleEval ev(arch, theta, x, false);
    return ev.fp.F.col(0);
}

Mat param_gradient(const Architecture& arch, const Vec& theta, const Vec& x) {
    SingleEval ev(arch, theta, x, true);
    const ParamLayout& L = ev.L;
    Mat J(L.c, L.total);
    Vec row(L.total);
    Mat U = Mat::Zero(L.c, 1);
    for (int c = 0; c < L.c; ++c) {
        U(c, 0) = 1.0;
        vjp_sum_batch<double>(L, ev.net, Act::of(arch), ev.X, U, ev.fp, row);
        J.row(c) = row.transpose();
        U(c, 0) = 0.0;
    }
    return J;
}

Vec param_jvp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& v) {
    SingleEval ev(arch, theta, x, true);
    require(v.size() == ev.L.total, "param_jvp: direction length mismatch");
    NetView<double> dir(ev.L, v.data());
    JvpPass<double> jp;
    jvp_batch<double>(ev.L, ev.net, dir, Act::of(arch), ev.X, ev.fp, jp);
    return jp.TF.col(0);
}

Vec param_vjp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& u) {
    SingleEval ev(arch, theta, x, true);
    require(u.size() == ev.L.c, "param_vjp: cotangent length mismatch");
    Vec grad(ev.L.total);
    Mat U = u;
    vjp_sum_batch<double>(ev.L, ev.net, Act::of(arch), ev.X, U, ev.fp, grad);
    return grad;
}

Vec input_grad_of_vjp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& u,
                      const Vec& r) {
    require(arch.activation == Activation::softplus,
            "input_grad_of_vjp: relu is rejected (discontinuous mixed second derivative)");
    SingleEval ev(arch, theta, x, true);
    require(u.size() == ev.L.c, "input_grad_of_vjp: cotangent length mismatch");
    require(r.size() == ev.L.total, "input_grad_of_vjp: direction length mismatch");
    NetView<double> dir(ev.L, r.data());
    JvpPass<double> jp;
    jvp_batch<double>(ev.L, ev.net, dir, Act::of(arch), ev.X, ev.fp, jp);
    Mat U = u;
    Mat gX;
    input_grad_batch<double>(ev.L, ev.net, dir, Act::of(arch), ev.X, U, ev.fp, jp, gX);
    return gX.col(0);
}

}  // namespace ntklab
