#pragma once

// Batched network core. Examples are matrix columns so every pass is a chain
// of GEMMs; everything is templated on the scalar so the attack can run in
// float32 when configured. All functions are pure given their inputs.

#include <cmath>

#include "ntklab/common.hpp"
#include "ntklab/nn.hpp"

namespace ntklab {

struct Act {
    Activation kind = Activation::relu;
    double tau = 200.0;

    static Act of(const Architecture& arch) { return {arch.activation, arch.temperature}; }
};

namespace detail {

template <typename S>
inline S softplus_stable(S z, S tau) {
    const S zt = z * tau;
    const S a = zt > S(0) ? zt : S(0);
    return (a + std::log1p(std::exp(-std::abs(zt)))) / tau;
}

template <typename S>
inline S sigmoid_stable(S zt) {
    if (zt >= S(0)) return S(1) / (S(1) + std::exp(-zt));
    const S e = std::exp(zt);
    return e / (S(1) + e);
}

}  // namespace detail

// H = sigma(Z), elementwise.
template <typename S>
void act_eval(const Act& act, const MatX<S>& Z, MatX<S>& H) {
    if (act.kind == Activation::relu) {
        H = Z.cwiseMax(S(0));
    } else {
        const S tau = static_cast<S>(act.tau);
        H = Z.unaryExpr([tau](S z) { return detail::softplus_stable<S>(z, tau); });
    }
}

// D = sigma'(Z).
template <typename S>
void act_deriv(const Act& act, const MatX<S>& Z, MatX<S>& D) {
    if (act.kind == Activation::relu) {
        D = (Z.array() > S(0)).template cast<S>().matrix();
    } else {
        const S tau = static_cast<S>(act.tau);
        D = Z.unaryExpr([tau](S z) { return detail::sigmoid_stable<S>(z * tau); });
    }
}

// D2 = sigma''(Z) = tau * s * (1 - s); softplus only.
template <typename S>
void act_second(const Act& act, const MatX<S>& Z, MatX<S>& D2) {
    require(act.kind == Activation::softplus,
            "mixed second derivative requires softplus activation");
    const S tau = static_cast<S>(act.tau);
    D2 = Z.unaryExpr([tau](S z) {
        const S s = detail::sigmoid_stable<S>(z * tau);
        return tau * s * (S(1) - s);
    });
}

// Read-only weight views over a flat parameter vector in canonical order.
template <typename S>
struct NetView {
    Eigen::Map<const MatX<S>> W1, W2, W3;
    Eigen::Map<const VecX<S>> b1, b2, b3;

    NetView(const ParamLayout& L, const S* t)
        : W1(t + L.w1, L.w, L.d),
          W2(t + L.w2, L.w, L.w),
          W3(t + L.w3, L.c, L.w),
          b1(t + L.b1, L.w),
          b2(t + L.b2, L.w),
          b3(t + L.b3, L.c) {}
};

// Mutable views for writing gradients into a flat buffer.
template <typename S>
struct NetViewMut {
    Eigen::Map<MatX<S>> W1, W2, W3;
    Eigen::Map<VecX<S>> b1, b2, b3;

    NetViewMut(const ParamLayout& L, S* t)
        : W1(t + L.w1, L.w, L.d),
          W2(t + L.w2, L.w, L.w),
          W3(t + L.w3, L.c, L.w),
          b1(t + L.b1, L.w),
          b2(t + L.b2, L.w),
          b3(t + L.b3, L.c) {}
};

// Forward state for a batch X (d x B). D1/D2 are sigma' caches, filled when
// want_derivs is set (needed by every derivative pass).
template <typename S>
struct ForwardPass {
    MatX<S> Z1, H1, D1, Z2, H2, D2, F;
};

template <typename S>
void forward_batch(const ParamLayout& L, const NetView<S>& net, const Act& act, const MatX<S>& X,
                   ForwardPass<S>& fp, bool want_derivs) {
    fp.Z1.noalias() = net.W1 * X;
    fp.Z1.colwise() += net.b1;
    act_eval<S>(act, fp.Z1, fp.H1);
    fp.Z2.noalias() = net.W2 * fp.H1;
    fp.Z2.colwise() += net.b2;
    act_eval<S>(act, fp.Z2, fp.H2);
    fp.F.noalias() = net.W3 * fp.H2;
    fp.F.colwise() += net.b3;
    if (want_derivs) {
        act_deriv<S>(act, fp.Z1, fp.D1);
        act_deriv<S>(act, fp.Z2, fp.D2);
    }
}

// Tangent state of a shared parameter-space direction v, for every column of
// the batch. TZ1/TZ2 are kept because the mixed input gradient reuses them.
template <typename S>
struct JvpPass {
    MatX<S> TZ1, TH1, TZ2, TH2, TF;  // TF is C x B: column j = (df/dtheta) v at x_j
};

template <typename S>
void jvp_batch(const ParamLayout& L, const NetView<S>& net, const NetView<S>& dir, const Act& act,
               const MatX<S>& X, const ForwardPass<S>& fp, JvpPass<S>& jp) {
    jp.TZ1.noalias() = dir.W1 * X;
    jp.TZ1.colwise() += dir.b1;
    jp.TH1 = fp.D1.cwiseProduct(jp.TZ1);
    jp.TZ2.noalias() = dir.W2 * fp.H1;
    jp.TZ2.noalias() += net.W2 * jp.TH1;
    jp.TZ2.colwise() += dir.b2;
    jp.TH2 = fp.D2.cwiseProduct(jp.TZ2);
    jp.TF.noalias() = dir.W3 * fp.H2;
    jp.TF.noalias() += net.W3 * jp.TH2;
    jp.TF.colwise() += dir.b3;
}

// Sum over the batch of per-example VJPs: grad += sum_j vjp(x_j, U.col(j)).
// U is C x B. With `accumulate` false the buffer is overwritten.
template <typename S>
void vjp_sum_batch(const ParamLayout& L, const NetView<S>& net, const Act& act, const MatX<S>& X,
                   const MatX<S>& U, const ForwardPass<S>& fp, VecX<S>& grad, bool accumulate = false) {
    if (grad.size() != L.total) grad.setZero(L.total);
    if (!accumulate) grad.setZero();
    NetViewMut<S> g(L, grad.data());
    MatX<S> A2 = (net.W3.transpose() * U).cwiseProduct(fp.D2);
    MatX<S> A1 = (net.W2.transpose() * A2).cwiseProduct(fp.D1);
    g.W3.noalias() += U * fp.H2.transpose();
    g.b3.noalias() += U.rowwise().sum();
    g.W2.noalias() += A2 * fp.H1.transpose();
    g.b2.noalias() += A2.rowwise().sum();
    g.W1.noalias() += A1 * X.transpose();
    g.b1.noalias() += A1.rowwise().sum();
}

// Gradient with respect to the inputs of sum_j r^T vjp(x_j, U.col(j)), where
// r is the shared tangent direction already propagated in `jp`. Softplus only
// (uses sigma''). Output is d x B; column j is the gradient for example j.
//
// Derivation: differentiate s = u^T [dir-directional derivative of f] through
// the augmented forward pass (Z, TZ) and backpropagate to X.
template <typename S>
void input_grad_batch(const ParamLayout& L, const NetView<S>& net, const NetView<S>& dir,
                      const Act& act, const MatX<S>& X, const MatX<S>& U, const ForwardPass<S>& fp,
                      const JvpPass<S>& jp, MatX<S>& gX) {
    MatX<S> S1, S2;  // sigma''
    act_second<S>(act, fp.Z1, S1);
    act_second<S>(act, fp.Z2, S2);

    MatX<S> bar_th2 = net.W3.transpose() * U;
    MatX<S> bar_h2 = dir.W3.transpose() * U;
    MatX<S> bar_tz2 = fp.D2.cwiseProduct(bar_th2);
    MatX<S> bar_z2 = S2.cwiseProduct(jp.TZ2).cwiseProduct(bar_th2) + fp.D2.cwiseProduct(bar_h2);
    MatX<S> bar_th1 = net.W2.transpose() * bar_tz2;
    MatX<S> bar_h1 = dir.W2.transpose() * bar_tz2;
    bar_h1.noalias() += net.W2.transpose() * bar_z2;
    MatX<S> bar_tz1 = fp.D1.cwiseProduct(bar_th1);
    MatX<S> bar_z1 = S1.cwiseProduct(jp.TZ1).cwiseProduct(bar_th1) + fp.D1.cwiseProduct(bar_h1);
    gX.noalias() = dir.W1.transpose() * bar_tz1;
    gX.noalias() += net.W1.transpose() * bar_z1;
}

}  // namespace ntklab
