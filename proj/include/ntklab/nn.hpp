#pragma once

#include <cstdint>

#include "ntklab/common.hpp"

namespace ntklab {

enum class Activation { relu, softplus };

// Fixed topology: x -> W1,b1 -> sigma -> W2,b2 -> sigma -> W3,b3 -> output.
// Both hidden layers share the same width.
struct Architecture {
    int input_dim = 0;     // d
    int hidden_width = 0;  // w
    int output_dim = 1;    // C
    Activation activation = Activation::relu;
    double temperature = 200.0;  // softplus steepness; ignored for relu

    int param_count() const {
        const int d = input_dim, w = hidden_width, c = output_dim;
        return d * w + w + w * w + w + w * c + c;
    }
    void validate() const;
};

// Canonical flattening of the parameter state, layer-major:
//   [W1 | b1 | W2 | b2 | W3 | b3]
// with each weight matrix stored column-major (W1 is w x d, W2 is w x w,
// W3 is C x w). Every piece of code that does arithmetic on flat parameter
// vectors relies on this order.
struct ParamLayout {
    int d = 0, w = 0, c = 0;
    int w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0;  // segment offsets
    int total = 0;

    static ParamLayout of(const Architecture& arch);
};

// Convenience structured view (copies); flatten/unflatten are inverses.
struct Params {
    Mat W1;  // w x d
    Vec b1;  // w
    Mat W2;  // w x w
    Vec b2;  // w
    Mat W3;  // C x w
    Vec b3;  // C
};

Vec flatten(const Architecture& arch, const Params& p);
Params unflatten(const Architecture& arch, const Vec& theta);

// Weights ~ N(0, 1/fan_in) per layer, biases zero. Deterministic in seed.
Vec init_params(const Architecture& arch, std::uint64_t seed);

// f(x), a C-vector.
Vec forward(const Architecture& arch, const Vec& theta, const Vec& x);

// Jacobian of the outputs with respect to every parameter: C x P, row c is
// the gradient of output c, columns in canonical flattening order.
Mat param_gradient(const Architecture& arch, const Vec& theta, const Vec& x);

// (d f / d theta) . v without materializing the Jacobian. |v| = P.
Vec param_jvp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& v);

// u^T (d f / d theta) in one reverse pass. |u| = C, result length P.
Vec param_vjp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& u);

// Gradient with respect to x of the scalar r^T param_vjp(arch, theta, x, u).
// Requires softplus (the relu mixed second derivative is a.e. zero and
// unstable); throws ValidationError for relu.
Vec input_grad_of_vjp(const Architecture& arch, const Vec& theta, const Vec& x, const Vec& u,
                      const Vec& r);

}  // namespace ntklab
