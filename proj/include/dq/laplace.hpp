#pragma once

#include "dq/grid.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace dq {

// Transform values at positive x nodes (strictly decreasing), one m-vector per node.
struct LaplaceSamples {
    std::vector<double> x_nodes;
    std::vector<Vec> values;
    std::optional<double> delta; // truncation used to generate them, if known

    void validate() const;
};

// Weights of (1/x) int_0^h e^{-u/x} (left (1-u/h) + right (u/h)) du for one
// segment, as functions of h/x; series branch keeps them accurate for h << x.
// A segment at offset w_k carries an extra factor e^{-w_k/x}.
struct SegWeights {
    double left, right;
};
SegWeights exp_segment_weights(double h_over_x);

// (1/x) int_0^W e^{-w/x} A(w) dw with A replaced by its piecewise-linear
// interpolant; the exponential factor is integrated exactly per segment, so
// the result is O(h^2) accurate uniformly in x, including x << h.
Vec laplace_forward(const GridFunction& A, double x);

// Node weights of the same rule: row r gives laplace_forward(A, xs[r]) as a
// dot product with A's nodes. Grid is n nodes, step h, starting at 0.
std::vector<std::vector<double>> laplace_forward_matrix(const std::vector<double>& xs,
                                                        double h, std::size_t n);

struct WeierstrassKernel {
    int j = 1;
    int N = 1;
    double eps = 1.0;
    double I_jN = 0.0; // int_1^{e^{eps N}} y^{j-1} e^{-y} dy
    double A_j = 0.0;  // int_1^inf  y^{j-1} e^{-y} dy

    double operator()(double t) const; // (N / I_jN) e^{N j t - e^{N t}}, log-space
};

// Kernel plus its samples on a uniform grid over [0, eps].
std::pair<WeierstrassKernel, GridFunction> weierstrass_kernel(int j, int N, double eps,
                                                              std::size_t n = 513);

// Kernel mass int_0^eps f_{j,N}, computed by adaptive quadrature of the
// pointwise kernel (not of the samples); equals 1 up to quadrature error.
double weierstrass_mass(const WeierstrassKernel& k);

// Estimate of a(shift) as int_0^{eps-shift} f_{j,N}(t) a(t+shift) dt, with a
// evaluated through its monotone-cubic interpolant.
double weierstrass_estimate(const GridFunction& a, int j, int N, double shift);

// Penalized least squares  min || K A - f ||^2 + mu || D2 A ||^2  on a w-grid
// of nw nodes over [0, delta]; D2 is the scaled second-difference matrix.
// mu < 0 selects the default 1e-8 * ||K||_F^2.
//
// With tail = true the model gains two columns e^{-delta/x} and x e^{-delta/x}
// (lightly ridged, coefficients discarded). Samples of a transform truncated
// at delta differ from the truncation by exactly such a remainder, so this
// keeps mass beyond delta from aliasing into the recovered density.
GridFunction inverse_laplace_regularized(const LaplaceSamples& samples, double delta,
                                         double mu, std::size_t nw = 513, bool tail = false);

struct DecayFit {
    double gamma = 0.0; // slope of log(residual) against -1/x
    double r2 = 0.0;
    std::size_t n_used = 0;
};

// Least-squares fit log r_i = c - gamma / x_i. Nonpositive, non-finite and
// underflowed residuals are dropped; at least 3 usable points required.
DecayFit fit_decay_rate(const std::vector<double>& x_nodes,
                        const std::vector<double>& residuals);

} // namespace dq
