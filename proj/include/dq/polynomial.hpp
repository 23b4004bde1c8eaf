#pragma once

#include "dq/convolution.hpp"
#include "dq/grid.hpp"

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dq {

using CoeffFn = std::function<double(double t, double w, const Vec& z)>;
using TraceFn = std::function<double(double t, const Vec& z)>;

struct Box {
    Vec lo, hi;
    double margin = 1e-9;
    bool contains(const Vec& y) const;
    Vec center() const;
    Vec corner(std::size_t mask) const;
};

// One monomial term c_{alpha,j}(t,x,z) y^alpha of component j, carried by its
// Laplace density b(t,w,z) together with the w-derivatives the calculus needs.
// When xpoly is nonempty the x-side coefficient is evaluated exactly as
// sum_l xpoly[l](t,z) x^l (and b is the matching polynomial density).
struct PolyTerm {
    MultiIndex alpha;
    int j = 0;
    CoeffFn b, db, d2b;
    CoeffFn d3b;        // optional; empty selects a finite-difference fallback of d2b
    TraceFn b0, db0;    // w=0 traces of b and d_w b
    TraceFn d2b0;       // w=0 trace of d2b (for the first-derivative trace formulas)
    std::vector<TraceFn> xpoly;
    bool db_zero = false; // d_w b identically zero: smoothing blocks drop out
};

// c(t,x,z) = sum_l coefs[l] x^l with constant coefficients.
PolyTerm make_xpoly_term(MultiIndex alpha, int j, const std::vector<double>& coefs);
// Same with (t,z)-dependent coefficients.
PolyTerm make_xpoly_term_fn(MultiIndex alpha, int j, std::vector<TraceFn> coefs);
// General density term; derivative callbacks required up to order 2, optional order 3.
PolyTerm make_density_term(MultiIndex alpha, int j, CoeffFn b, CoeffFn db, CoeffFn d2b,
                           CoeffFn d3b = {});

struct PolynomialSpec {
    std::size_t m = 1;
    int D = 1;
    std::vector<PolyTerm> terms;
    Box U, V;
    double eps2 = 1.0;
    double t_max = 1.0;          // sampling range for the recorded constants
    std::size_t laplace_n = 513; // density resolution behind eval_c
    double C0 = 0.0;             // sampled sup of densities/derivatives/traces
    bool lipschitz_data = false; // z-Lipschitz hypothesis asserted by the caller
    double lipschitz_const = 0.0; // sampled estimate when asserted
    std::function<Vec(double t, double x, const Vec& y, const Vec& z)> remainder; // optional G

    const PolyTerm* find(const MultiIndex& alpha, int j) const;
};

PolynomialSpec make_spec(std::size_t m, std::vector<PolyTerm> terms, Box U, Box V,
                         double eps2, double t_max = 1.0, bool lipschitz = false);

// x-side coefficient: exact polynomial when the term carries one, otherwise
// the product-quadrature Laplace transform of the sampled density. x=0 falls
// back to the trace b(t,0,z).
double eval_c(const PolynomialSpec& spec, const PolyTerm& term, double t, double x, const Vec& z);
double eval_c(const PolynomialSpec& spec, const MultiIndex& alpha, int j, double t, double x,
              const Vec& z);

// d_w^level of the density at (t,w,z), level in 0..3; level 3 falls back to a
// finite difference of d2b when the callback is absent.
double kernel_eval(const PolynomialSpec& spec, const PolyTerm& term, int level, double t,
                   double w, const Vec& z);

Vec eval_P(const PolynomialSpec& spec, double t, double x, const Vec& y, const Vec& z);
Eigen::MatrixXd jacobian_dyP(const PolynomialSpec& spec, double t, double x, const Vec& y,
                             const Vec& z);

// P-hat(t, A(t,.), A0t)(w) on A_row's axis: transport part d_yP(t,0,A(0),A0t) A'
// plus the smoothing sums, assembled from the exact derivative identities.
GridFunction assemble_phat(const PolynomialSpec& spec, const GridFunction& A_row,
                           const Vec& A0t, double t);

// w=0 trace of the smoothing part, given the boundary values A0(t).
GridFunction smoothing_G0(const PolynomialSpec& spec, const GridFunction& A0values);
// w=0 trace of its first w-derivative, given A0(t) and B0(t) = d_w A(t,0).
GridFunction smoothing_G1(const PolynomialSpec& spec, const GridFunction& A0values,
                          const GridFunction& B0values);

enum class Regime { Existence, Uniqueness }; // M = -d_yP vs +d_yP at the trace

// M(t) = -/+ d_yP(t, 0, A0(t), A0(t)) on the t-grid of A0values.
std::vector<Eigen::MatrixXd> trace_transport_matrix(const PolynomialSpec& spec,
                                                    const GridFunction& A0values,
                                                    Regime regime);

struct SmoothingTraces {
    GridFunction G0; // trace of the smoothing part
    GridFunction B0; // M(t)^{-1} [ -A0'(t) + G0(t) ]
    GridFunction G1; // trace of its first w-derivative at that B0
};
SmoothingTraces smoothing_traces(const PolynomialSpec& spec, const TraceData& A0,
                                 Regime regime = Regime::Existence);

struct PhatDifference {
    Eigen::MatrixXd transport; // d_yP(t,0,A(0),A(0))
    GridFunction F;            // P-hat(A) - P-hat(B) - transport * g'
    double C_est = 0.0;        // max_w |F(w)| / sup_{r<=w} |g(r)|
};
// Difference assembled multilinearly in g = A - B (no catastrophic
// cancellation); requires the spec's Lipschitz data flag.
PhatDifference phat_difference_bound(const PolynomialSpec& spec, const GridFunction& A_row,
                                     const GridFunction& B_row, double t);

struct Diagonalization {
    GridFunction lambda;              // eigenvalue curves, dim m over t
    GridFunction lambda0;             // min_j lambda_j(t)
    GridFunction gamma0;              // int_0^t max_j lambda_j
    GridFunction Lambda;              // per-j cumulative integrals, dim m
    std::vector<Eigen::MatrixXd> R, Rinv, Rdot; // per t-node
    double c0 = 0.0;                  // min over nodes of lambda0
    double C1 = 0.0, C2 = 0.0, C3 = 0.0, C4 = 0.0;

    double ht() const { return lambda.step(); }
    std::size_t nt() const { return lambda.size(); }
    std::size_t m() const { return lambda.dim(); }
    Eigen::MatrixXd R_at(double t) const;    // linear interpolation between nodes
    Eigen::MatrixXd Rinv_at(double t) const;
};

// Build and validate a diagonalization of M(t): per-node eigendecomposition
// with continuity-preserving ordering; requires real positive eigenvalues.
// R M R^{-1} must come out diagonal within 1e-8 and R Rinv = I within 1e-10.
Diagonalization make_diagonalization(const std::function<Eigen::MatrixXd(double)>& Mfun,
                                     double ht, std::size_t nt);

double matrix_norm2(const Eigen::MatrixXd& A);

} // namespace dq
