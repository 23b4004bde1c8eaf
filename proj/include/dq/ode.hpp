#pragma once

#include "dq/grid.hpp"
#include "dq/polynomial.hpp"

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <vector>

namespace dq {

struct TexpResult {
    Eigen::MatrixXd E;      // value at the right endpoint; E(a) = I by construction
    std::size_t steps = 0;
    double h_min = 0.0, h_max = 0.0;
};

// Solves Edot = -(1/x) M(s) E (or Edot = +M(s) E when no scale is given) on
// [a,b] by implicit midpoint with step doubling and local extrapolation.
// rel_tol controls the accumulated error estimate.
TexpResult texp(const std::function<Eigen::MatrixXd(double)>& Mfun, double a, double b,
                std::optional<double> x = std::nullopt, double rel_tol = 1e-10);

struct DecayCheck {
    Vec x_nodes;              // tested, descending
    std::vector<char> holds;  // per node: envelope satisfied for all t
    Vec sup_ratio;            // max over t of ||E(t)|| / envelope(t)
    double x_star = 0.0;      // largest tested x where the bound holds (0 if none)
};

// Checks ||E(t)|| <= ||R(t)^{-1}|| ||R(0)|| exp(-(delta/x) int_0^t lambda0)
// along the implicit-midpoint trajectory of Edot = -(1/x) M(t,x) E, for each
// grid x; report-only.
DecayCheck texp_decay_check(const std::function<Eigen::MatrixXd(double, double)>& Mfun,
                            const Diagonalization& diag, double delta, const Vec& x_grid);

struct OdeTrajectory {
    GridFunction f;          // on the trace's t-axis, dim m
    bool box_exit = false;   // solution left the V box; values frozen from there on
    double exit_time = 0.0;
    std::size_t substeps = 0;
};

// Integrates d/dt f = [P(t,x,f,a(t)) - P(t,0,a(t),a(t))]/x + G(t,x,f,a(t)) at
// fixed x > 0, treating the trace a(t) as given data. Implicit midpoint with
// the analytic Jacobian d_yP/x; substep size u = h|d_yP|/x is held near
// sqrt(8 tol) so the accumulated midpoint error stays below tol.
OdeTrajectory solve_main_ode_fixed_x(const PolynomialSpec& spec, const GridFunction& a_trace,
                                     const Vec& f0x, double x, double tol = 1e-7);

// e^{-t/x} f0(x) + (1/x) int_0^t e^{(s-t)/x} a(s) ds, product quadrature on
// a_trace's segments (piecewise-linear a), partial leading segment when t is
// off-grid.
Vec linear_exist_closed_form(const Vec& f0x, const GridFunction& a_trace, double t, double x);

// e^{-eps1/x} f_end + (1/x) int_0^{eps1} e^{-u/x} a(u) du, same quadrature.
Vec linear_unique_initial(const Vec& f_end, const GridFunction& a_trace, double x, double eps1);

using FieldMatrixFn = std::function<Eigen::MatrixXd(double t, double x, const Vec& z)>;
using FieldVecFn = std::function<Vec(double t, double x, const Vec& z)>;

struct PerturbationResult {
    XField g;
    double delta = 0.0;       // a-priori radius: min(gamma, eps * lambda_star / (2 C))
    double lambda_star = 0.0; // inf_t of the smallest eigenvalue of sym M(t,0,0)
    double C_sup = 0.0;       // sampled sup |G1| over the sampling box
    double gamma = 0.0;       // sampled radius keeping sym M >= lambda_star / 2
    struct Violation {
        double x, t, value;
    };
    std::vector<Violation> violations; // nodes x <= delta where sup_t |g| > eps
    bool ok = true;                    // no violations
};

// Per-x implicit integration of gdot = -(1/x) M(t,x,g) g + G1(t,x,g) from
// g(0,x) = g0(x); validates that M(t,0,0) has positive real eigenvalues and
// reports the a-priori radius delta below which sup_t |g| must stay <= eps.
PerturbationResult solve_perturbation_g(const FieldMatrixFn& Mfun, const FieldVecFn& G1fun,
                                        const GridFunction& g0, const Vec& x_grid,
                                        double t_max, std::size_t nt, double eps,
                                        double tol = 1e-7);

} // namespace dq
