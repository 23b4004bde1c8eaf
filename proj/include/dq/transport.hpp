#pragma once
// Characteristic charts, level reduction of the smoothing operation, the
// Picard fixed point for the trace-coupled transport system (both
// orientations), and the Gronwall comparator for uniqueness experiments.

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dq/grid.hpp"
#include "dq/numerics.hpp"
#include "dq/polynomial.hpp"

namespace dq {

// Chart for one transport speed lambda_j(t) >= c0 > 0 on [0, eps1]. The map
// H(u,v) follows the curve dw/dt = lambda_j(t): curves with u >= 0 enter the
// box through w = 0 at time u, curves with u <= 0 enter through t = 0 at
// height -u. v is the time elapsed since entry, so
//   H(u,v) = (u+v, Lambda(u+v) - Lambda(u))   for u >= 0,
//   H(u,v) = (v, -u + Lambda(v))              for u <= 0,
// with Lambda the running integral of lambda_j.
class CharacteristicChart {
public:
    CharacteristicChart(GridFunction lambda, double delta0, std::size_t j = 0);

    double eps1() const { return eps1_; }
    double delta0() const { return delta0_; }
    double c0() const { return c0_; }
    std::size_t index() const { return j_; }

    double Lambda(double t) const;
    double Lambda_inv(double s) const;

    double phi(double u, double v) const; // t component of H
    double psi(double u, double v) const; // w component of H
    std::pair<double, double> map(double u, double v) const;
    std::pair<double, double> unmap(double t, double w) const;

    // largest v such that map(u, v) stays in [0,eps1] x [0,delta0]
    double v_max(double u) const;
    // all pullbacks of box points land below this v
    double v_top() const;

private:
    GridFunction cum_;          // Lambda on the lambda grid
    MonotoneInterpolant lam_, Lam_;
    double eps1_ = 0.0, delta0_ = 0.0, c0_ = 0.0;
    std::size_t j_ = 0;
};

// One additive piece of a smoothing operation:
//   coeff(t) * [ kernel d_w^l b_k(t, ., z(t)) convolved with the listed field
//                factors ]  (truncated convolution, left to right)
// A factor (d, i) references component i of the d-fold w-antiderivative of
// the unknown row; d = -1 is its w-derivative. A block with no factors is a
// bare kernel, a block with one factor and no kernel is a bare field value.
struct SmoothBlock {
    int j = 0;                                 // output component
    std::function<double(double)> coeff;       // t-dependent scalar
    int kernel_term = -1;                      // index into spec->terms, -1: none
    int kernel_level = 0;                      // w-derivative order of the kernel
    std::vector<std::pair<int, int>> factors;  // (depth, component)
};

// Smoothing operation at a given level, acting on rows over w in [0, eps2].
// level 2 is the operation assembled straight from the polynomial data
// (factors at depth -1); each reduction shifts depths up by one and
// differentiates once in w, so the level 0 operation needs no numerical
// differentiation of its argument.
struct SmoothOp {
    int level = 2;
    std::size_t m = 1;
    const PolynomialSpec* spec = nullptr;
    std::function<Vec(double)> z_arg;                // kernel z argument
    std::function<Vec(double)> trace0;               // trace of the unknown
    std::vector<std::function<Vec(double)>> itraces; // traces of depths 1,2,...
    std::vector<SmoothBlock> blocks;

    GridFunction eval(double t, const GridFunction& row) const;
    // deriv / integrals override the reconstructed depth -1 / depth >= 1 rows
    // (used by the initial-value orientation, which evolves all levels).
    GridFunction eval(double t, const GridFunction& row, const GridFunction* deriv,
                      const std::vector<const GridFunction*>& integrals) const;
    Vec trace_at(double t) const; // w = 0 value
};

// Level-2 smoothing part of P-hat along the trace A0: everything except the
// transport term d_yP(t,0,A0,A0) d_w A.
SmoothOp smoothing_operation(const PolynomialSpec& spec, std::function<Vec(double)> A0);

// d/dw of op(I(trace, .)) where I integrates the new unknown from its trace:
// the operation one level down. new_trace is the trace of the derived
// unknown, needed for boundary terms when a derivative-free fold is
// differentiated.
SmoothOp differentiate_op(const SmoothOp& op, std::function<Vec(double)> new_trace);

struct ReducedOp {
    SmoothOp op;     // one level down
    GridFunction b0; // trace of the derived unknown
};
// Solves M(t) b0(t) = -phi0'(t) + op.trace_at(t) on the trace grid, then
// differentiates the operation with that trace.
ReducedOp reduce_level(const SmoothOp& op, const TraceData& phi0,
                       const std::vector<Eigen::MatrixXd>& M);

// Operation acting on one row at a time; what the Picard iteration consumes.
using RowOp = std::function<GridFunction(double, const GridFunction&)>;

RowOp as_row_op(const SmoothOp& op);

// Conjugates G into the frame X = R(t) C:  X |-> R' R^{-1} X + R G(R^{-1} X).
RowOp diagonalize_system(const RowOp& G, const Diagonalization& diag);

// Box depth for which the Picard operator is a strict contraction:
// min( c0 / (2 G2), c0 C4 / G1 ) where G1, G2 are bounds for the operation
// over fields of norm <= sqrt(m) * 2 C4.
double contraction_delta(double c0, double C4, double G1bound, double G2bound,
                         std::size_t m = 1);

struct OperationBounds {
    double G1 = 0.0;     // sup of |G(L)| over sampled fields of norm <= radius
    double G2 = 0.0;     // Lipschitz estimate at that radius
    double radius = 0.0;
};
OperationBounds estimate_operation_bounds(const RowOp& G, double eps1, double delta,
                                          std::size_t m, double radius,
                                          std::size_t n_samples = 50,
                                          std::uint64_t seed = 0x51ab5eedULL);

struct PicardOptions {
    std::size_t nt = 129;
    std::size_t nw = 0;  // 0: same as nt
    double tol = 1e-10;
    int max_iter = 200;
};

struct PicardResult {
    WField A;                        // fixed point on [0,eps1] x [0,delta0]
    int iters = 0;
    double rho_final = 0.0;          // last sup-metric update size
    double ratio_max = 0.0;          // largest observed contraction ratio
    std::vector<double> rho_history;
};

// Fixed point of T_j(L)(u,v) = L0_j(u) + int_0^v G_j(L o H^{-1})(H_j(u,v')) dv'
// over the given charts; L0 is the per-chart entry data (u >= 0: trace values,
// u <= 0: initial values). Throws on divergence (ratio >= 1 three times in a
// row).
PicardResult picard_solve_L0(const RowOp& G, const std::function<Vec(double)>& L0,
                             const std::vector<CharacteristicChart>& charts,
                             const PicardOptions& opts = {});

struct PhatOptions {
    std::size_t nw = 0;              // 0: match the trace grid size
    double tol = 1e-10;
    int max_iter = 200;
    std::size_t n_bound_samples = 50;
    std::size_t n_residual_rows = 7; // strong-form residual spot checks
};

struct PhatSolution {
    WField A, B, C;                  // field and its first two w-derivatives
    GridFunction b0, c0_trace;       // reduction traces
    GridFunction X0;                 // diagonal-frame level-0 trace
    double delta = 0.0;              // box depth used
    double contraction = 0.0;        // contraction_delta estimate
    OperationBounds bounds;
    double C4 = 0.0;
    int iters = 0;
    double ratio_max = 0.0, rho_final = 0.0;
    double residual_sup = 0.0;       // sampled |d_t A - P-hat(A)|
    double ratio_bound = 0.0;        // predicted (delta/c0) G2
};

// Trace-data orientation: prescribes A(t,0) = A0(t) and solves outward in w on
// [0,eps1] x [0,delta]. Reduces twice, diagonalizes, runs the chart Picard
// iteration, then integrates back up in w. A(t,0) = A0(t) holds exactly.
// Regime::Existence expects -d_yP positive at the trace; Regime::Uniqueness
// (+d_yP positive) is handled by solving the time-reversed negated problem
// and mapping back, so information still flows off the trace.
PhatSolution solve_phat_pde(const PolynomialSpec& spec, const TraceData& A0,
                            const Diagonalization& diag, double delta,
                            Regime regime = Regime::Existence, const PhatOptions& opts = {});

struct IvpOptions {
    std::size_t nt = 129;
    std::size_t nw = 0;   // 0: sized so the w spacing tracks the t spacing
    double tol = 1e-10;
    int max_iter = 120;
};

struct IvpSolution {
    WField A;             // on [0,t_end] x [0,delta_prime]; constant past the
                          // shrinking region boundary
    GridFunction trace;   // A(t,0), valid for t <= delta0
    GridFunction gamma0;  // max_j int_0^t lambda_j for the final coefficients
    double delta_prime = 0.0;
    double delta0 = 0.0;  // gamma0^{-1}(delta_prime), capped at t_end
    double t_end = 0.0;
    int iters = 0;
    double ratio_max = 0.0, rho_final = 0.0;
};

// Initial-data orientation (positive d_yP at the trace): prescribes A(0,.) on
// [0, delta_prime] and evolves forward; characteristics move toward w = 0 and
// the trace A(t,0) is part of the answer. The transport matrix, its
// diagonalization and all trace coefficients are refreshed from the current
// iterate, so the fixed point solves the full trace-coupled problem.
IvpSolution solve_phat_ivp(const PolynomialSpec& spec, const GridFunction& A_init,
                           double t_max, const IvpOptions& opts = {});

struct GronwallReport {
    GridFunction E;              // sup_{w <= delta_prime - gamma0(t)} |A - B|
    double delta_prime = 0.0;    // detected initial agreement prefix
    double delta0 = 0.0;         // gamma0^{-1}(delta_prime), capped at eps1
    double trace_sup = 0.0;      // sup_{t <= delta0} |A(t,0) - B(t,0)|
    bool traces_agree = false;   // trace_sup <= verdict_tol
    double growth_rate = 0.0;    // largest observed d/dt log E
};

// Compares two fields on a shared grid: detects how far their t = 0 rows
// agree, then tracks the sup difference over the shrinking region where that
// agreement still pins the solution down.
GronwallReport gronwall_compare(const WField& A, const WField& B, const PolynomialSpec& spec,
                                const Diagonalization& diag, double agree_tol = 1e-10,
                                double verdict_tol = 1e-6);

} // namespace dq
