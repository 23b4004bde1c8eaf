#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dq/grid.hpp"
#include "dq/laplace.hpp"
#include "dq/ode.hpp"
#include "dq/polynomial.hpp"
#include "dq/transport.hpp"

namespace dq {

// A runnable experiment: coefficient data, boundary/initial data, grids and
// the constants the verdicts reference. Built-in instances come from
// builtin_scenario(); the config layer fills the same struct from JSON.
struct ScenarioConfig {
    std::string tag;    // linear-exist | linear-unique | poly-scalar | borg | calderon-ti | custom
    std::string title;  // one-line catalog description

    PolynomialSpec spec;
    Regime regime = Regime::Existence;

    std::function<Vec(double)> a_trace;  // t -> f(t,0)
    std::function<Vec(double)> a_dot;    // optional derivatives (finite
    std::function<Vec(double)> a_ddot;   // differences when absent)
    std::function<Vec(double)> f0;       // x -> f(0,x)
    std::function<Vec(double)> density0; // w -> A(0,w)
    std::function<Vec(double, double)> f_true; // optional reference (t,x) -> f

    double eps1 = 1.0;      // time horizon of the data
    double delta_cap = 0.0; // 0 = truncate the density at eps2, else at this
    double r_default = 0.3; // stability agreement width
    std::vector<double> gammas{0.5, 0.8, 0.9};
    std::vector<double> char_t_samples;  // t rows for the residual sup (empty =
                                         // {0, 0.025, 0.05} * eps1)

    std::size_t nt = 129, nw = 129;
    std::vector<double> x_nodes; // descending
    std::uint64_t seed = 0x51ab5eedULL;
    double tol_picard = 1e-10; // fixed-point solves
    double tol_ode = 1e-8;     // per-x integrations

    std::function<double(double)> borg_q; // potential for the borg variant
    double borg_tmax = 0.0;               // backward horizon (0 = 10 * max x)
};

// Built-in configs by tag; throws std::invalid_argument on unknown tags.
ScenarioConfig builtin_scenario(const std::string& tag);

// (tag, title) pairs for the five built-ins, in catalog order.
std::vector<std::pair<std::string, std::string>> scenario_catalog();

// Checks the sign hypothesis along the trace: eigenvalues of -dyP (existence)
// or +dyP (uniqueness) positive at sampled t. Throws std::domain_error when
// violated.
void validate_regime(const ScenarioConfig& cfg);

struct ForwardResult {
    WField A;      // evolved density
    XField f;      // assembled solution: Laplace part plus perturbation
    XField f_ode;  // cross-check field from direct per-column integration
    XField g;      // the perturbation alone
    double delta = 0.0;        // truncation width actually used
    double delta0 = 0.0;       // time horizon covered
    double contraction = 0.0;  // contraction_delta from measured bounds
    double residual_sup = 0.0; // finite-difference residual of the equation
    double cross_sup = 0.0;    // sup |f - f_ode|
    double ratio_max = 0.0;    // observed Picard ratio
    double ratio_bound = 0.0;  // (delta/c0) * G2 estimate
    double pert_radius = 0.0;  // x-range the perturbation bound certifies
};

// Existence pipeline: evolve the density, assemble the Laplace part, then
// solve for the perturbation g with the truncation defect folded into its
// forcing so that f = L[A] + g solves the equation up to quadrature error.
ForwardResult run_forward_problem(const ScenarioConfig& cfg);

struct RateVerdict {
    double gamma = 0.0;
    double required = 0.0; // gamma * target
    bool pass = false;
};

struct CharacterizationResult {
    WField A;
    std::vector<double> x_nodes;  // descending, matching cfg
    std::vector<double> residual; // sup over sampled t of |f - L[A]| per node
    DecayFit fit;                 // on the nodes above the noise floor
    double target = 0.0;          // min(delta ^ eps2, int lambda0)
    double delta = 0.0;
    double contraction = 0.0; // width the density solve settled on
    double delta0 = 0.0;      // gamma0^{-1}(delta) clipped to eps1
    bool conclusive = false; // fit.r2 >= 0.9
    std::vector<RateVerdict> verdicts;
};

// Measures how fast f - L[A(t,.)] decays in 1/x and compares the fitted rate
// against gamma * min(delta ^ eps2, int lambda0) for each configured gamma.
// Uses cfg.f_true when present, otherwise the forward pipeline's field.
CharacterizationResult run_characterization(const ScenarioConfig& cfg);

struct ReconstructionResult {
    GridFunction recovered; // trace on [0, t_end]
    GridFunction truth;     // cfg trace on the same axis
    double sup_err = 0.0;   // |recovered - truth| on [0, delta0]
    double delta0 = 0.0;    // first-block validity window
    double t_end = 0.0;
    double invert_err = 0.0; // step (i): density error at t = 0
    double evolve_err = 0.0; // step (ii): trace error over all blocks
    double ode_err = 0.0;    // step (iii): field error at sampled nodes
    XField f;                // step (iii) output, first block
    std::size_t blocks = 0;
};

// Recovers the boundary trace from f(0,.) samples alone: regularized Laplace
// inversion, density evolution in the initial-data orientation, then direct
// integration in t at each x; repeats on a second t-block seeded by the
// integrated field. noise is the std dev of Gaussian jitter on the samples.
ReconstructionResult run_reconstruction(const ScenarioConfig& cfg, double noise = 0.0,
                                        std::size_t blocks = 2);

struct StabilityResult {
    GronwallReport report;
    double window = 0.0;       // gamma0^{-1}(min(r, delta_prime))
    double agree_sup = 0.0;    // trace difference inside the window
    double diverge_time = -1.0; // first t with trace difference >= 10 * tol
    double r = 0.0;
};

// Evolves two initial densities agreeing on [0, r) and checks that the traces
// agree on the shrinking window the comparison argument certifies. density_b
// defaults to cfg.density0 plus a C^2 bump supported past r.
StabilityResult run_stability(const ScenarioConfig& cfg, double r,
                              const std::function<Vec(double)>& density_b = {});

// Ground truth for the inverse spectral instance: for each x integrates the
// Riccati equation m' = q - z - m^2 at z = -(2x)^{-2} backward from a
// decaying-branch seed, then assembles f(t,x) = -(m(t,z) + (2x)^{-1}) / x.
// zero_trace is set to q. Throws on blow-up (seed on the wrong branch) and
// when some x is too large for the branch condition (2x)^{-1} > 2 sup|q|^{1/2}.
XField mfunction_forward(const GridFunction& q, const std::vector<double>& x_nodes,
                         double t_max = 0.0);

// Residual of the difference-quotient equation with P(x,y) = x^2 y^2 + y,
// time derivative by central differences; same axes as f.
XField mfunction_residual(const XField& f);

// Conductivity translation: upper-triangle encoding v_{ab} = sqrt(B(e_a+e_b))
// of the quadratic form B(xi) = xi^T adj(g) xi, pairs ordered (1,1), (1,2),
// ..., (1,n), (2,2), ... The encoding determines adj(g) and hence
// F(v) = det(adj g)^{-1/(2(n-1))} = |g|^{-1/2}.
Vec calderon_encode(const Eigen::MatrixXd& g);
double calderon_F(const Vec& v, int n = 2);

// Builds the m = n(n+1)/2 component uniqueness-regime config with
// P_j(t,x,y,z) = F(z) y_j^2 and boundary trace v(t) = calderon_encode(g(t)).
ScenarioConfig calderon_instance(const std::function<Eigen::MatrixXd(double)>& g_family,
                                 int n = 2);

} // namespace dq
