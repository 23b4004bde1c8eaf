#pragma once

#include "dq/grid.hpp"

#include <cstdint>
#include <functional>

namespace dq {

// Second-order finite differences on the uniform grid (centered inside,
// one-sided 3/4-point stencils at the ends). order is 1 or 2.
GridFunction finite_diff(const GridFunction& f, int order);

// Trapezoid antiderivative with F(start) = 0.
GridFunction cumulative_integral(const GridFunction& f);

enum class InterpKind { MonotoneCubic, Linear };

// Evaluate f at point p inside [start, end]. MonotoneCubic is the
// Fritsch-Carlson shape-preserving cubic; both kinds are exact on the nodes.
Vec interp(const GridFunction& f, double p, InterpKind kind = InterpKind::MonotoneCubic);
double interp_scalar(const GridFunction& f, double p,
                     InterpKind kind = InterpKind::MonotoneCubic);

// Scalar monotone-cubic interpolant with cached slopes; supports inversion
// when the data is strictly monotone.
class MonotoneInterpolant {
public:
    explicit MonotoneInterpolant(const GridFunction& f, std::size_t comp = 0);
    double operator()(double p) const;
    double derivative(double p) const;
    // Solve (*this)(t) = y by bisection + Newton polish; requires strict
    // monotonicity of the node values.
    double invert(double y) const;

private:
    double start_, h_;
    std::vector<double> y_, d_;
    std::size_t segment(double p) const;
};

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol, int max_depth = 40);

// Run fn(i) for i in [0,n); chunked across at most nthreads threads.
// Results must be written to disjoint slots so the order of execution
// cannot change the output.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned nthreads);

unsigned resolve_thread_count(unsigned requested); // 0 = auto (env, then hw)

std::vector<double> log_spaced(double lo, double hi, std::size_t n); // descending

} // namespace dq
