#pragma once

#include "dq/grid.hpp"

#include <vector>

namespace dq {

using MultiIndex = std::vector<int>;

int mi_abs(const MultiIndex& a);
bool mi_leq(const MultiIndex& b, const MultiIndex& a);          // b <= a componentwise
double mi_binom(const MultiIndex& a, const MultiIndex& b);      // prod C(a_i, b_i)
std::vector<MultiIndex> sub_multiindices(const MultiIndex& a);  // all beta <= a
double vec_pow(const Vec& y, const MultiIndex& beta);           // prod y_i^beta_i

// Shared w-axis all convolution operands must live on ([0, W], trapezoid rule).
struct ConvPlan {
    double h = 1.0;
    std::size_t n = 0;

    ConvPlan() = default;
    ConvPlan(double h_, std::size_t n_) : h(h_), n(n_) {}
    explicit ConvPlan(const GridFunction& g);
    void check(const GridFunction& g) const;
    GridFunction zero() const { return GridFunction(0.0, h, n, 1); }
};

// Truncated convolution (a conv b)(w) = int_0^w a(w-r) b(r) dr, trapezoid
// product sum. Value at w=0 is exactly 0; rule is symmetric in a,b.
GridFunction conv(const GridFunction& a, const GridFunction& b);

// Fold of conv over the components of A with multiplicities alpha; |alpha|=1
// returns the single component unchanged.
GridFunction conv_power(const std::vector<GridFunction>& A, const MultiIndex& alpha);

// (|alpha|+1)-st w-derivative of b conv (conv^alpha A), assembled from the
// exact identity
//   sum_{beta<=alpha,|beta|<|alpha|} C(a,b) b(0) A(0)^beta (conv^{alpha-beta} A')
// + sum_{beta<=alpha} C(a,b) A(0)^beta (b' conv conv^{alpha-beta} A')
// with the beta=alpha summand meaning A(0)^alpha * b'(w). No numerical
// differentiation is performed. A is accepted for axis validation only; the
// identity consumes Aprime and A0.
GridFunction conv_deriv_monomial(const GridFunction& b, double b0,
                                 const GridFunction& bprime,
                                 const std::vector<GridFunction>& A,
                                 const std::vector<GridFunction>& Aprime,
                                 const Vec& A0, const MultiIndex& alpha);

// b_1 conv ... conv b_L - c_1 conv ... conv c_L expanded multilinearly:
// sum over nonempty J of (-1)^{|J|+1} (conv_{l in J}(b_l-c_l)) conv (conv_{l notin J} b_l).
// Avoids the catastrophic cancellation of subtracting two nearly equal folds.
GridFunction multilinear_difference(const std::vector<GridFunction>& bs,
                                    const std::vector<GridFunction>& cs);

} // namespace dq
