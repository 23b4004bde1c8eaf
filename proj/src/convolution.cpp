#include "dq/convolution.hpp"

#include <cmath>
#include <stdexcept>

namespace dq {

int mi_abs(const MultiIndex& a) {
    int s = 0;
    for (int v : a) {
        if (v < 0) throw std::invalid_argument("multi-index entries must be >= 0");
        s += v;
    }
    return s;
}

bool mi_leq(const MultiIndex& b, const MultiIndex& a) {
    if (b.size() != a.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (b[i] > a[i]) return false;
    return true;
}

namespace {
double binom1(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
    return r;
}
} // namespace

double mi_binom(const MultiIndex& a, const MultiIndex& b) {
    double r = 1.0;
    for (std::size_t i = 0; i < a.size(); ++i) r *= binom1(a[i], b[i]);
    return r;
}

std::vector<MultiIndex> sub_multiindices(const MultiIndex& a) {
    std::vector<MultiIndex> out;
    MultiIndex b(a.size(), 0);
    while (true) {
        out.push_back(b);
        std::size_t i = 0;
        for (; i < a.size(); ++i) {
            if (b[i] < a[i]) {
                ++b[i];
                for (std::size_t k = 0; k < i; ++k) b[k] = 0;
                break;
            }
        }
        if (i == a.size()) break;
    }
    return out;
}

double vec_pow(const Vec& y, const MultiIndex& beta) {
    double r = 1.0;
    for (std::size_t i = 0; i < beta.size(); ++i)
        for (int k = 0; k < beta[i]; ++k) r *= y[i];
    return r;
}

ConvPlan::ConvPlan(const GridFunction& g) : h(g.step()), n(g.size()) {
    if (std::abs(g.start()) > 1e-12) throw std::invalid_argument("ConvPlan: w-axis must start at 0");
}

void ConvPlan::check(const GridFunction& g) const {
    if (g.size() != n || std::abs(g.step() - h) > 1e-12 * h || std::abs(g.start()) > 1e-12)
        throw std::invalid_argument("convolution: operand not on the shared w-axis");
    if (g.dim() != 1) throw std::invalid_argument("convolution: operands must be scalar");
}

GridFunction conv(const GridFunction& a, const GridFunction& b) {
    ConvPlan plan(a);
    plan.check(a);
    plan.check(b);
    GridFunction out(0.0, plan.h, plan.n, 1);
    out(0) = 0.0;
    for (std::size_t k = 1; k < plan.n; ++k) {
        double s = 0.5 * (a(k) * b(0) + a(0) * b(k));
        for (std::size_t i = 1; i < k; ++i) s += a(k - i) * b(i);
        out(k) = plan.h * s;
    }
    return out;
}

GridFunction conv_power(const std::vector<GridFunction>& A, const MultiIndex& alpha) {
    if (A.size() != alpha.size())
        throw std::invalid_argument("conv_power: component count must match multi-index length");
    if (mi_abs(alpha) < 1)
        throw std::invalid_argument("conv_power: |alpha| must be >= 1 (empty fold is the kernel passthrough)");
    const GridFunction* acc = nullptr;
    GridFunction result;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        for (int k = 0; k < alpha[i]; ++k) {
            if (!acc) {
                result = A[i];
                acc = &result;
            } else {
                result = conv(result, A[i]);
            }
        }
    }
    return result;
}

GridFunction conv_deriv_monomial(const GridFunction& b, double b0,
                                 const GridFunction& bprime,
                                 const std::vector<GridFunction>& A,
                                 const std::vector<GridFunction>& Aprime,
                                 const Vec& A0, const MultiIndex& alpha) {
    if (mi_abs(alpha) < 1) throw std::invalid_argument("conv_deriv_monomial: |alpha| must be >= 1");
    if (A.size() != alpha.size() || Aprime.size() != alpha.size() || A0.size() != alpha.size())
        throw std::invalid_argument("conv_deriv_monomial: component count mismatch");
    ConvPlan plan(b);
    plan.check(bprime);
    for (const auto& g : A) plan.check(g);
    for (const auto& g : Aprime) plan.check(g);

    GridFunction out = plan.zero();
    int abs_alpha = mi_abs(alpha);
    for (const MultiIndex& beta : sub_multiindices(alpha)) {
        double cb = mi_binom(alpha, beta) * vec_pow(A0, beta);
        MultiIndex gamma(alpha.size());
        for (std::size_t i = 0; i < alpha.size(); ++i) gamma[i] = alpha[i] - beta[i];
        int abs_gamma = abs_alpha - mi_abs(beta);
        if (abs_gamma >= 1) {
            GridFunction fold = conv_power(Aprime, gamma);
            if (b0 != 0.0)
                for (std::size_t k = 0; k < plan.n; ++k) out(k) += cb * b0 * fold(k);
            GridFunction bp = conv(bprime, fold);
            for (std::size_t k = 0; k < plan.n; ++k) out(k) += cb * bp(k);
        } else {
            // beta = alpha: the kernel passes through the empty fold
            for (std::size_t k = 0; k < plan.n; ++k) out(k) += cb * bprime(k);
        }
    }
    return out;
}

GridFunction multilinear_difference(const std::vector<GridFunction>& bs,
                                    const std::vector<GridFunction>& cs) {
    if (bs.empty() || bs.size() != cs.size())
        throw std::invalid_argument("multilinear_difference: need equal nonempty lists");
    if (bs.size() > 24) throw std::invalid_argument("multilinear_difference: list too long");
    ConvPlan plan(bs[0]);
    for (const auto& g : bs) plan.check(g);
    for (const auto& g : cs) plan.check(g);

    std::size_t L = bs.size();
    std::vector<GridFunction> diff(L);
    for (std::size_t l = 0; l < L; ++l) {
        diff[l] = bs[l];
        for (std::size_t k = 0; k < plan.n; ++k) diff[l](k) -= cs[l](k);
    }
    GridFunction out = plan.zero();
    for (std::size_t mask = 1; mask < (std::size_t{1} << L); ++mask) {
        GridFunction fold;
        bool first = true;
        int popcount = 0;
        for (std::size_t l = 0; l < L; ++l) {
            const GridFunction* g = nullptr;
            if (mask & (std::size_t{1} << l)) {
                g = &diff[l];
                ++popcount;
            } else {
                g = &bs[l];
            }
            if (first) {
                fold = *g;
                first = false;
            } else {
                fold = conv(fold, *g);
            }
        }
        double sign = (popcount % 2 == 1) ? 1.0 : -1.0;
        for (std::size_t k = 0; k < plan.n; ++k) out(k) += sign * fold(k);
    }
    return out;
}

} // namespace dq
