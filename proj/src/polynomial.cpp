#include "dq/polynomial.hpp"
#include "dq/laplace.hpp"
#include "dq/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace dq {

bool Box::contains(const Vec& y) const {
    if (y.size() != lo.size()) return false;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] < lo[i] - margin || y[i] > hi[i] + margin) return false;
    return true;
}

Vec Box::center() const {
    Vec c(lo.size());
    for (std::size_t i = 0; i < lo.size(); ++i) c[i] = 0.5 * (lo[i] + hi[i]);
    return c;
}

Vec Box::corner(std::size_t mask) const {
    Vec c(lo.size());
    for (std::size_t i = 0; i < lo.size(); ++i) c[i] = (mask >> i) & 1 ? hi[i] : lo[i];
    return c;
}

PolyTerm make_xpoly_term(MultiIndex alpha, int j, const std::vector<double>& coefs) {
    std::vector<TraceFn> fns;
    fns.reserve(coefs.size());
    for (double c : coefs)
        fns.push_back([c](double, const Vec&) { return c; });
    return make_xpoly_term_fn(std::move(alpha), j, std::move(fns));
}

PolyTerm make_xpoly_term_fn(MultiIndex alpha, int j, std::vector<TraceFn> coefs) {
    if (coefs.empty()) throw std::invalid_argument("xpoly term needs at least one coefficient");
    PolyTerm t;
    t.alpha = std::move(alpha);
    t.j = j;
    t.xpoly = coefs;
    auto evalw = [coefs](int drop, double tt, double w, const Vec& z) {
        double s = 0.0;
        for (std::size_t l = static_cast<std::size_t>(drop); l < coefs.size(); ++l) {
            double term = coefs[l](tt, z);
            int p = static_cast<int>(l) - drop;
            for (int k = 1; k <= p; ++k) term *= w / static_cast<double>(k);
            s += term;
        }
        return s;
    };
    t.b = [evalw](double tt, double w, const Vec& z) { return evalw(0, tt, w, z); };
    t.db = [evalw](double tt, double w, const Vec& z) { return evalw(1, tt, w, z); };
    t.d2b = [evalw](double tt, double w, const Vec& z) { return evalw(2, tt, w, z); };
    t.d3b = [evalw](double tt, double w, const Vec& z) { return evalw(3, tt, w, z); };
    t.b0 = [coefs](double tt, const Vec& z) { return coefs[0](tt, z); };
    t.db0 = [coefs](double tt, const Vec& z) {
        return coefs.size() > 1 ? coefs[1](tt, z) : 0.0;
    };
    t.d2b0 = [coefs](double tt, const Vec& z) {
        return coefs.size() > 2 ? coefs[2](tt, z) : 0.0;
    };
    t.db_zero = coefs.size() <= 1;
    return t;
}

PolyTerm make_density_term(MultiIndex alpha, int j, CoeffFn b, CoeffFn db, CoeffFn d2b,
                           CoeffFn d3b) {
    if (!b || !db || !d2b)
        throw std::invalid_argument("density term requires b and its first two w-derivatives");
    PolyTerm t;
    t.alpha = std::move(alpha);
    t.j = j;
    t.b = b;
    t.db = db;
    t.d2b = d2b;
    t.d3b = std::move(d3b);
    t.b0 = [b](double tt, const Vec& z) { return b(tt, 0.0, z); };
    t.db0 = [db](double tt, const Vec& z) { return db(tt, 0.0, z); };
    t.d2b0 = [d2b](double tt, const Vec& z) { return d2b(tt, 0.0, z); };
    return t;
}

const PolyTerm* PolynomialSpec::find(const MultiIndex& alpha, int j) const {
    for (const auto& t : terms)
        if (t.j == j && t.alpha == alpha) return &t;
    return nullptr;
}

// d_w^level of the density; level 3 falls back to finite differences of d2b
// when the callback is absent (flagged lower-accuracy in the docs).
double kernel_eval(const PolynomialSpec& spec, const PolyTerm& term, int level,
                   double t, double w, const Vec& z) {
    switch (level) {
        case 0: return term.b(t, w, z);
        case 1: return term.db(t, w, z);
        case 2: return term.d2b(t, w, z);
        case 3: {
            if (term.d3b) return term.d3b(t, w, z);
            double h = std::max(1e-5, 1e-7 * spec.eps2);
            double wl = w - h, wr = w + h;
            if (wl < 0.0) { wl = w; wr = w + 2.0 * h; }
            if (wr > spec.eps2) { wr = w; wl = w - 2.0 * h; }
            return (term.d2b(t, wr, z) - term.d2b(t, wl, z)) / (wr - wl);
        }
        default: throw std::logic_error("kernel_eval: unsupported derivative level");
    }
}

PolynomialSpec make_spec(std::size_t m, std::vector<PolyTerm> terms, Box U, Box V,
                         double eps2, double t_max, bool lipschitz) {
    if (m < 1) throw std::invalid_argument("make_spec: m must be >= 1");
    if (!(eps2 > 0.0)) throw std::invalid_argument("make_spec: eps2 must be positive");
    if (U.lo.size() != m || U.hi.size() != m || V.lo.size() != m || V.hi.size() != m)
        throw std::invalid_argument("make_spec: box dimensions must equal m");
    PolynomialSpec spec;
    spec.m = m;
    spec.U = U;
    spec.V = V;
    spec.eps2 = eps2;
    spec.t_max = t_max;
    spec.lipschitz_data = lipschitz;
    spec.D = 0;
    for (const auto& t : terms) {
        if (t.alpha.size() != m) throw std::invalid_argument("make_spec: multi-index length != m");
        if (t.j < 0 || static_cast<std::size_t>(t.j) >= m)
            throw std::invalid_argument("make_spec: component index out of range");
        spec.D = std::max(spec.D, mi_abs(t.alpha));
        for (const auto& o : spec.terms)
            if (o.j == t.j && o.alpha == t.alpha)
                throw std::invalid_argument("make_spec: duplicate (alpha, j) term");
        spec.terms.push_back(t);
    }

    // Record the sampled sup of the densities, their w-derivatives, and the
    // traces (with t-difference quotients) over the configured box.
    std::vector<Vec> zs;
    zs.push_back(U.center());
    for (std::size_t mask = 0; mask < (std::size_t{1} << std::min<std::size_t>(m, 4)); ++mask)
        zs.push_back(U.corner(mask));
    double c0max = 0.0;
    for (const auto& term : spec.terms) {
        for (int it = 0; it <= 4; ++it) {
            double t = t_max * static_cast<double>(it) / 4.0;
            for (const Vec& z : zs) {
                for (int iw = 0; iw <= 8; ++iw) {
                    double w = eps2 * static_cast<double>(iw) / 8.0;
                    for (int lvl = 0; lvl <= 3; ++lvl)
                        c0max = std::max(c0max, std::abs(kernel_eval(spec, term, lvl, t, w, z)));
                }
                c0max = std::max(c0max, std::abs(term.b0(t, z)));
                c0max = std::max(c0max, std::abs(term.db0(t, z)));
                if (it > 0) {
                    double tp = t_max * static_cast<double>(it - 1) / 4.0;
                    double dq0 = (term.b0(t, z) - term.b0(tp, z)) / (t - tp);
                    double dq1 = (term.db0(t, z) - term.db0(tp, z)) / (t - tp);
                    c0max = std::max({c0max, std::abs(dq0), std::abs(dq1)});
                }
            }
        }
    }
    spec.C0 = c0max;

    if (lipschitz) {
        std::mt19937_64 rng(0x5eedULL);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        auto rand_z = [&] {
            Vec z(m);
            for (std::size_t i = 0; i < m; ++i)
                z[i] = U.lo[i] + (U.hi[i] - U.lo[i]) * unif(rng);
            return z;
        };
        double lip = 0.0;
        for (int s = 0; s < 64; ++s) {
            Vec z1 = rand_z(), z2 = rand_z();
            double dz = 0.0;
            for (std::size_t i = 0; i < m; ++i) dz = std::max(dz, std::abs(z1[i] - z2[i]));
            if (dz < 1e-12) continue;
            double t = t_max * unif(rng), w = eps2 * unif(rng);
            for (const auto& term : spec.terms) {
                for (int lvl = 0; lvl <= 1; ++lvl) {
                    double d = std::abs(kernel_eval(spec, term, lvl, t, w, z1) -
                                        kernel_eval(spec, term, lvl, t, w, z2));
                    lip = std::max(lip, d / dz);
                }
            }
        }
        spec.lipschitz_const = 1.5 * lip;
    }
    return spec;
}

double eval_c(const PolynomialSpec& spec, const PolyTerm& term, double t, double x, const Vec& z) {
    if (x < 0.0) throw std::domain_error("eval_c: x must be >= 0");
    if (!term.xpoly.empty()) {
        double s = 0.0;
        for (std::size_t l = term.xpoly.size(); l-- > 0;) s = s * x + term.xpoly[l](t, z);
        return s;
    }
    if (x == 0.0) return term.b0(t, z);
    GridFunction bs = GridFunction::sample(
        0.0, spec.eps2 / static_cast<double>(spec.laplace_n - 1), spec.laplace_n,
        [&](double w) { return term.b(t, w, z); });
    return laplace_forward(bs, x)[0];
}

double eval_c(const PolynomialSpec& spec, const MultiIndex& alpha, int j, double t, double x,
              const Vec& z) {
    const PolyTerm* term = spec.find(alpha, j);
    if (!term) throw std::invalid_argument("eval_c: no such (alpha, j) term");
    return eval_c(spec, *term, t, x, z);
}

Vec eval_P(const PolynomialSpec& spec, double t, double x, const Vec& y, const Vec& z) {
    if (!spec.V.contains(y)) throw std::domain_error("eval_P: y outside the V box");
    if (!spec.U.contains(z)) throw std::domain_error("eval_P: z outside the U box");
    Vec out(spec.m, 0.0);
    for (const auto& term : spec.terms)
        out[static_cast<std::size_t>(term.j)] +=
            eval_c(spec, term, t, x, z) * vec_pow(y, term.alpha);
    return out;
}

Eigen::MatrixXd jacobian_dyP(const PolynomialSpec& spec, double t, double x, const Vec& y,
                             const Vec& z) {
    if (!spec.V.contains(y)) throw std::domain_error("jacobian_dyP: y outside the V box");
    if (!spec.U.contains(z)) throw std::domain_error("jacobian_dyP: z outside the U box");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(spec.m, spec.m);
    for (const auto& term : spec.terms) {
        double c = eval_c(spec, term, t, x, z);
        for (std::size_t l = 0; l < spec.m; ++l) {
            if (term.alpha[l] == 0) continue;
            MultiIndex am = term.alpha;
            --am[l];
            J(term.j, static_cast<Eigen::Index>(l)) +=
                c * static_cast<double>(term.alpha[l]) * vec_pow(y, am);
        }
    }
    return J;
}

GridFunction assemble_phat(const PolynomialSpec& spec, const GridFunction& A_row,
                           const Vec& A0t, double t) {
    if (A_row.dim() != spec.m) throw std::invalid_argument("assemble_phat: row dimension != m");
    if (!spec.U.contains(A0t)) throw std::domain_error("assemble_phat: trace outside the U box");
    Vec y0 = A_row.node(0);
    if (!spec.U.contains(y0)) throw std::domain_error("assemble_phat: A(t,0) outside the U box");

    std::size_t n = A_row.size(), m = spec.m;
    GridFunction Ap = finite_diff(A_row, 1);
    std::vector<GridFunction> Apc(m);
    for (std::size_t c = 0; c < m; ++c) Apc[c] = Ap.component(c);

    GridFunction out(0.0, A_row.step(), n, m);
    Eigen::MatrixXd J = jacobian_dyP(spec, t, 0.0, y0, A0t);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t l = 0; l < m; ++l) out(k, j) += J(j, l) * Ap(k, l);

    for (const auto& term : spec.terms) {
        if (mi_abs(term.alpha) == 0) {
            if (!term.db_zero)
                for (std::size_t k = 0; k < n; ++k)
                    out(k, term.j) += kernel_eval(spec, term, 1, t, A_row.coord(k), A0t);
            continue;
        }
        double b0v = term.b0(t, A0t);
        GridFunction bp(0.0, A_row.step(), n, 1);
        if (!term.db_zero)
            for (std::size_t k = 0; k < n; ++k)
                bp(k) = kernel_eval(spec, term, 1, t, A_row.coord(k), A0t);
        for (const MultiIndex& beta : sub_multiindices(term.alpha)) {
            MultiIndex gamma(term.alpha.size());
            for (std::size_t i = 0; i < gamma.size(); ++i) gamma[i] = term.alpha[i] - beta[i];
            int ag = mi_abs(gamma);
            double cb = mi_binom(term.alpha, beta) * vec_pow(y0, beta);
            if (ag == 0) {
                if (!term.db_zero)
                    for (std::size_t k = 0; k < n; ++k) out(k, term.j) += cb * bp(k);
                continue;
            }
            GridFunction fold = conv_power(Apc, gamma);
            if (ag >= 2 && b0v != 0.0)
                for (std::size_t k = 0; k < n; ++k) out(k, term.j) += cb * b0v * fold(k);
            if (!term.db_zero) {
                GridFunction bf = conv(bp, fold);
                for (std::size_t k = 0; k < n; ++k) out(k, term.j) += cb * bf(k);
            }
        }
    }
    return out;
}

GridFunction smoothing_G0(const PolynomialSpec& spec, const GridFunction& A0values) {
    if (A0values.dim() != spec.m) throw std::invalid_argument("smoothing_G0: dimension mismatch");
    std::size_t nt = A0values.size();
    GridFunction out(A0values.start(), A0values.step(), nt, spec.m);
    for (std::size_t i = 0; i < nt; ++i) {
        double t = A0values.coord(i);
        Vec a0 = A0values.node(i);
        for (const auto& term : spec.terms) {
            if (term.db_zero) continue;
            out(i, term.j) += vec_pow(a0, term.alpha) * term.db0(t, a0);
        }
    }
    return out;
}

GridFunction smoothing_G1(const PolynomialSpec& spec, const GridFunction& A0values,
                          const GridFunction& B0values) {
    if (A0values.dim() != spec.m || B0values.dim() != spec.m || !A0values.same_axis(B0values))
        throw std::invalid_argument("smoothing_G1: trace data mismatch");
    std::size_t nt = A0values.size();
    GridFunction out(A0values.start(), A0values.step(), nt, spec.m);
    for (std::size_t i = 0; i < nt; ++i) {
        double t = A0values.coord(i);
        Vec a0 = A0values.node(i);
        Vec b0 = B0values.node(i);
        for (const auto& term : spec.terms) {
            int aa = mi_abs(term.alpha);
            // kernel passthrough: d_w [ y^alpha d_w b ] at w=0
            if (!term.db_zero)
                out(i, term.j) += vec_pow(a0, term.alpha) * term.d2b0(t, a0);
            if (aa < 1) continue;
            double bt = term.b0(t, a0);
            double dbt = term.db_zero ? 0.0 : term.db0(t, a0);
            for (const MultiIndex& beta : sub_multiindices(term.alpha)) {
                MultiIndex gamma(term.alpha.size());
                for (std::size_t q = 0; q < gamma.size(); ++q) gamma[q] = term.alpha[q] - beta[q];
                int ag = mi_abs(gamma);
                double cb = mi_binom(term.alpha, beta) * vec_pow(a0, beta);
                if (ag == 2 && bt != 0.0) {
                    // d_w (A'_{k1} conv A'_{k2}) at 0 = B0_{k1} B0_{k2}
                    double prod = 1.0;
                    for (std::size_t q = 0; q < gamma.size(); ++q)
                        for (int r = 0; r < gamma[q]; ++r) prod *= b0[q];
                    out(i, term.j) += cb * bt * prod;
                } else if (ag == 1 && dbt != 0.0) {
                    std::size_t k = 0;
                    while (gamma[k] == 0) ++k;
                    out(i, term.j) += cb * dbt * b0[k];
                }
            }
        }
    }
    return out;
}

std::vector<Eigen::MatrixXd> trace_transport_matrix(const PolynomialSpec& spec,
                                                    const GridFunction& A0values,
                                                    Regime regime) {
    std::size_t nt = A0values.size();
    double sign = (regime == Regime::Existence) ? -1.0 : 1.0;
    std::vector<Eigen::MatrixXd> Ms;
    Ms.reserve(nt);
    for (std::size_t i = 0; i < nt; ++i) {
        Vec a0 = A0values.node(i);
        Ms.push_back(sign * jacobian_dyP(spec, A0values.coord(i), 0.0, a0, a0));
    }
    return Ms;
}

SmoothingTraces smoothing_traces(const PolynomialSpec& spec, const TraceData& A0,
                                 Regime regime) {
    if (A0.value.size() == 0 || A0.dot.size() != A0.value.size())
        throw std::invalid_argument("smoothing_traces: C^2 trace data required");
    SmoothingTraces st;
    st.G0 = smoothing_G0(spec, A0.value);
    auto Ms = trace_transport_matrix(spec, A0.value, regime);
    std::size_t nt = A0.value.size(), m = spec.m;
    st.B0 = GridFunction(A0.value.start(), A0.value.step(), nt, m);
    for (std::size_t i = 0; i < nt; ++i) {
        Eigen::VectorXd rhs(m);
        for (std::size_t c = 0; c < m; ++c) rhs(c) = -A0.dot(i, c) + st.G0(i, c);
        Eigen::VectorXd b = Ms[i].partialPivLu().solve(rhs);
        for (std::size_t c = 0; c < m; ++c) st.B0(i, c) = b(c);
    }
    st.G1 = smoothing_G1(spec, A0.value, st.B0);
    return st;
}

PhatDifference phat_difference_bound(const PolynomialSpec& spec, const GridFunction& A_row,
                                     const GridFunction& B_row, double t) {
    if (!spec.lipschitz_data)
        throw std::runtime_error("phat_difference_bound: spec lacks the z-Lipschitz data flag");
    if (!A_row.same_axis(B_row) || A_row.dim() != spec.m)
        throw std::invalid_argument("phat_difference_bound: rows must share axis and dimension m");
    std::size_t n = A_row.size(), m = spec.m;
    Vec yA = A_row.node(0), yB = B_row.node(0);
    if (!spec.U.contains(yA) || !spec.U.contains(yB))
        throw std::domain_error("phat_difference_bound: traces outside the U box");

    GridFunction Apr = finite_diff(A_row, 1), Bpr = finite_diff(B_row, 1);
    std::vector<GridFunction> Ap(m), Bp(m);
    for (std::size_t c = 0; c < m; ++c) {
        Ap[c] = Apr.component(c);
        Bp[c] = Bpr.component(c);
    }

    PhatDifference out;
    out.transport = jacobian_dyP(spec, t, 0.0, yA, yA);
    Eigen::MatrixXd dJ = out.transport - jacobian_dyP(spec, t, 0.0, yB, yB);
    GridFunction F(0.0, A_row.step(), n, m);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t l = 0; l < m; ++l) F(k, j) += dJ(j, l) * Bpr(k, l);

    for (const auto& term : spec.terms) {
        GridFunction bpA(0.0, A_row.step(), n, 1), bpB(0.0, A_row.step(), n, 1);
        if (!term.db_zero) {
            for (std::size_t k = 0; k < n; ++k) {
                bpA(k) = kernel_eval(spec, term, 1, t, A_row.coord(k), yA);
                bpB(k) = kernel_eval(spec, term, 1, t, A_row.coord(k), yB);
            }
        }
        if (mi_abs(term.alpha) == 0) {
            if (!term.db_zero)
                for (std::size_t k = 0; k < n; ++k) F(k, term.j) += bpA(k) - bpB(k);
            continue;
        }
        for (const MultiIndex& beta : sub_multiindices(term.alpha)) {
            MultiIndex gamma(term.alpha.size());
            for (std::size_t q = 0; q < gamma.size(); ++q) gamma[q] = term.alpha[q] - beta[q];
            int ag = mi_abs(gamma);
            double binom = mi_binom(term.alpha, beta);
            double wA = vec_pow(yA, beta), wB = vec_pow(yB, beta);
            if (ag == 0) {
                if (!term.db_zero) {
                    for (std::size_t k = 0; k < n; ++k)
                        F(k, term.j) += binom * ((wA - wB) * bpA(k) + wB * (bpA(k) - bpB(k)));
                }
                continue;
            }
            std::vector<GridFunction> listA, listB;
            for (std::size_t q = 0; q < gamma.size(); ++q)
                for (int r = 0; r < gamma[q]; ++r) {
                    listA.push_back(Ap[q]);
                    listB.push_back(Bp[q]);
                }
            if (ag >= 2) {
                double b0A = term.b0(t, yA), b0B = term.b0(t, yB);
                GridFunction KA = conv_power(Ap, gamma);
                GridFunction dK = multilinear_difference(listA, listB);
                for (std::size_t k = 0; k < n; ++k)
                    F(k, term.j) += binom * ((b0A * wA - b0B * wB) * KA(k) + b0B * wB * dK(k));
            }
            if (!term.db_zero) {
                auto klA = listA, klB = listB;
                klA.insert(klA.begin(), bpA);
                klB.insert(klB.begin(), bpB);
                GridFunction KA = conv(bpA, conv_power(Ap, gamma));
                GridFunction dK = multilinear_difference(klA, klB);
                for (std::size_t k = 0; k < n; ++k)
                    F(k, term.j) += binom * ((wA - wB) * KA(k) + wB * dK(k));
            }
        }
    }
    out.F = F;

    double cmax = 0.0, supg = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t c = 0; c < m; ++c)
            supg = std::max(supg, std::abs(A_row(k, c) - B_row(k, c)));
        double fn = 0.0;
        for (std::size_t c = 0; c < m; ++c) fn = std::max(fn, std::abs(F(k, c)));
        if (supg > 1e-14) cmax = std::max(cmax, fn / supg);
    }
    out.C_est = cmax;
    return out;
}

double matrix_norm2(const Eigen::MatrixXd& A) {
    if (A.size() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    return svd.singularValues()(0);
}

namespace {
Eigen::MatrixXd interp_matrix(const std::vector<Eigen::MatrixXd>& Ms, double ht, double t) {
    double s = t / ht;
    auto i = static_cast<long>(std::floor(s));
    long imax = static_cast<long>(Ms.size()) - 2;
    i = std::clamp(i, 0L, imax);
    double u = std::clamp(s - static_cast<double>(i), 0.0, 1.0);
    return (1.0 - u) * Ms[static_cast<std::size_t>(i)] + u * Ms[static_cast<std::size_t>(i + 1)];
}
} // namespace

Eigen::MatrixXd Diagonalization::R_at(double t) const { return interp_matrix(R, ht(), t); }
Eigen::MatrixXd Diagonalization::Rinv_at(double t) const { return interp_matrix(Rinv, ht(), t); }

Diagonalization make_diagonalization(const std::function<Eigen::MatrixXd(double)>& Mfun,
                                     double ht, std::size_t nt) {
    if (nt < 4) throw std::invalid_argument("make_diagonalization: need >= 4 t-nodes");
    Eigen::MatrixXd M0 = Mfun(0.0);
    auto m = static_cast<std::size_t>(M0.rows());
    Diagonalization d;
    d.lambda = GridFunction(0.0, ht, nt, m);
    d.R.resize(nt);
    d.Rinv.resize(nt);

    Eigen::MatrixXd prevQ;
    for (std::size_t i = 0; i < nt; ++i) {
        double t = ht * static_cast<double>(i);
        Eigen::MatrixXd M = (i == 0) ? M0 : Mfun(t);
        Eigen::EigenSolver<Eigen::MatrixXd> es(M);
        double scale = std::max(1.0, matrix_norm2(M));
        Eigen::VectorXd ev(m);
        Eigen::MatrixXd Q(m, m);
        for (std::size_t c = 0; c < m; ++c) {
            std::complex<double> lam = es.eigenvalues()(static_cast<Eigen::Index>(c));
            if (std::abs(lam.imag()) > 1e-9 * scale)
                throw std::runtime_error("make_diagonalization: complex eigenvalue of M(t)");
            ev(static_cast<Eigen::Index>(c)) = lam.real();
            for (std::size_t r = 0; r < m; ++r) {
                std::complex<double> v = es.eigenvectors()(static_cast<Eigen::Index>(r),
                                                           static_cast<Eigen::Index>(c));
                if (std::abs(v.imag()) > 1e-9)
                    throw std::runtime_error("make_diagonalization: complex eigenvector of M(t)");
                Q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v.real();
            }
        }
        // order columns for continuity in t (greedy overlap matching, sign-aligned)
        std::vector<std::size_t> perm(m);
        if (i == 0) {
            std::vector<std::size_t> idx(m);
            for (std::size_t c = 0; c < m; ++c) idx[c] = c;
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                return ev(static_cast<Eigen::Index>(a)) < ev(static_cast<Eigen::Index>(b));
            });
            perm = idx;
        } else {
            std::vector<bool> used(m, false);
            for (std::size_t target = 0; target < m; ++target) {
                double best = -1.0;
                std::size_t pick = 0;
                for (std::size_t c = 0; c < m; ++c) {
                    if (used[c]) continue;
                    double ov = std::abs(prevQ.col(static_cast<Eigen::Index>(target))
                                             .dot(Q.col(static_cast<Eigen::Index>(c))));
                    if (ov > best) {
                        best = ov;
                        pick = c;
                    }
                }
                used[pick] = true;
                perm[target] = pick;
            }
        }
        Eigen::MatrixXd Qo(m, m);
        Eigen::VectorXd evo(m);
        for (std::size_t c = 0; c < m; ++c) {
            Eigen::VectorXd col = Q.col(static_cast<Eigen::Index>(perm[c]));
            col.normalize();
            if (i > 0 && prevQ.col(static_cast<Eigen::Index>(c)).dot(col) < 0.0) col = -col;
            Qo.col(static_cast<Eigen::Index>(c)) = col;
            evo(static_cast<Eigen::Index>(c)) = ev(static_cast<Eigen::Index>(perm[c]));
        }
        prevQ = Qo;
        Eigen::MatrixXd Rm = Qo.inverse();
        if (matrix_norm2(Rm * Qo - Eigen::MatrixXd::Identity(m, m)) > 1e-10)
            throw std::runtime_error("make_diagonalization: R * Rinv deviates from identity");
        Eigen::MatrixXd Dm = Rm * M * Qo;
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < m; ++c)
                if (r != c && std::abs(Dm(static_cast<Eigen::Index>(r),
                                          static_cast<Eigen::Index>(c))) > 1e-8 * scale)
                    throw std::runtime_error("make_diagonalization: R M R^{-1} not diagonal");
        for (std::size_t c = 0; c < m; ++c) {
            double lam = evo(static_cast<Eigen::Index>(c));
            if (!(lam > 0.0))
                throw std::runtime_error("make_diagonalization: eigenvalue of M(t) not positive");
            d.lambda(i, c) = lam;
        }
        d.R[i] = Rm;
        d.Rinv[i] = Qo;
    }

    d.lambda0 = GridFunction(0.0, ht, nt, 1);
    for (std::size_t i = 0; i < nt; ++i) {
        double mn = d.lambda(i, 0);
        for (std::size_t c = 1; c < m; ++c) mn = std::min(mn, d.lambda(i, c));
        d.lambda0(i) = mn;
    }
    d.Lambda = cumulative_integral(d.lambda);
    // integral of the pointwise fastest speed: dominates every Lambda_j
    // increment, so w <= delta' - gamma0(t) is inside each component's domain
    // of determinacy
    GridFunction lmax(0.0, ht, nt, 1);
    for (std::size_t i = 0; i < nt; ++i) {
        double mx = d.lambda(i, 0);
        for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, d.lambda(i, c));
        lmax(i) = mx;
    }
    d.gamma0 = cumulative_integral(lmax);
    d.c0 = d.lambda0(0);
    for (std::size_t i = 1; i < nt; ++i) d.c0 = std::min(d.c0, d.lambda0(i));

    d.Rdot.resize(nt);
    auto fd = [&](const std::vector<Eigen::MatrixXd>& Ms, std::size_t i) -> Eigen::MatrixXd {
        if (i == 0) return (-3.0 * Ms[0] + 4.0 * Ms[1] - Ms[2]) / (2.0 * ht);
        if (i + 1 == nt) return (3.0 * Ms[nt - 1] - 4.0 * Ms[nt - 2] + Ms[nt - 3]) / (2.0 * ht);
        return (Ms[i + 1] - Ms[i - 1]) / (2.0 * ht);
    };
    std::vector<Eigen::MatrixXd> Minv(nt);
    for (std::size_t i = 0; i < nt; ++i) {
        Eigen::VectorXd il(m);
        for (std::size_t c = 0; c < m; ++c)
            il(static_cast<Eigen::Index>(c)) = 1.0 / d.lambda(i, c);
        Minv[i] = d.Rinv[i] * il.asDiagonal() * d.R[i];
    }
    double nR = 0.0, nRd = 0.0, nRi = 0.0, nRid = 0.0, nMi = 0.0, nMid = 0.0;
    for (std::size_t i = 0; i < nt; ++i) {
        d.Rdot[i] = fd(d.R, i);
        nR = std::max(nR, matrix_norm2(d.R[i]));
        nRd = std::max(nRd, matrix_norm2(d.Rdot[i]));
        nRi = std::max(nRi, matrix_norm2(d.Rinv[i]));
        nRid = std::max(nRid, matrix_norm2(fd(d.Rinv, i)));
        nMi = std::max(nMi, matrix_norm2(Minv[i]));
        nMid = std::max(nMid, matrix_norm2(fd(Minv, i)));
    }
    d.C1 = nR + nRd;
    d.C2 = nRi + nRid;
    d.C3 = nMi + nMid;
    d.C4 = 0.0;
    return d;
}

} // namespace dq
