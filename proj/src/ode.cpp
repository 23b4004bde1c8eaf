#include "dq/ode.hpp"
#include "dq/laplace.hpp"
#include "dq/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace dq {

namespace {

double max_abs(const Eigen::MatrixXd& A) { return A.cwiseAbs().maxCoeff(); }

// One implicit-midpoint step for Edot = S(t) E with S frozen at the midpoint.
Eigen::MatrixXd midpoint_step(const Eigen::MatrixXd& Smid, double h, const Eigen::MatrixXd& E) {
    auto n = Smid.rows();
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - (0.5 * h) * Smid;
    Eigen::MatrixXd B = E + (0.5 * h) * (Smid * E);
    return A.partialPivLu().solve(B);
}

} // namespace

TexpResult texp(const std::function<Eigen::MatrixXd(double)>& Mfun, double a, double b,
                std::optional<double> x, double rel_tol) {
    if (x && !(*x > 0.0)) throw std::domain_error("texp: scale x must be positive");
    if (b < a) throw std::invalid_argument("texp: interval must satisfy a <= b");
    auto S = [&](double s) -> Eigen::MatrixXd {
        Eigen::MatrixXd M = Mfun(s);
        return x ? Eigen::MatrixXd(-M / *x) : M;
    };
    Eigen::MatrixXd S0 = S(a);
    auto n = S0.rows();
    TexpResult res;
    res.E = Eigen::MatrixXd::Identity(n, n);
    double T = b - a;
    if (T == 0.0) return res;

    double h = std::min(T / 16.0, 0.5 / std::max(matrix_norm2(S0), 1e-12));
    res.h_min = T;
    double t = a;
    while (t < b - 1e-15 * T) {
        h = std::min(h, b - t);
        Eigen::MatrixXd Sm = S(t + 0.5 * h);
        Eigen::MatrixXd E1 = midpoint_step(Sm, h, res.E);
        Eigen::MatrixXd Eh = midpoint_step(S(t + 0.25 * h), 0.5 * h, res.E);
        Eh = midpoint_step(S(t + 0.75 * h), 0.5 * h, Eh);
        double err = max_abs(Eh - E1) / 3.0;
        double tol_loc = rel_tol * std::max(1.0, max_abs(Eh)) * (h / T) + 1e-300;
        if (err <= tol_loc) {
            res.E = Eh + (Eh - E1) / 3.0;
            t += h;
            ++res.steps;
            res.h_min = std::min(res.h_min, h);
            res.h_max = std::max(res.h_max, h);
        }
        h *= std::clamp(0.9 * std::cbrt(tol_loc / std::max(err, 1e-300)), 0.2, 4.0);
        if (h < 1e-14 * T || res.steps > 20'000'000) {
            std::ostringstream os;
            os << "texp: step control collapsed at t=" << t << " (h=" << h
               << ", |S|=" << matrix_norm2(S(t)) << ", steps=" << res.steps << ")";
            throw std::runtime_error(os.str());
        }
    }
    return res;
}

DecayCheck texp_decay_check(const std::function<Eigen::MatrixXd(double, double)>& Mfun,
                            const Diagonalization& diag, double delta, const Vec& x_grid) {
    if (!(delta >= 0.0 && delta < 1.0))
        throw std::invalid_argument("texp_decay_check: delta must lie in [0,1)");
    double T = diag.ht() * static_cast<double>(diag.nt() - 1);
    GridFunction Lam0 = cumulative_integral(diag.lambda0);
    double R0n = matrix_norm2(diag.R[0]);

    DecayCheck rep;
    rep.x_nodes = x_grid;
    rep.holds.resize(x_grid.size());
    rep.sup_ratio.assign(x_grid.size(), 0.0);
    for (std::size_t ix = 0; ix < x_grid.size(); ++ix) {
        double x = x_grid[ix];
        if (!(x > 0.0)) throw std::domain_error("texp_decay_check: x nodes must be positive");
        Eigen::MatrixXd E = Eigen::MatrixXd::Identity(diag.m(), diag.m());
        double t = 0.0, supr = 0.0;
        while (t < T - 1e-15 * T) {
            double Mn = std::max(matrix_norm2(Mfun(t, x)), 1e-12);
            double h = std::min({0.5 * x / Mn, diag.ht(), T - t});
            E = midpoint_step(-Mfun(t + 0.5 * h, x) / x, h, E);
            t += h;
            double En = matrix_norm2(E);
            double lenv = std::log(matrix_norm2(diag.Rinv_at(t)) * R0n) -
                          (delta / x) * interp_scalar(Lam0, std::min(t, Lam0.end()));
            double ratio = En > 0.0 ? std::exp(std::log(En) - lenv) : 0.0;
            supr = std::max(supr, ratio);
        }
        rep.sup_ratio[ix] = supr;
        rep.holds[ix] = supr <= 1.0 + 1e-9 ? 1 : 0;
        if (rep.holds[ix]) rep.x_star = std::max(rep.x_star, x);
    }
    return rep;
}

namespace {

// Coefficients of every term tabulated along z = a(t): the x-side value and
// its x=0 trace, each as a cubic interpolant over a refined t-grid.
struct CoeffTab {
    std::vector<MonotoneInterpolant> cx, c0;
    std::vector<MonotoneInterpolant> a;

    CoeffTab(const PolynomialSpec& spec, const GridFunction& a_trace, double x) {
        std::size_t m = spec.m;
        for (std::size_t c = 0; c < m; ++c) a.emplace_back(a_trace, c);
        std::size_t ntab = 4 * (a_trace.size() - 1) + 1;
        double htab = (a_trace.end() - a_trace.start()) / static_cast<double>(ntab - 1);
        for (const auto& term : spec.terms) {
            GridFunction gx(a_trace.start(), htab, ntab, 1), g0(a_trace.start(), htab, ntab, 1);
            for (std::size_t i = 0; i < ntab; ++i) {
                double t = gx.coord(i);
                Vec z(m);
                for (std::size_t c = 0; c < m; ++c) z[c] = a[c](t);
                gx(i) = eval_c(spec, term, t, x, z);
                g0(i) = eval_c(spec, term, t, 0.0, z);
            }
            cx.emplace_back(gx, 0);
            c0.emplace_back(g0, 0);
        }
    }

    Vec trace(double t) const {
        Vec z(a.size());
        for (std::size_t c = 0; c < a.size(); ++c) z[c] = a[c](t);
        return z;
    }
};

} // namespace

OdeTrajectory solve_main_ode_fixed_x(const PolynomialSpec& spec, const GridFunction& a_trace,
                                     const Vec& f0x, double x, double tol) {
    if (!(x > 0.0)) throw std::domain_error("solve_main_ode_fixed_x: x must be positive");
    std::size_t m = spec.m, nt = a_trace.size();
    if (a_trace.dim() != m || f0x.size() != m)
        throw std::invalid_argument("solve_main_ode_fixed_x: dimension mismatch");
    for (std::size_t i = 0; i < nt; ++i)
        if (!spec.U.contains(a_trace.node(i)))
            throw std::domain_error("solve_main_ode_fixed_x: a_trace outside the U box");

    OdeTrajectory out;
    out.f = GridFunction(a_trace.start(), a_trace.step(), nt, m);
    out.f.set_node(0, f0x);
    if (!spec.V.contains(f0x)) {
        out.box_exit = true;
        out.exit_time = a_trace.start();
        for (std::size_t i = 1; i < nt; ++i) out.f.set_node(i, f0x);
        return out;
    }

    CoeffTab tab(spec, a_trace, x);
    std::size_t K = spec.terms.size();
    double u_max = std::clamp(std::sqrt(8.0 * tol), 1e-4, 0.5);
    double ht = a_trace.step();

    Vec f = f0x;
    std::vector<double> cxv(K), c0v(K);
    auto load_coeffs = [&](double t) {
        for (std::size_t k = 0; k < K; ++k) {
            cxv[k] = tab.cx[k](t);
            c0v[k] = tab.c0[k](t);
        }
    };
    auto rhs = [&](double t, const Vec& y, Vec& r) {
        Vec z = tab.trace(t);
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            const auto& term = spec.terms[k];
            r[static_cast<std::size_t>(term.j)] +=
                cxv[k] * vec_pow(y, term.alpha) - c0v[k] * vec_pow(z, term.alpha);
        }
        for (auto& v : r) v /= x;
        if (spec.remainder) {
            Vec g = spec.remainder(t, x, y, z);
            for (std::size_t c = 0; c < m; ++c) r[c] += g[c];
        }
    };
    auto jac = [&](const Vec& y, Eigen::MatrixXd& J) {
        J.setZero();
        for (std::size_t k = 0; k < K; ++k) {
            const auto& term = spec.terms[k];
            for (std::size_t l = 0; l < m; ++l) {
                if (term.alpha[l] == 0) continue;
                MultiIndex am = term.alpha;
                --am[l];
                J(term.j, static_cast<Eigen::Index>(l)) +=
                    cxv[k] * static_cast<double>(term.alpha[l]) * vec_pow(y, am) / x;
            }
        }
    };

    Eigen::MatrixXd J(m, m), A(m, m);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
    Eigen::VectorXd rv(m), dv(m);
    Vec ymid(m), fr(m);

    for (std::size_t i = 0; i + 1 < nt; ++i) {
        double t0 = a_trace.coord(i);
        load_coeffs(t0);
        jac(f, J);
        double Jn = std::max(J.cwiseAbs().rowwise().sum().maxCoeff(), 1e-12);
        auto nsub = static_cast<std::size_t>(std::ceil(ht * Jn / u_max));
        nsub = std::max<std::size_t>(nsub, 1);
        if (out.substeps + nsub > 200'000'000)
            throw std::runtime_error("solve_main_ode_fixed_x: substep budget exhausted (stiffness)");
        double h = ht / static_cast<double>(nsub);
        for (std::size_t s = 0; s < nsub; ++s) {
            double tm = t0 + (static_cast<double>(s) + 0.5) * h;
            load_coeffs(tm);
            ymid = f;
            bool converged = false;
            for (int it = 0; it < 30; ++it) {
                rhs(tm, ymid, fr);
                double dn = 0.0;
                jac(ymid, J);
                A = Eigen::MatrixXd::Identity(m, m) - (0.5 * h) * J;
                for (std::size_t c = 0; c < m; ++c)
                    rv(static_cast<Eigen::Index>(c)) = ymid[c] - f[c] - 0.5 * h * fr[c];
                lu.compute(A);
                dv = lu.solve(rv);
                for (std::size_t c = 0; c < m; ++c) {
                    ymid[c] -= dv(static_cast<Eigen::Index>(c));
                    dn = std::max(dn, std::abs(dv(static_cast<Eigen::Index>(c))));
                }
                double yn = 0.0;
                for (double v : ymid) yn = std::max(yn, std::abs(v));
                if (dn <= 1e-13 * (1.0 + yn)) {
                    converged = true;
                    break;
                }
            }
            if (!converged)
                throw std::runtime_error("solve_main_ode_fixed_x: Newton stalled (stiffness)");
            for (std::size_t c = 0; c < m; ++c) f[c] = 2.0 * ymid[c] - f[c];
            ++out.substeps;
            if (!spec.V.contains(f)) {
                out.box_exit = true;
                out.exit_time = t0 + (static_cast<double>(s) + 1.0) * h;
                for (std::size_t r = i + 1; r < nt; ++r) out.f.set_node(r, f);
                return out;
            }
        }
        out.f.set_node(i + 1, f);
    }
    return out;
}

Vec linear_exist_closed_form(const Vec& f0x, const GridFunction& a_trace, double t, double x) {
    if (!(x > 0.0)) throw std::domain_error("linear_exist_closed_form: x must be positive");
    std::size_t m = a_trace.dim();
    if (f0x.size() != m) throw std::invalid_argument("linear_exist_closed_form: dimension mismatch");
    if (std::abs(a_trace.start()) > 1e-12)
        throw std::invalid_argument("linear_exist_closed_form: trace grid must start at 0");
    if (t < -1e-12 || t > a_trace.end() + 1e-9)
        throw std::domain_error("linear_exist_closed_form: t outside the trace grid");

    double h = a_trace.step();
    double pos = std::clamp(t / h, 0.0, static_cast<double>(a_trace.size() - 1));
    auto k = static_cast<std::size_t>(std::floor(pos));
    k = std::min(k, a_trace.size() - 2);
    double frac = pos - static_cast<double>(k);

    Vec out(m, 0.0);
    double prefix = 1.0;
    if (frac > 0.0) {
        double dw = frac * h;
        SegWeights sw = exp_segment_weights(dw / x);
        for (std::size_t c = 0; c < m; ++c) {
            double a_top = (1.0 - frac) * a_trace(k, c) + frac * a_trace(k + 1, c);
            out[c] += sw.left * a_top + sw.right * a_trace(k, c);
        }
        prefix = std::exp(-dw / x);
    }
    SegWeights sw = exp_segment_weights(h / x);
    double Efull = std::exp(-h / x);
    for (std::size_t i = k; i >= 1; --i) {
        for (std::size_t c = 0; c < m; ++c)
            out[c] += prefix * (sw.left * a_trace(i, c) + sw.right * a_trace(i - 1, c));
        prefix *= Efull;
    }
    for (std::size_t c = 0; c < m; ++c) out[c] += prefix * f0x[c];
    return out;
}

Vec linear_unique_initial(const Vec& f_end, const GridFunction& a_trace, double x, double eps1) {
    if (!(x > 0.0)) throw std::domain_error("linear_unique_initial: x must be positive");
    std::size_t m = a_trace.dim();
    if (f_end.size() != m) throw std::invalid_argument("linear_unique_initial: dimension mismatch");
    if (std::abs(a_trace.start()) > 1e-12)
        throw std::invalid_argument("linear_unique_initial: trace grid must start at 0");
    if (eps1 < 0.0 || eps1 > a_trace.end() + 1e-9)
        throw std::domain_error("linear_unique_initial: eps1 outside the trace grid");

    double h = a_trace.step();
    double pos = std::clamp(eps1 / h, 0.0, static_cast<double>(a_trace.size() - 1));
    auto k = static_cast<std::size_t>(std::floor(pos));
    k = std::min(k, a_trace.size() - 2);
    double frac = pos - static_cast<double>(k);

    Vec out(m, 0.0);
    double prefix = 1.0;
    SegWeights sw = exp_segment_weights(h / x);
    double Efull = std::exp(-h / x);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t c = 0; c < m; ++c)
            out[c] += prefix * (sw.left * a_trace(i, c) + sw.right * a_trace(i + 1, c));
        prefix *= Efull;
    }
    if (frac > 0.0) {
        double dw = frac * h;
        SegWeights swp = exp_segment_weights(dw / x);
        for (std::size_t c = 0; c < m; ++c) {
            double a_eps = (1.0 - frac) * a_trace(k, c) + frac * a_trace(k + 1, c);
            out[c] += prefix * (swp.left * a_trace(k, c) + swp.right * a_eps);
        }
        prefix *= std::exp(-dw / x);
    }
    for (std::size_t c = 0; c < m; ++c) out[c] += prefix * f_end[c];
    return out;
}

PerturbationResult solve_perturbation_g(const FieldMatrixFn& Mfun, const FieldVecFn& G1fun,
                                        const GridFunction& g0, const Vec& x_grid,
                                        double t_max, std::size_t nt, double eps,
                                        double tol) {
    if (x_grid.empty()) throw std::invalid_argument("solve_perturbation_g: empty x grid");
    if (nt < 2 || !(t_max > 0.0) || !(eps > 0.0))
        throw std::invalid_argument("solve_perturbation_g: bad t grid or eps");
    if (std::abs(g0.start()) > 1e-12)
        throw std::invalid_argument("solve_perturbation_g: g0 grid must start at 0");
    std::size_t m = g0.dim();
    for (std::size_t c = 0; c < m; ++c)
        if (std::abs(g0(0, c)) > 1e-12)
            throw std::invalid_argument("solve_perturbation_g: g0(0) must vanish");
    double x_max = x_grid.front();
    for (std::size_t i = 0; i < x_grid.size(); ++i) {
        if (!(x_grid[i] > 0.0)) throw std::domain_error("solve_perturbation_g: x nodes positive");
        if (i > 0 && !(x_grid[i] < x_grid[i - 1]))
            throw std::invalid_argument("solve_perturbation_g: x nodes must decrease");
        if (x_grid[i] > g0.end() + 1e-9)
            throw std::invalid_argument("solve_perturbation_g: x node beyond g0 grid");
    }

    Vec zero(m, 0.0);
    double ht_chk = t_max / 64.0;
    make_diagonalization([&](double t) { return Mfun(t, 0.0, zero); }, ht_chk, 65);

    PerturbationResult res;
    // lambda_star: inf over t of the smallest eigenvalue of the symmetric part
    res.lambda_star = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 64; ++i) {
        Eigen::MatrixXd M = Mfun(ht_chk * i, 0.0, zero);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
        res.lambda_star = std::min(res.lambda_star, es.eigenvalues().minCoeff());
    }
    if (!(res.lambda_star > 0.0))
        throw std::invalid_argument("solve_perturbation_g: sym M(t,0,0) not positive definite");

    // sampled sup |G1| over the eps-ball, inflated 1.5x
    std::mt19937_64 rng(0x9e3779b9ULL);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    auto sample_zs = [&] {
        std::vector<Vec> zs;
        zs.push_back(zero);
        if (m <= 4) {
            for (std::size_t mask = 0; mask < (std::size_t{1} << m); ++mask) {
                Vec z(m);
                for (std::size_t c = 0; c < m; ++c) z[c] = (mask >> c) & 1 ? eps : -eps;
                zs.push_back(z);
            }
        }
        for (int s = 0; s < 24; ++s) {
            Vec z(m);
            for (std::size_t c = 0; c < m; ++c) z[c] = eps * unif(rng);
            zs.push_back(z);
        }
        return zs;
    };
    auto zs = sample_zs();
    double csup = 0.0;
    for (int i = 0; i <= 16; ++i) {
        double t = t_max * i / 16.0;
        for (double xx : {0.0, 0.5 * x_max, x_max})
            for (const Vec& z : zs) {
                Vec g = G1fun(t, xx, z);
                for (double v : g) csup = std::max(csup, std::abs(v));
            }
    }
    res.C_sup = 1.5 * csup;

    // gamma: largest sampled x-radius keeping sym M >= lambda_star/2 on the ball
    res.gamma = 0.0;
    for (double cand = x_max; cand > 1e-12 * x_max; cand *= 0.5) {
        double mn = std::numeric_limits<double>::infinity();
        for (int i = 0; i <= 16; ++i) {
            double t = t_max * i / 16.0;
            for (double xx : {0.25 * cand, 0.5 * cand, cand})
                for (const Vec& z : zs) {
                    Eigen::MatrixXd M = Mfun(t, xx, z);
                    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
                    mn = std::min(mn, es.eigenvalues().minCoeff());
                }
        }
        if (mn >= 0.5 * res.lambda_star) {
            res.gamma = cand;
            break;
        }
    }
    res.delta = res.C_sup > 0.0
                    ? std::min(res.gamma, eps * res.lambda_star / (2.0 * res.C_sup))
                    : res.gamma;

    double ht = t_max / static_cast<double>(nt - 1);
    res.g = XField(ht, nt, x_grid, m);
    std::vector<MonotoneInterpolant> g0i;
    for (std::size_t c = 0; c < m; ++c) g0i.emplace_back(g0, c);
    double u_max = std::clamp(std::sqrt(8.0 * tol), 1e-4, 0.5);

    auto rhs = [&](double t, double x, const Vec& y, Vec& r) {
        Eigen::MatrixXd M = Mfun(t, x, y);
        Vec G = G1fun(t, x, y);
        for (std::size_t c = 0; c < m; ++c) {
            double acc = 0.0;
            for (std::size_t l = 0; l < m; ++l)
                acc += M(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(l)) * y[l];
            r[c] = -acc / x + G[c];
        }
    };

    for (std::size_t ix = 0; ix < x_grid.size(); ++ix) {
        double x = x_grid[ix];
        Vec f(m);
        for (std::size_t c = 0; c < m; ++c) {
            f[c] = g0i[c](x);
            res.g.at(0, ix, c) = f[c];
        }
        double sup = 0.0, t_first = -1.0;
        for (double v : f) sup = std::max(sup, std::abs(v));
        if (sup > eps + 1e-12) t_first = 0.0;

        Eigen::MatrixXd J(m, m), A(m, m);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu;
        Eigen::VectorXd rv(m), dv(m);
        Vec ymid(m), fr(m), fr2(m), yp(m);

        for (std::size_t i = 0; i + 1 < nt; ++i) {
            double t0 = ht * static_cast<double>(i);
            double Mn = std::max(matrix_norm2(Mfun(t0, x, f)), 1e-12);
            auto nsub = static_cast<std::size_t>(std::ceil(ht * Mn / (u_max * x)));
            nsub = std::clamp<std::size_t>(nsub, 1, 40'000'000);
            double h = ht / static_cast<double>(nsub);
            for (std::size_t s = 0; s < nsub; ++s) {
                double tm = t0 + (static_cast<double>(s) + 0.5) * h;
                ymid = f;
                bool converged = false;
                for (int it = 0; it < 30; ++it) {
                    rhs(tm, x, ymid, fr);
                    // forward-difference Jacobian of the right-hand side
                    for (std::size_t l = 0; l < m; ++l) {
                        double eta = 1e-7 * (1.0 + std::abs(ymid[l]));
                        yp = ymid;
                        yp[l] += eta;
                        rhs(tm, x, yp, fr2);
                        for (std::size_t c = 0; c < m; ++c)
                            J(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(l)) =
                                (fr2[c] - fr[c]) / eta;
                    }
                    A = Eigen::MatrixXd::Identity(m, m) - (0.5 * h) * J;
                    for (std::size_t c = 0; c < m; ++c)
                        rv(static_cast<Eigen::Index>(c)) = ymid[c] - f[c] - 0.5 * h * fr[c];
                    lu.compute(A);
                    dv = lu.solve(rv);
                    double dn = 0.0, yn = 0.0;
                    for (std::size_t c = 0; c < m; ++c) {
                        ymid[c] -= dv(static_cast<Eigen::Index>(c));
                        dn = std::max(dn, std::abs(dv(static_cast<Eigen::Index>(c))));
                        yn = std::max(yn, std::abs(ymid[c]));
                    }
                    if (dn <= 1e-13 * (1.0 + yn)) {
                        converged = true;
                        break;
                    }
                }
                if (!converged)
                    throw std::runtime_error("solve_perturbation_g: Newton stalled (stiffness)");
                double fn = 0.0;
                for (std::size_t c = 0; c < m; ++c) {
                    f[c] = 2.0 * ymid[c] - f[c];
                    fn = std::max(fn, std::abs(f[c]));
                }
                if (!std::isfinite(fn) || fn > 1e6 * (eps + 1.0)) {
                    std::ostringstream os;
                    os << "solve_perturbation_g: blow-up at t=" << t0 + (s + 1.0) * h
                       << " (x=" << x << ", |g|=" << fn << ")";
                    throw std::runtime_error(os.str());
                }
                if (fn > sup) {
                    sup = fn;
                    if (sup > eps + 1e-12 && t_first < 0.0)
                        t_first = t0 + (static_cast<double>(s) + 1.0) * h;
                }
            }
            for (std::size_t c = 0; c < m; ++c) res.g.at(i + 1, ix, c) = f[c];
        }
        if (x <= res.delta + 1e-15 && t_first >= 0.0) {
            res.violations.push_back({x, t_first, sup});
            res.ok = false;
        }
    }
    return res;
}

} // namespace dq
