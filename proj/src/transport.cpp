#include "dq/transport.hpp"

#include "dq/convolution.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace dq {

namespace {

Eigen::MatrixXd interp_mats(const std::vector<Eigen::MatrixXd>& Ms, double ht, double t) {
    if (Ms.empty()) throw std::logic_error("interp_mats: empty matrix list");
    if (Ms.size() == 1) return Ms[0];
    double s = t / ht;
    double smax = static_cast<double>(Ms.size() - 1);
    s = std::clamp(s, 0.0, smax);
    std::size_t i = std::min(static_cast<std::size_t>(s), Ms.size() - 2);
    double f = s - static_cast<double>(i);
    Eigen::MatrixXd out = (1.0 - f) * Ms[i] + f * Ms[i + 1];
    return out;
}

// pchip closure over all components of a grid function
std::function<Vec(double)> interp_fn(const GridFunction& g) {
    auto interps = std::make_shared<std::vector<MonotoneInterpolant>>();
    interps->reserve(g.dim());
    for (std::size_t c = 0; c < g.dim(); ++c) interps->emplace_back(g, c);
    const std::size_t m = g.dim();
    return [interps, m](double t) {
        Vec out(m);
        for (std::size_t c = 0; c < m; ++c) out[c] = (*interps)[c](t);
        return out;
    };
}

double row_sup_diff(const GridFunction& a, const GridFunction& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.raw().size(); ++i)
        s = std::max(s, std::abs(a.raw()[i] - b.raw()[i]));
    return s;
}

} // namespace

// ---------------------------------------------------------------- charts ---

CharacteristicChart::CharacteristicChart(GridFunction lambda, double delta0, std::size_t j)
    : cum_(cumulative_integral(lambda)), lam_(lambda), Lam_(cum_), delta0_(delta0), j_(j) {
    if (lambda.dim() != 1) throw std::invalid_argument("CharacteristicChart: lambda must be scalar");
    if (lambda.size() < 2) throw std::invalid_argument("CharacteristicChart: lambda grid too small");
    if (std::abs(lambda.start()) > 1e-12)
        throw std::invalid_argument("CharacteristicChart: lambda grid must start at t=0");
    if (!(delta0 > 0.0)) throw std::invalid_argument("CharacteristicChart: delta0 must be positive");
    eps1_ = lambda.end();
    c0_ = lambda(0);
    for (std::size_t i = 1; i < lambda.size(); ++i) c0_ = std::min(c0_, lambda(i));
    if (!(c0_ > 0.0)) throw std::invalid_argument("CharacteristicChart: lambda must be positive");
}

double CharacteristicChart::Lambda(double t) const { return Lam_(std::clamp(t, 0.0, eps1_)); }

double CharacteristicChart::Lambda_inv(double s) const {
    double smax = cum_(cum_.size() - 1);
    return Lam_.invert(std::clamp(s, 0.0, smax));
}

double CharacteristicChart::phi(double u, double v) const { return u >= 0.0 ? u + v : v; }

double CharacteristicChart::psi(double u, double v) const {
    return u >= 0.0 ? Lambda(u + v) - Lambda(u) : -u + Lambda(v);
}

std::pair<double, double> CharacteristicChart::map(double u, double v) const {
    return {phi(u, v), psi(u, v)};
}

std::pair<double, double> CharacteristicChart::unmap(double t, double w) const {
    double Lt = Lambda(t);
    if (w >= Lt) return {Lt - w, t};
    double u = Lambda_inv(Lt - w);
    return {u, t - u};
}

double CharacteristicChart::v_max(double u) const {
    if (u >= 0.0) {
        double vt = eps1_ - u;
        double vw = Lambda_inv(Lambda(u) + delta0_) - u;
        return std::max(0.0, std::min(vt, vw));
    }
    double s = delta0_ + u;
    if (s <= 0.0) return 0.0;
    return std::min(eps1_, Lambda_inv(s));
}

double CharacteristicChart::v_top() const { return std::min(eps1_, delta0_ / c0_); }

// ------------------------------------------------------ smoothing algebra ---

GridFunction SmoothOp::eval(double t, const GridFunction& row) const {
    return eval(t, row, nullptr, {});
}

GridFunction SmoothOp::eval(double t, const GridFunction& row, const GridFunction* deriv,
                            const std::vector<const GridFunction*>& integrals) const {
    if (row.dim() != m) throw std::invalid_argument("SmoothOp::eval: row dimension mismatch");
    if (row.size() < 2) throw std::invalid_argument("SmoothOp::eval: row too small");
    const std::size_t n = row.size();
    const double hw = row.step();

    int maxd = 0;
    bool need_deriv = false;
    for (const auto& b : blocks)
        for (const auto& f : b.factors) {
            maxd = std::max(maxd, f.first);
            if (f.first < 0) need_deriv = true;
        }

    std::vector<GridFunction> irows(static_cast<std::size_t>(maxd));
    for (int d = 1; d <= maxd; ++d) {
        const std::size_t di = static_cast<std::size_t>(d);
        if (di <= integrals.size() && integrals[di - 1] != nullptr) {
            if (integrals[di - 1]->size() != n || integrals[di - 1]->dim() != m)
                throw std::invalid_argument("SmoothOp::eval: integral override shape mismatch");
            irows[di - 1] = *integrals[di - 1];
            continue;
        }
        if (di > itraces.size() || !itraces[di - 1])
            throw std::logic_error("SmoothOp::eval: missing trace for an antiderivative depth");
        const GridFunction& prev = (d == 1) ? row : irows[di - 2];
        Vec base = itraces[di - 1](t);
        GridFunction cur(0.0, hw, n, m);
        for (std::size_t c = 0; c < m; ++c) {
            double acc = base[c];
            cur(0, c) = acc;
            for (std::size_t k = 1; k < n; ++k) {
                acc += 0.5 * hw * (prev(k - 1, c) + prev(k, c));
                cur(k, c) = acc;
            }
        }
        irows[di - 1] = std::move(cur);
    }

    GridFunction drow;
    if (need_deriv) {
        if (deriv != nullptr) {
            if (deriv->size() != n || deriv->dim() != m)
                throw std::invalid_argument("SmoothOp::eval: derivative override shape mismatch");
            drow = *deriv;
        } else {
            drow = finite_diff(row, 1);
        }
    }

    Vec z;
    bool z_set = false;
    std::vector<std::pair<int, GridFunction>> kernels; // key: term*8 + level
    auto kernel_row = [&](int term, int level) -> const GridFunction& {
        int key = term * 8 + level;
        for (const auto& kv : kernels)
            if (kv.first == key) return kv.second;
        if (spec == nullptr) throw std::logic_error("SmoothOp::eval: kernel block without spec");
        if (!z_set) {
            if (!z_arg) throw std::logic_error("SmoothOp::eval: kernel block without z argument");
            z = z_arg(t);
            z_set = true;
        }
        GridFunction ker(0.0, hw, n, 1);
        const PolyTerm& pt = spec->terms[static_cast<std::size_t>(term)];
        for (std::size_t k = 0; k < n; ++k)
            ker(k) = kernel_eval(*spec, pt, level, t, ker.coord(k), z);
        kernels.emplace_back(key, std::move(ker));
        return kernels.back().second;
    };

    auto factor_col = [&](int d, int comp) -> GridFunction {
        if (d == 0) return row.component(static_cast<std::size_t>(comp));
        if (d < 0) return drow.component(static_cast<std::size_t>(comp));
        return irows[static_cast<std::size_t>(d - 1)].component(static_cast<std::size_t>(comp));
    };

    GridFunction out(0.0, hw, n, m);
    for (const auto& b : blocks) {
        double c = b.coeff ? b.coeff(t) : 1.0;
        if (c == 0.0) continue;
        std::vector<GridFunction> items;
        items.reserve(b.factors.size() + 1);
        if (b.kernel_term >= 0) items.push_back(kernel_row(b.kernel_term, b.kernel_level));
        for (const auto& f : b.factors) items.push_back(factor_col(f.first, f.second));
        if (items.empty()) throw std::logic_error("SmoothOp::eval: empty block");
        GridFunction acc = items[0];
        for (std::size_t q = 1; q < items.size(); ++q) acc = conv(acc, items[q]);
        for (std::size_t k = 0; k < n; ++k) out(k, static_cast<std::size_t>(b.j)) += c * acc(k);
    }
    return out;
}

Vec SmoothOp::trace_at(double t) const {
    Vec out(m, 0.0);
    Vec z;
    bool z_set = false;
    for (const auto& b : blocks) {
        std::size_t items = b.factors.size() + (b.kernel_term >= 0 ? 1u : 0u);
        if (items >= 2) continue; // truncated convolutions vanish at w = 0
        double c = b.coeff ? b.coeff(t) : 1.0;
        if (c == 0.0) continue;
        double v = 0.0;
        if (b.kernel_term >= 0) {
            if (!z_set) {
                z = z_arg(t);
                z_set = true;
            }
            v = kernel_eval(*spec, spec->terms[static_cast<std::size_t>(b.kernel_term)],
                            b.kernel_level, t, 0.0, z);
        } else {
            int d = b.factors[0].first;
            int comp = b.factors[0].second;
            if (d == 0) {
                if (!trace0)
                    throw std::logic_error("SmoothOp::trace_at: unknown's trace not available");
                v = trace0(t)[static_cast<std::size_t>(comp)];
            } else if (d >= 1) {
                v = itraces[static_cast<std::size_t>(d - 1)](t)[static_cast<std::size_t>(comp)];
            } else {
                throw std::logic_error("SmoothOp::trace_at: derivative reference has no trace");
            }
        }
        out[static_cast<std::size_t>(b.j)] += c * v;
    }
    return out;
}

SmoothOp smoothing_operation(const PolynomialSpec& spec, std::function<Vec(double)> A0) {
    SmoothOp op;
    op.level = 2;
    op.m = spec.m;
    op.spec = &spec;
    op.z_arg = A0;
    op.trace0 = A0;
    for (std::size_t ti = 0; ti < spec.terms.size(); ++ti) {
        const PolyTerm* tp = &spec.terms[ti];
        const int a = mi_abs(tp->alpha);
        if (a == 0) {
            if (!tp->db_zero) {
                SmoothBlock b;
                b.j = tp->j;
                b.coeff = [](double) { return 1.0; };
                b.kernel_term = static_cast<int>(ti);
                b.kernel_level = 1;
                op.blocks.push_back(std::move(b));
            }
            continue;
        }
        for (const MultiIndex& beta : sub_multiindices(tp->alpha)) {
            MultiIndex gamma(tp->alpha.size());
            int g = 0;
            for (std::size_t i = 0; i < gamma.size(); ++i) {
                gamma[i] = tp->alpha[i] - beta[i];
                g += gamma[i];
            }
            const double binom = mi_binom(tp->alpha, beta);
            std::vector<std::pair<int, int>> factors;
            for (std::size_t i = 0; i < gamma.size(); ++i)
                for (int r = 0; r < gamma[i]; ++r)
                    factors.emplace_back(-1, static_cast<int>(i));

            if (g >= 2) {
                SmoothBlock b;
                b.j = tp->j;
                b.factors = factors;
                b.coeff = [tp, A0, beta, binom](double t) {
                    Vec zz = A0(t);
                    return binom * tp->b0(t, zz) * vec_pow(zz, beta);
                };
                op.blocks.push_back(std::move(b));
            }
            if (!tp->db_zero) {
                // g == 0 is the bare d_w b passthrough of the beta = alpha piece
                SmoothBlock b;
                b.j = tp->j;
                b.factors = factors;
                b.kernel_term = static_cast<int>(ti);
                b.kernel_level = 1;
                b.coeff = [A0, beta, binom](double t) {
                    return binom * vec_pow(A0(t), beta);
                };
                op.blocks.push_back(std::move(b));
            }
        }
    }
    return op;
}

SmoothOp differentiate_op(const SmoothOp& op, std::function<Vec(double)> new_trace) {
    if (op.level <= 0) throw std::logic_error("differentiate_op: operation is already level 0");
    if (!op.trace0)
        throw std::logic_error("differentiate_op: the operation lacks its unknown's trace");
    SmoothOp out;
    out.level = op.level - 1;
    out.m = op.m;
    out.spec = op.spec;
    out.z_arg = op.z_arg;
    out.itraces.reserve(op.itraces.size() + 1);
    out.itraces.push_back(op.trace0);
    for (const auto& f : op.itraces) out.itraces.push_back(f);
    out.trace0 = std::move(new_trace);

    for (const SmoothBlock& src : op.blocks) {
        SmoothBlock b = src;
        for (auto& f : b.factors) f.first += 1;

        if (b.factors.empty()) {
            if (b.kernel_term < 0) throw std::logic_error("differentiate_op: empty block");
            SmoothBlock nb = b;
            nb.kernel_level += 1;
            out.blocks.push_back(std::move(nb));
            continue;
        }
        if (b.factors.size() == 1 && b.kernel_term < 0) {
            // exact derivative of an antiderivative reference
            SmoothBlock nb = b;
            nb.factors[0].first -= 1;
            out.blocks.push_back(std::move(nb));
            continue;
        }

        // convolution fold: one boundary term plus one term with the
        // derivative pushed onto a single item
        std::size_t pick = 0;
        int maxdepth = b.factors[0].first;
        for (std::size_t q = 1; q < b.factors.size(); ++q)
            if (b.factors[q].first > maxdepth) {
                maxdepth = b.factors[q].first;
                pick = q;
            }

        if (maxdepth >= 1) {
            if (static_cast<std::size_t>(maxdepth) > out.itraces.size())
                throw std::logic_error("differentiate_op: missing trace for a deep factor");
            auto tr = out.itraces[static_cast<std::size_t>(maxdepth - 1)];
            const int comp = b.factors[pick].second;
            auto oldc = b.coeff;
            SmoothBlock nb = b;
            nb.factors.erase(nb.factors.begin() + static_cast<std::ptrdiff_t>(pick));
            nb.coeff = [oldc, tr, comp](double t) {
                double c = oldc ? oldc(t) : 1.0;
                return c * tr(t)[static_cast<std::size_t>(comp)];
            };
            out.blocks.push_back(std::move(nb));
            SmoothBlock rb = b;
            rb.factors[pick].first -= 1;
            out.blocks.push_back(std::move(rb));
        } else if (b.kernel_term >= 0) {
            const PolynomialSpec* sp = op.spec;
            const int kt = b.kernel_term, kl = b.kernel_level;
            auto zf = op.z_arg;
            auto oldc = b.coeff;
            SmoothBlock nb = b;
            nb.kernel_term = -1;
            nb.kernel_level = 0;
            nb.coeff = [oldc, sp, kt, kl, zf](double t) {
                double c = oldc ? oldc(t) : 1.0;
                return c * kernel_eval(*sp, sp->terms[static_cast<std::size_t>(kt)], kl, t, 0.0,
                                       zf(t));
            };
            out.blocks.push_back(std::move(nb));
            SmoothBlock rb = b;
            rb.kernel_level += 1;
            out.blocks.push_back(std::move(rb));
        } else {
            // derivative-free fold: boundary through the derived unknown's trace
            const int comp = b.factors[pick].second;
            auto tr = out.trace0;
            auto oldc = b.coeff;
            SmoothBlock nb = b;
            nb.factors.erase(nb.factors.begin() + static_cast<std::ptrdiff_t>(pick));
            nb.coeff = [oldc, tr, comp](double t) {
                double c = oldc ? oldc(t) : 1.0;
                return c * tr(t)[static_cast<std::size_t>(comp)];
            };
            out.blocks.push_back(std::move(nb));
            SmoothBlock rb = b;
            rb.factors[pick].first = -1;
            out.blocks.push_back(std::move(rb));
        }
    }
    return out;
}

ReducedOp reduce_level(const SmoothOp& op, const TraceData& phi0,
                       const std::vector<Eigen::MatrixXd>& M) {
    if (op.level < 1) throw std::invalid_argument("reduce_level: operation is already level 0");
    const GridFunction& val = phi0.value;
    const std::size_t nt = val.size();
    const std::size_t m = val.dim();
    if (m != op.m) throw std::invalid_argument("reduce_level: trace dimension mismatch");
    if (phi0.dot.size() != nt || phi0.dot.dim() != m)
        throw std::invalid_argument("reduce_level: trace derivative grid mismatch");
    if (M.size() != nt) throw std::invalid_argument("reduce_level: transport matrix count mismatch");

    GridFunction b0(val.start(), val.step(), nt, m);
    const Eigen::Index mi = static_cast<Eigen::Index>(m);
    for (std::size_t i = 0; i < nt; ++i) {
        Vec g = op.trace_at(val.coord(i));
        Eigen::VectorXd rhs(mi);
        for (Eigen::Index c = 0; c < mi; ++c)
            rhs(c) = -phi0.dot(i, static_cast<std::size_t>(c)) + g[static_cast<std::size_t>(c)];
        Eigen::FullPivLU<Eigen::MatrixXd> lu(M[i]);
        if (!lu.isInvertible())
            throw std::runtime_error("reduce_level: singular transport matrix");
        Eigen::VectorXd x = lu.solve(rhs);
        for (Eigen::Index c = 0; c < mi; ++c) b0(i, static_cast<std::size_t>(c)) = x(c);
    }
    return {differentiate_op(op, interp_fn(b0)), b0};
}

RowOp as_row_op(const SmoothOp& op) {
    auto p = std::make_shared<SmoothOp>(op);
    return [p](double t, const GridFunction& row) { return p->eval(t, row); };
}

RowOp diagonalize_system(const RowOp& G, const Diagonalization& diag) {
    auto R = std::make_shared<std::vector<Eigen::MatrixXd>>(diag.R);
    auto Rd = std::make_shared<std::vector<Eigen::MatrixXd>>(diag.Rdot);
    auto Ri = std::make_shared<std::vector<Eigen::MatrixXd>>(diag.Rinv);
    const double ht = diag.ht();
    const std::size_t m = diag.m();
    RowOp g = G;
    return [R, Rd, Ri, g, ht, m](double t, const GridFunction& X) {
        if (X.dim() != m) throw std::invalid_argument("diagonal frame: row dimension mismatch");
        Eigen::MatrixXd Rm = interp_mats(*R, ht, t);
        Eigen::MatrixXd Rdm = interp_mats(*Rd, ht, t);
        Eigen::MatrixXd Rim = interp_mats(*Ri, ht, t);
        const std::size_t n = X.size();
        const Eigen::Index mi = static_cast<Eigen::Index>(m);
        GridFunction C(0.0, X.step(), n, m);
        Eigen::VectorXd v(mi), cvec(mi);
        for (std::size_t k = 0; k < n; ++k) {
            for (Eigen::Index c = 0; c < mi; ++c) v(c) = X(k, static_cast<std::size_t>(c));
            cvec = Rim * v;
            for (Eigen::Index c = 0; c < mi; ++c) C(k, static_cast<std::size_t>(c)) = cvec(c);
        }
        GridFunction gc = g(t, C);
        GridFunction out(0.0, X.step(), n, m);
        Eigen::VectorXd gv(mi), ov(mi);
        for (std::size_t k = 0; k < n; ++k) {
            for (Eigen::Index c = 0; c < mi; ++c) {
                v(c) = C(k, static_cast<std::size_t>(c));
                gv(c) = gc(k, static_cast<std::size_t>(c));
            }
            ov = Rdm * v + Rm * gv;
            for (Eigen::Index c = 0; c < mi; ++c) out(k, static_cast<std::size_t>(c)) = ov(c);
        }
        return out;
    };
}

double contraction_delta(double c0, double C4, double G1bound, double G2bound, std::size_t m) {
    if (!(c0 > 0.0) || !(C4 > 0.0) || m == 0)
        throw std::invalid_argument("contraction_delta: c0, C4 and m must be positive");
    if (G1bound < 0.0 || G2bound < 0.0)
        throw std::invalid_argument("contraction_delta: bounds must be nonnegative");
    const double big = std::numeric_limits<double>::infinity();
    double d1 = G2bound > 0.0 ? 0.5 * c0 / G2bound : big;
    double d2 = G1bound > 0.0 ? c0 * C4 / G1bound : big;
    return std::min(d1, d2);
}

OperationBounds estimate_operation_bounds(const RowOp& G, double eps1, double delta,
                                          std::size_t m, double radius, std::size_t n_samples,
                                          std::uint64_t seed) {
    if (!(delta > 0.0) || !(eps1 >= 0.0) || m == 0 || !(radius > 0.0))
        throw std::invalid_argument("estimate_operation_bounds: bad box or radius");
    const std::size_t nw = 65;
    const double hw = delta / static_cast<double>(nw - 1);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> amp(0.15, 1.0);
    const int n_modes = 4;
    const double pi = 3.14159265358979323846;

    auto sample_field = [&]() {
        GridFunction f(0.0, hw, nw, m);
        for (std::size_t c = 0; c < m; ++c) {
            double a0 = unif(rng);
            double as[n_modes], ph[n_modes];
            for (int q = 0; q < n_modes; ++q) {
                as[q] = unif(rng) / static_cast<double>(q + 1);
                ph[q] = pi * unif(rng);
            }
            for (std::size_t k = 0; k < nw; ++k) {
                double w = f.coord(k);
                double v = a0;
                for (int q = 0; q < n_modes; ++q)
                    v += as[q] * std::cos(pi * static_cast<double>(q + 1) * w / delta + ph[q]);
                f(k, c) = v;
            }
        }
        double sup = f.sup_norm();
        double target = amp(rng) * radius;
        if (sup > 0.0) {
            double sc = target / sup;
            for (double& x : f.raw()) x *= sc;
        }
        return f;
    };

    const double tfrac[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
    double G1 = 0.0, G2 = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        GridFunction f1 = sample_field();
        GridFunction f2 = sample_field();
        double dn = row_sup_diff(f1, f2);
        for (double tf : tfrac) {
            double t = eps1 * tf;
            GridFunction g1 = G(t, f1);
            GridFunction g2 = G(t, f2);
            G1 = std::max({G1, g1.sup_norm(), g2.sup_norm()});
            if (dn > 1e-12) G2 = std::max(G2, row_sup_diff(g1, g2) / dn);
        }
    }
    return {1.5 * G1, 1.5 * G2, radius};
}

// ------------------------------------------------------------------ Picard ---

PicardResult picard_solve_L0(const RowOp& G, const std::function<Vec(double)>& L0,
                             const std::vector<CharacteristicChart>& charts,
                             const PicardOptions& opts) {
    const std::size_t m = charts.size();
    if (m == 0) throw std::invalid_argument("picard_solve_L0: no charts");
    const double eps1 = charts[0].eps1();
    const double delta0 = charts[0].delta0();
    double c0 = charts[0].c0();
    for (const auto& ch : charts) {
        if (std::abs(ch.eps1() - eps1) > 1e-9 || std::abs(ch.delta0() - delta0) > 1e-9)
            throw std::invalid_argument("picard_solve_L0: charts disagree on the box");
        c0 = std::min(c0, ch.c0());
    }

    const std::size_t nt = std::max<std::size_t>(opts.nt, 3);
    const std::size_t nw = std::max<std::size_t>(opts.nw ? opts.nw : nt, 3);
    const double ht = eps1 / static_cast<double>(nt - 1);
    const double hw = delta0 / static_cast<double>(nw - 1);
    const double vtop = std::min(eps1, delta0 / c0);
    const std::size_t nu = nt + nw - 1;
    const std::size_t nv = nt;
    const double hu = (eps1 + delta0) / static_cast<double>(nu - 1);
    const double hv = vtop / static_cast<double>(nv - 1);

    std::vector<std::vector<double>> L0u(m, std::vector<double>(nu));
    for (std::size_t iu = 0; iu < nu; ++iu) {
        double u = -delta0 + hu * static_cast<double>(iu);
        Vec vals = L0(u);
        for (std::size_t j = 0; j < m; ++j) L0u[j][iu] = vals[j];
    }

    // bilinear stencil: base index into a lattice with inner stride `stride`
    struct B4 {
        std::size_t q = 0;
        double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
    };
    auto stencil = [](double a, double ha, std::size_t na, double b, double hb, std::size_t nb,
                      std::size_t stride) {
        double sa = std::clamp(a / ha, 0.0, static_cast<double>(na - 1));
        double sb = std::clamp(b / hb, 0.0, static_cast<double>(nb - 1));
        std::size_t ia = std::min(static_cast<std::size_t>(sa), na - 2);
        std::size_t ib = std::min(static_cast<std::size_t>(sb), nb - 2);
        double fa = sa - static_cast<double>(ia);
        double fb = sb - static_cast<double>(ib);
        B4 s;
        s.q = ia * stride + ib;
        s.w00 = (1 - fa) * (1 - fb);
        s.w01 = (1 - fa) * fb;
        s.w10 = fa * (1 - fb);
        s.w11 = fa * fb;
        return s;
    };

    // chart -> box pullback stencils (chart lattice: iu*nv + iv)
    std::vector<std::vector<B4>> pull(m, std::vector<B4>(nt * nw));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t it = 0; it < nt; ++it)
            for (std::size_t iw = 0; iw < nw; ++iw) {
                auto uv = charts[j].unmap(ht * static_cast<double>(it),
                                          hw * static_cast<double>(iw));
                pull[j][it * nw + iw] =
                    stencil(uv.first + delta0, hu, nu, uv.second, hv, nv, nv);
            }

    // box samples of the integrand along each chart curve (box lattice: it*nw + iw)
    std::vector<std::vector<B4>> curve(m, std::vector<B4>(nu * nv));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t iu = 0; iu < nu; ++iu) {
            double u = -delta0 + hu * static_cast<double>(iu);
            for (std::size_t iv = 0; iv < nv; ++iv) {
                auto tw = charts[j].map(u, hv * static_cast<double>(iv));
                double tc = std::clamp(tw.first, 0.0, eps1);
                double wc = std::clamp(tw.second, 0.0, delta0);
                curve[j][iu * nv + iv] = stencil(tc, ht, nt, wc, hw, nw, nw);
            }
        }

    auto lat = [](const std::vector<double>& d, const B4& s, std::size_t big_stride) {
        return s.w00 * d[s.q] + s.w01 * d[s.q + 1] + s.w10 * d[s.q + big_stride] +
               s.w11 * d[s.q + big_stride + 1];
    };

    std::vector<std::vector<double>> L(m), Ln(m);
    for (std::size_t j = 0; j < m; ++j) {
        L[j].assign(nu * nv, 0.0);
        for (std::size_t iu = 0; iu < nu; ++iu)
            for (std::size_t iv = 0; iv < nv; ++iv) L[j][iu * nv + iv] = L0u[j][iu];
        Ln[j] = L[j];
    }

    WField A(ht, hw, nt, nw, m);
    std::vector<std::vector<double>> Gval(m, std::vector<double>(nt * nw, 0.0));
    const std::size_t nthreads = resolve_thread_count(0);

    auto pullback = [&]() {
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t q = 0; q < nt * nw; ++q)
                A.data[q * m + j] = lat(L[j], pull[j][q], nv);
    };

    PicardResult res;
    double prev_rho = -1.0;
    int bad = 0;
    for (int k = 1; k <= opts.max_iter; ++k) {
        pullback();
        parallel_for(nt, [&](std::size_t it) {
            GridFunction g = G(A.t(it), A.row(it));
            for (std::size_t iw = 0; iw < nw; ++iw)
                for (std::size_t j = 0; j < m; ++j) Gval[j][it * nw + iw] = g(iw, j);
        }, nthreads);

        double rho = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t iu = 0; iu < nu; ++iu) {
                double acc = 0.0;
                double gprev = lat(Gval[j], curve[j][iu * nv], nw);
                Ln[j][iu * nv] = L0u[j][iu];
                for (std::size_t iv = 1; iv < nv; ++iv) {
                    double gcur = lat(Gval[j], curve[j][iu * nv + iv], nw);
                    acc += 0.5 * hv * (gprev + gcur);
                    gprev = gcur;
                    Ln[j][iu * nv + iv] = L0u[j][iu] + acc;
                }
            }
            for (std::size_t q = 0; q < nu * nv; ++q)
                rho = std::max(rho, std::abs(Ln[j][q] - L[j][q]));
            L[j].swap(Ln[j]);
        }

        res.rho_history.push_back(rho);
        res.iters = k;
        res.rho_final = rho;
        if (prev_rho > 0.0) {
            double ratio = rho / prev_rho;
            if (prev_rho > 10.0 * opts.tol) res.ratio_max = std::max(res.ratio_max, ratio);
            if (ratio >= 1.0) {
                if (++bad >= 3)
                    throw std::runtime_error(
                        "picard_solve_L0: no contraction (ratio " + std::to_string(ratio) + ")");
            } else {
                bad = 0;
            }
        }
        prev_rho = rho;
        if (rho <= opts.tol) break;
        if (k == opts.max_iter)
            throw std::runtime_error("picard_solve_L0: max_iter exceeded at update size " +
                                     std::to_string(rho));
    }

    pullback();
    res.A = std::move(A);
    return res;
}

// ------------------------------------------------------------ gluing it up ---

namespace {

// tau = T - t with every density negated: the uniqueness-regime problem seen
// by the existence machinery
PolynomialSpec mirrored_spec(const PolynomialSpec& spec, double T) {
    PolynomialSpec out = spec;
    auto flip = [T](const CoeffFn& f) -> CoeffFn {
        if (!f) return {};
        return [f, T](double t, double w, const Vec& z) { return -f(T - t, w, z); };
    };
    auto flip_tr = [T](const TraceFn& f) -> TraceFn {
        if (!f) return {};
        return [f, T](double t, const Vec& z) { return -f(T - t, z); };
    };
    for (auto& term : out.terms) {
        term.b = flip(term.b);
        term.db = flip(term.db);
        term.d2b = flip(term.d2b);
        term.d3b = flip(term.d3b);
        term.b0 = flip_tr(term.b0);
        term.db0 = flip_tr(term.db0);
        term.d2b0 = flip_tr(term.d2b0);
        for (auto& c : term.xpoly) c = flip_tr(c);
    }
    out.remainder = {};
    return out;
}

TraceData reversed_trace(const TraceData& A0) {
    const std::size_t n = A0.value.size(), m = A0.value.dim();
    TraceData out;
    out.value = GridFunction(0.0, A0.value.step(), n, m);
    out.dot = GridFunction(0.0, A0.value.step(), n, m);
    out.ddot = GridFunction(0.0, A0.value.step(), n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < m; ++c) {
            out.value(i, c) = A0.value(n - 1 - i, c);
            out.dot(i, c) = -A0.dot(n - 1 - i, c);
            if (A0.ddot.size() == n) out.ddot(i, c) = A0.ddot(n - 1 - i, c);
        }
    return out;
}

WField reversed_field(const WField& f) {
    WField out(f.ht, f.hw, f.nt, f.nw, f.dim);
    for (std::size_t it = 0; it < f.nt; ++it)
        for (std::size_t iw = 0; iw < f.nw; ++iw)
            for (std::size_t c = 0; c < f.dim; ++c)
                out.at(it, iw, c) = f.at(f.nt - 1 - it, iw, c);
    return out;
}

GridFunction reversed_grid(const GridFunction& g) {
    GridFunction out(g.start(), g.step(), g.size(), g.dim());
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t c = 0; c < g.dim(); ++c) out(i, c) = g(g.size() - 1 - i, c);
    return out;
}

PhatSolution solve_phat_existence(const PolynomialSpec& spec, const TraceData& A0,
                                  const Diagonalization& diag, double delta,
                                  const PhatOptions& opts) {
    const GridFunction& val = A0.value;
    const std::size_t nt = val.size();
    const std::size_t m = val.dim();
    const double ht = val.step();
    const double eps1 = val.end();
    if (nt < 4) throw std::invalid_argument("solve_phat_pde: trace grid too small");
    if (std::abs(val.start()) > 1e-12)
        throw std::invalid_argument("solve_phat_pde: trace grid must start at t=0");
    if (m != spec.m) throw std::invalid_argument("solve_phat_pde: trace dimension mismatch");
    if (diag.nt() != nt || std::abs(diag.ht() - ht) > 1e-12 || diag.m() != m)
        throw std::invalid_argument("solve_phat_pde: diagonalization grid mismatch");

    std::vector<Eigen::MatrixXd> Ms = trace_transport_matrix(spec, val, Regime::Existence);

    SmoothOp op2 = smoothing_operation(spec, interp_fn(val));
    ReducedOp r1 = reduce_level(op2, A0, Ms);
    TraceData B0d = TraceData::from_values(r1.b0);
    ReducedOp r2 = reduce_level(r1.op, B0d, Ms);

    const Eigen::Index mi = static_cast<Eigen::Index>(m);
    GridFunction X0(0.0, ht, nt, m);
    Eigen::VectorXd cv(mi), xv(mi);
    for (std::size_t i = 0; i < nt; ++i) {
        for (Eigen::Index c = 0; c < mi; ++c) cv(c) = r2.b0(i, static_cast<std::size_t>(c));
        xv = diag.R[i] * cv;
        for (Eigen::Index c = 0; c < mi; ++c) X0(i, static_cast<std::size_t>(c)) = xv(c);
    }

    RowOp gt = diagonalize_system(as_row_op(r2.op), diag);

    std::vector<CharacteristicChart> charts;
    charts.reserve(m);
    for (std::size_t j = 0; j < m; ++j)
        charts.emplace_back(diag.lambda.component(j), delta, j);

    PhatSolution sol;
    sol.delta = delta;
    sol.b0 = r1.b0;
    sol.c0_trace = r2.b0;
    sol.X0 = X0;
    sol.C4 = std::max(X0.sup_norm(), 1e-8);
    double radius = std::sqrt(static_cast<double>(m)) * 2.0 * sol.C4;
    sol.bounds = estimate_operation_bounds(gt, eps1, delta, m, radius, opts.n_bound_samples);
    sol.contraction = contraction_delta(diag.c0, sol.C4, sol.bounds.G1, sol.bounds.G2, m);
    sol.ratio_bound = delta / diag.c0 * sol.bounds.G2;

    auto X0fun = interp_fn(X0);
    PicardOptions popts;
    popts.nt = nt;
    popts.nw = opts.nw ? opts.nw : nt;
    popts.tol = opts.tol;
    popts.max_iter = opts.max_iter;
    PicardResult pr = picard_solve_L0(
        gt, [X0fun](double u) { return X0fun(std::max(u, 0.0)); }, charts, popts);
    sol.iters = pr.iters;
    sol.ratio_max = pr.ratio_max;
    sol.rho_final = pr.rho_final;

    const std::size_t nw = pr.A.nw;
    const double hw = pr.A.hw;
    WField C(ht, hw, nt, nw, m), B(ht, hw, nt, nw, m), A(ht, hw, nt, nw, m);
    for (std::size_t it = 0; it < nt; ++it) {
        const Eigen::MatrixXd& Ri = diag.Rinv[it];
        for (std::size_t iw = 0; iw < nw; ++iw) {
            for (Eigen::Index c = 0; c < mi; ++c)
                xv(c) = pr.A.at(it, iw, static_cast<std::size_t>(c));
            cv = Ri * xv;
            for (Eigen::Index c = 0; c < mi; ++c)
                C.at(it, iw, static_cast<std::size_t>(c)) = cv(c);
        }
        for (std::size_t c = 0; c < m; ++c) {
            double accB = r1.b0(it, c), accA = val(it, c);
            B.at(it, 0, c) = accB;
            A.at(it, 0, c) = accA;
            for (std::size_t iw = 1; iw < nw; ++iw) {
                accB += 0.5 * hw * (C.at(it, iw - 1, c) + C.at(it, iw, c));
                B.at(it, iw, c) = accB;
                accA += 0.5 * hw * (B.at(it, iw - 1, c) + B.at(it, iw, c));
                A.at(it, iw, c) = accA;
            }
        }
    }

    // strong-form residual spot check
    double res_sup = 0.0;
    const std::size_t n_res = std::min<std::size_t>(opts.n_residual_rows, nt - 2);
    for (std::size_t q = 0; q < n_res; ++q) {
        std::size_t it = 1 + q * (nt - 3) / std::max<std::size_t>(n_res - 1, 1);
        GridFunction up = A.row(it + 1), dn = A.row(it - 1);
        GridFunction ph = assemble_phat(spec, A.row(it), val.node(it), A.t(it));
        for (std::size_t iw = 0; iw < nw; ++iw)
            for (std::size_t c = 0; c < m; ++c) {
                double dt = (up(iw, c) - dn(iw, c)) / (2.0 * ht);
                res_sup = std::max(res_sup, std::abs(dt - ph(iw, c)));
            }
    }
    sol.residual_sup = res_sup;
    sol.A = std::move(A);
    sol.B = std::move(B);
    sol.C = std::move(C);
    return sol;
}

} // namespace

PhatSolution solve_phat_pde(const PolynomialSpec& spec, const TraceData& A0,
                            const Diagonalization& diag, double delta, Regime regime,
                            const PhatOptions& opts) {
    if (!(delta > 0.0)) throw std::invalid_argument("solve_phat_pde: delta must be positive");
    if (delta > spec.eps2 + 1e-12)
        throw std::invalid_argument("solve_phat_pde: delta exceeds the density domain");
    if (regime == Regime::Existence) return solve_phat_existence(spec, A0, diag, delta, opts);

    // uniqueness regime: solve the time-reversed negated problem
    const double T = A0.value.end();
    PolynomialSpec specQ = mirrored_spec(spec, T);
    TraceData A0r = reversed_trace(A0);
    std::vector<Eigen::MatrixXd> Ms =
        trace_transport_matrix(specQ, A0r.value, Regime::Existence);
    const double ht = A0.value.step();
    Diagonalization diag_r = make_diagonalization(
        [&Ms, ht](double t) -> Eigen::MatrixXd { return interp_mats(Ms, ht, t); }, ht,
        A0.value.size());
    if (diag_r.m() != diag.m())
        throw std::invalid_argument("solve_phat_pde: diagonalization dimension mismatch");
    PhatSolution sub = solve_phat_existence(specQ, A0r, diag_r, delta, opts);
    sub.A = reversed_field(sub.A);
    sub.B = reversed_field(sub.B);
    sub.C = reversed_field(sub.C);
    sub.b0 = reversed_grid(sub.b0);
    sub.c0_trace = reversed_grid(sub.c0_trace);
    sub.X0 = reversed_grid(sub.X0);
    return sub;
}

// ------------------------------------------------- initial-data orientation ---

IvpSolution solve_phat_ivp(const PolynomialSpec& spec, const GridFunction& A_init,
                           double t_max, const IvpOptions& opts) {
    const std::size_t m = spec.m;
    if (A_init.dim() != m) throw std::invalid_argument("solve_phat_ivp: data dimension mismatch");
    if (A_init.size() < 4) throw std::invalid_argument("solve_phat_ivp: data grid too small");
    if (std::abs(A_init.start()) > 1e-12)
        throw std::invalid_argument("solve_phat_ivp: data grid must start at w=0");
    if (!(t_max > 0.0)) throw std::invalid_argument("solve_phat_ivp: t_max must be positive");
    const double dprime = A_init.end();
    if (dprime > spec.eps2 + 1e-12)
        throw std::invalid_argument("solve_phat_ivp: data extends past the density domain");

    const std::size_t nt = std::max<std::size_t>(opts.nt, 5);
    const double ht = t_max / static_cast<double>(nt - 1);
    const std::size_t nw = std::max<std::size_t>(opts.nw ? opts.nw : 129, 5);
    const double hw = dprime / static_cast<double>(nw - 1);

    GridFunction a_init(0.0, hw, nw, m);
    {
        auto f = interp_fn(A_init);
        for (std::size_t k = 0; k < nw; ++k) a_init.set_node(k, f(a_init.coord(k)));
    }
    GridFunction b_init = finite_diff(a_init, 1);
    GridFunction c_init = finite_diff(a_init, 2);

    WField F[3] = {WField(ht, hw, nt, nw, m), WField(ht, hw, nt, nw, m),
                   WField(ht, hw, nt, nw, m)};
    for (std::size_t it = 0; it < nt; ++it) {
        F[0].set_row(it, a_init);
        F[1].set_row(it, b_init);
        F[2].set_row(it, c_init);
    }
    WField Gc[3] = {WField(ht, hw, nt, nw, m), WField(ht, hw, nt, nw, m),
                    WField(ht, hw, nt, nw, m)};
    WField Fn[3] = {F[0], F[1], F[2]};

    const Eigen::Index mi = static_cast<Eigen::Index>(m);
    Diagonalization dg;
    std::vector<std::size_t> vmax(nt, nw - 1); // last node inside the shrinking region

    IvpSolution out;
    out.delta_prime = dprime;
    out.t_end = t_max;

    double prev_rho = -1.0;
    int bad = 0;
    for (int k = 1; k <= opts.max_iter; ++k) {
        // coefficients frozen at the current iterate's traces
        GridFunction atr(0.0, ht, nt, m), btr(0.0, ht, nt, m), ctr(0.0, ht, nt, m);
        for (std::size_t it = 0; it < nt; ++it)
            for (std::size_t c = 0; c < m; ++c) {
                atr(it, c) = F[0].at(it, 0, c);
                btr(it, c) = F[1].at(it, 0, c);
                ctr(it, c) = F[2].at(it, 0, c);
            }
        std::vector<Eigen::MatrixXd> Ms =
            trace_transport_matrix(spec, atr, Regime::Uniqueness);
        dg = make_diagonalization(
            [&Ms, ht](double t) -> Eigen::MatrixXd { return interp_mats(Ms, ht, t); }, ht, nt);

        // Rows whose backward cone still meets the data; beyond them the
        // march would be pure extension, so those rows are frozen instead.
        std::size_t n_cone = 1;
        for (std::size_t it = 0; it < nt; ++it) {
            double g0 = dg.gamma0(it);
            if (g0 <= dprime * (1.0 + 1e-12)) n_cone = it + 1;
            vmax[it] = g0 >= dprime ? 0
                                    : std::min<std::size_t>(
                                          nw - 1, static_cast<std::size_t>(
                                                      (dprime - g0) / hw + 1e-9));
        }

        for (std::size_t it = 0; it < n_cone; ++it)
            if (!spec.U.contains(atr.node(it)))
                throw std::runtime_error("solve_phat_ivp: trace left the coefficient box");

        auto afun = interp_fn(atr);
        SmoothOp op2 = smoothing_operation(spec, afun);
        SmoothOp op1 = differentiate_op(op2, interp_fn(btr));
        SmoothOp op0 = differentiate_op(op1, interp_fn(ctr));

        // conjugated integrands for all three levels
        parallel_for(nt, [&](std::size_t it) {
            double t = F[0].t(it);
            GridFunction Ar = F[0].row(it), Br = F[1].row(it), Cr = F[2].row(it);
            GridFunction g[3] = {op2.eval(t, Ar, &Br, {}), op1.eval(t, Br, &Cr, {&Ar}),
                                 op0.eval(t, Cr, nullptr, {&Br})};
            const GridFunction* rows[3] = {&Ar, &Br, &Cr};
            const Eigen::MatrixXd& R = dg.R[it];
            const Eigen::MatrixXd& Rd = dg.Rdot[it];
            Eigen::VectorXd fv(mi), gv(mi), ov(mi);
            for (int lv = 0; lv < 3; ++lv)
                for (std::size_t iw = 0; iw < nw; ++iw) {
                    for (Eigen::Index c = 0; c < mi; ++c) {
                        fv(c) = (*rows[lv])(iw, static_cast<std::size_t>(c));
                        gv(c) = g[lv](iw, static_cast<std::size_t>(c));
                    }
                    ov = Rd * fv + R * gv;
                    for (Eigen::Index c = 0; c < mi; ++c)
                        Gc[lv].at(it, iw, static_cast<std::size_t>(c)) = ov(c);
                }
        }, resolve_thread_count(0));

        // conjugated initial rows
        GridFunction init_c[3];
        for (int lv = 0; lv < 3; ++lv) {
            const GridFunction& src = lv == 0 ? a_init : (lv == 1 ? b_init : c_init);
            GridFunction g(0.0, hw, nw, m);
            Eigen::VectorXd fv(mi), ov(mi);
            for (std::size_t iw = 0; iw < nw; ++iw) {
                for (Eigen::Index c = 0; c < mi; ++c) fv(c) = src(iw, static_cast<std::size_t>(c));
                ov = dg.R[0] * fv;
                for (Eigen::Index c = 0; c < mi; ++c) g(iw, static_cast<std::size_t>(c)) = ov(c);
            }
            init_c[lv] = std::move(g);
        }
        std::vector<std::function<Vec(double)>> init_fn;
        for (int lv = 0; lv < 3; ++lv) init_fn.push_back(interp_fn(init_c[lv]));

        // sample a conjugated integrand row linearly in w
        auto gsample = [&](int lv, std::size_t is, std::size_t j, double wc) {
            double s = std::clamp(wc / hw, 0.0, static_cast<double>(nw - 1));
            std::size_t i0 = std::min(static_cast<std::size_t>(s), nw - 2);
            double f = s - static_cast<double>(i0);
            return (1.0 - f) * Gc[lv].at(is, i0, j) + f * Gc[lv].at(is, i0 + 1, j);
        };

        // integrate each level along the left-moving curves, then undo the frame
        double rho = 0.0;
        Eigen::VectorXd conj(mi), orig(mi);
        for (std::size_t it = 0; it < n_cone; ++it) {
            const Eigen::MatrixXd& Ri = dg.Rinv[it];
            for (std::size_t iw = 0; iw <= vmax[it]; ++iw) {
                double w = hw * static_cast<double>(iw);
                for (int lv = 0; lv < 3; ++lv) {
                    for (std::size_t j = 0; j < m; ++j) {
                        double w0 = w + dg.Lambda(it, j);
                        double acc = 0.0;
                        if (it > 0) {
                            double gp = gsample(lv, 0, j, w0 - dg.Lambda(0, j));
                            for (std::size_t is = 1; is <= it; ++is) {
                                double gc = gsample(lv, is, j, w0 - dg.Lambda(is, j));
                                acc += 0.5 * ht * (gp + gc);
                                gp = gc;
                            }
                        }
                        conj(static_cast<Eigen::Index>(j)) =
                            init_fn[static_cast<std::size_t>(lv)](w0)[j] + acc;
                    }
                    orig = Ri * conj;
                    for (std::size_t c = 0; c < m; ++c) {
                        double nv = orig(static_cast<Eigen::Index>(c));
                        rho = std::max(rho, std::abs(nv - F[lv].at(it, iw, c)));
                        Fn[lv].at(it, iw, c) = nv;
                    }
                }
            }
            // constant extension past the shrinking region
            for (std::size_t iw = vmax[it] + 1; iw < nw; ++iw)
                for (int lv = 0; lv < 3; ++lv)
                    for (std::size_t c = 0; c < m; ++c)
                        Fn[lv].at(it, iw, c) = Fn[lv].at(it, vmax[it], c);
        }
        // hold rows past the cone at the last certified one
        for (std::size_t it = n_cone; it < nt; ++it)
            for (int lv = 0; lv < 3; ++lv)
                for (std::size_t iw = 0; iw < nw; ++iw)
                    for (std::size_t c = 0; c < m; ++c)
                        Fn[lv].at(it, iw, c) = Fn[lv].at(n_cone - 1, iw, c);
        for (int lv = 0; lv < 3; ++lv) std::swap(F[lv], Fn[lv]);

        out.iters = k;
        out.rho_final = rho;
        if (prev_rho > 0.0) {
            double ratio = rho / prev_rho;
            if (prev_rho > 10.0 * opts.tol) out.ratio_max = std::max(out.ratio_max, ratio);
            if (ratio >= 1.0) {
                if (++bad >= 3)
                    throw std::runtime_error(
                        "solve_phat_ivp: no contraction (ratio " + std::to_string(ratio) + ")");
            } else {
                bad = 0;
            }
        }
        prev_rho = rho;
        if (rho <= opts.tol) break;
        if (k == opts.max_iter)
            throw std::runtime_error("solve_phat_ivp: max_iter exceeded at update size " +
                                     std::to_string(rho));
    }

    out.gamma0 = dg.gamma0;
    if (dg.gamma0(nt - 1) < dprime) {
        out.delta0 = t_max;
    } else {
        MonotoneInterpolant ginv(dg.gamma0);
        out.delta0 = std::min(t_max, ginv.invert(dprime));
    }
    out.A = F[0];
    out.trace = out.A.trace();
    return out;
}

// ----------------------------------------------------------------- Gronwall ---

GronwallReport gronwall_compare(const WField& A, const WField& B, const PolynomialSpec& spec,
                                const Diagonalization& diag, double agree_tol,
                                double verdict_tol) {
    if (A.nt != B.nt || A.nw != B.nw || A.dim != B.dim || std::abs(A.ht - B.ht) > 1e-12 ||
        std::abs(A.hw - B.hw) > 1e-12)
        throw std::invalid_argument("gronwall_compare: mismatched grids");
    if (A.dim != spec.m || diag.m() != A.dim)
        throw std::invalid_argument("gronwall_compare: dimension mismatch");
    if (diag.nt() != A.nt || std::abs(diag.ht() - A.ht) > 1e-12)
        throw std::invalid_argument("gronwall_compare: diagonalization grid mismatch");

    const std::size_t nt = A.nt, nw = A.nw, m = A.dim;
    GronwallReport rep;

    std::size_t agree = 0;
    for (std::size_t iw = 0; iw < nw; ++iw) {
        double d = 0.0;
        for (std::size_t c = 0; c < m; ++c)
            d = std::max(d, std::abs(A.at(0, iw, c) - B.at(0, iw, c)));
        if (d > agree_tol) break;
        agree = iw + 1;
    }
    double dprime = agree == 0 ? 0.0 : A.hw * static_cast<double>(agree - 1);
    dprime = std::min(dprime, spec.eps2);
    rep.delta_prime = dprime;

    std::size_t n_val = 0;
    for (std::size_t it = 0; it < nt; ++it)
        if (diag.gamma0(it) <= dprime + 1e-15) n_val = it + 1;
    n_val = std::max<std::size_t>(n_val, 1);
    rep.E = GridFunction(0.0, A.ht, n_val, 1);
    for (std::size_t it = 0; it < n_val; ++it) {
        double wcap = dprime - diag.gamma0(it);
        std::size_t kmax = wcap <= 0.0 ? 0
                                       : std::min<std::size_t>(
                                             nw - 1,
                                             static_cast<std::size_t>(wcap / A.hw + 1e-9));
        double sup = 0.0;
        for (std::size_t iw = 0; iw <= kmax; ++iw)
            for (std::size_t c = 0; c < m; ++c)
                sup = std::max(sup, std::abs(A.at(it, iw, c) - B.at(it, iw, c)));
        rep.E(it) = sup;
    }

    const double eps1 = A.ht * static_cast<double>(nt - 1);
    if (diag.gamma0(nt - 1) < dprime) {
        rep.delta0 = eps1;
    } else {
        MonotoneInterpolant ginv(diag.gamma0);
        rep.delta0 = std::min(eps1, ginv.invert(dprime));
    }

    double tsup = 0.0;
    for (std::size_t it = 0; it < nt; ++it) {
        if (A.t(it) > rep.delta0 + 1e-12) break;
        for (std::size_t c = 0; c < m; ++c)
            tsup = std::max(tsup, std::abs(A.at(it, 0, c) - B.at(it, 0, c)));
    }
    rep.trace_sup = tsup;
    rep.traces_agree = tsup <= verdict_tol;

    double rate = 0.0;
    for (std::size_t it = 0; it + 1 < n_val; ++it)
        if (rep.E(it) > 1e-300 && rep.E(it + 1) > 1e-300)
            rate = std::max(rate, (std::log(rep.E(it + 1)) - std::log(rep.E(it))) / A.ht);
    rep.growth_rate = rate;
    return rep;
}

} // namespace dq
