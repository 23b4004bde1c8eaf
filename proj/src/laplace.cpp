#include "dq/laplace.hpp"
#include "dq/numerics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace dq {

void LaplaceSamples::validate() const {
    if (x_nodes.size() != values.size())
        throw std::invalid_argument("LaplaceSamples: node/value count mismatch");
    if (x_nodes.size() < 2) throw std::invalid_argument("LaplaceSamples: need >= 2 samples");
    for (std::size_t i = 0; i < x_nodes.size(); ++i) {
        if (!(x_nodes[i] > 0.0)) throw std::invalid_argument("LaplaceSamples: x nodes must be positive");
        if (i > 0 && !(x_nodes[i] < x_nodes[i - 1]))
            throw std::invalid_argument("LaplaceSamples: x nodes must be strictly decreasing");
        if (values[i].size() != values[0].size())
            throw std::invalid_argument("LaplaceSamples: inconsistent value dimension");
    }
}

SegWeights exp_segment_weights(double t /* = h/x */) {
    double omE = -std::expm1(-t); // 1 - e^{-t}, accurate for small t
    double g1;                    // (1-E)/t - E
    if (t < 1e-4) {
        g1 = t * (0.5 + t * (-1.0 / 3.0 + t * (1.0 / 8.0 - t / 30.0)));
    } else {
        g1 = omE / t - (1.0 - omE);
    }
    return {omE - g1, g1};
}

Vec laplace_forward(const GridFunction& A, double x) {
    if (!(x > 0.0)) throw std::domain_error("laplace_forward: x must be positive");
    if (std::abs(A.start()) > 1e-12) throw std::invalid_argument("laplace_forward: grid must start at 0");
    std::size_t n = A.size(), m = A.dim();
    double h = A.step();
    double t = h / x;
    SegWeights sw = exp_segment_weights(t);
    Vec out(m, 0.0);
    double prefix = 1.0; // e^{-w_k/x}
    for (std::size_t k = 0; k + 1 < n; ++k) {
        if (prefix == 0.0) break;
        for (std::size_t c = 0; c < m; ++c) out[c] += prefix * (sw.left * A(k, c) + sw.right * A(k + 1, c));
        prefix *= std::exp(-t);
    }
    return out;
}

std::vector<std::vector<double>> laplace_forward_matrix(const std::vector<double>& xs,
                                                        double h, std::size_t n) {
    std::vector<std::vector<double>> K(xs.size(), std::vector<double>(n, 0.0));
    for (std::size_t r = 0; r < xs.size(); ++r) {
        double x = xs[r];
        if (!(x > 0.0)) throw std::domain_error("laplace_forward_matrix: x must be positive");
        double t = h / x;
        SegWeights sw = exp_segment_weights(t);
        double prefix = 1.0;
        for (std::size_t k = 0; k + 1 < n; ++k) {
            if (prefix == 0.0) break;
            K[r][k] += prefix * sw.left;
            K[r][k + 1] += prefix * sw.right;
            prefix *= std::exp(-t);
        }
    }
    return K;
}

namespace {

// Gamma(j, a) = int_a^inf y^{j-1} e^{-y} dy = (j-1)! e^{-a} sum_{k<j} a^k/k!  (integer j)
double upper_gamma_int(int j, double a) {
    if (a > 700.0) return 0.0;
    double sum = 0.0, term = 1.0; // a^k / k!
    for (int k = 0; k < j; ++k) {
        if (k > 0) term *= a / static_cast<double>(k);
        sum += term;
    }
    double fact = 1.0;
    for (int k = 2; k < j; ++k) fact *= static_cast<double>(k);
    return fact * std::exp(-a) * sum;
}

} // namespace

double WeierstrassKernel::operator()(double t) const {
    double e = std::log(static_cast<double>(N)) - std::log(I_jN) +
               static_cast<double>(N * j) * t - std::exp(static_cast<double>(N) * t);
    return std::exp(e);
}

namespace {
WeierstrassKernel make_kernel(int j, int N, double eps) {
    if (j < 1 || N < 1 || !(eps > 0.0))
        throw std::invalid_argument("weierstrass_kernel: need j,N >= 1 and eps > 0");
    if (static_cast<double>(N) * eps > 700.0)
        throw std::domain_error("weierstrass_kernel: N*eps > 700 would overflow e^{N t}");
    WeierstrassKernel k;
    k.j = j;
    k.N = N;
    k.eps = eps;
    k.A_j = upper_gamma_int(j, 1.0);
    k.I_jN = k.A_j - upper_gamma_int(j, std::exp(static_cast<double>(N) * eps));
    return k;
}
} // namespace

std::pair<WeierstrassKernel, GridFunction> weierstrass_kernel(int j, int N, double eps,
                                                              std::size_t n) {
    WeierstrassKernel k = make_kernel(j, N, eps);
    GridFunction g = GridFunction::sample(0.0, eps / static_cast<double>(n - 1), n,
                                          [&k](double t) { return k(t); });
    return {k, g};
}

double weierstrass_mass(const WeierstrassKernel& k) {
    return adaptive_simpson([&k](double t) { return k(t); }, 0.0, k.eps, 1e-11);
}

double weierstrass_estimate(const GridFunction& a, int j, int N, double shift) {
    if (a.dim() != 1) throw std::invalid_argument("weierstrass_estimate: scalar data expected");
    double eps = a.end();
    if (!(shift >= 0.0) || !(shift < eps))
        throw std::domain_error("weierstrass_estimate: shift must lie in [0, eps)");
    WeierstrassKernel k = make_kernel(j, N, eps);
    MonotoneInterpolant ai(a);
    double tol = 1e-10 * (1.0 + a.sup_norm());
    return adaptive_simpson([&](double t) { return k(t) * ai(t + shift); }, 0.0, eps - shift, tol);
}

GridFunction inverse_laplace_regularized(const LaplaceSamples& samples, double delta,
                                         double mu, std::size_t nw, bool tail) {
    samples.validate();
    if (!(delta > 0.0)) throw std::invalid_argument("inverse_laplace_regularized: delta must be positive");
    if (nw < 4) throw std::invalid_argument("inverse_laplace_regularized: need >= 4 grid nodes");
    std::size_t nx = samples.x_nodes.size(), m = samples.values[0].size();
    double h = delta / static_cast<double>(nw - 1);
    auto Kw = laplace_forward_matrix(samples.x_nodes, h, nw);

    std::size_t ncols = nw + (tail ? 2 : 0);
    Eigen::MatrixXd K(nx, nw);
    for (std::size_t r = 0; r < nx; ++r)
        for (std::size_t c = 0; c < nw; ++c) K(r, c) = Kw[r][c];
    if (mu < 0.0) mu = 1e-8 * K.squaredNorm();

    std::size_t nrows = nx + (nw - 2) + (tail ? 2 : 0);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(nrows, ncols);
    S.topLeftCorner(nx, nw) = K;
    double smu = std::sqrt(mu) / (h * h);
    for (std::size_t i = 0; i + 2 < nw; ++i) {
        S(nx + i, i) = smu;
        S(nx + i, i + 1) = -2.0 * smu;
        S(nx + i, i + 2) = smu;
    }
    if (tail) {
        // Columns normalized to unit sup so the ridge weight is scale-free.
        Eigen::VectorXd t0(nx), t1(nx);
        for (std::size_t r = 0; r < nx; ++r) {
            double x = samples.x_nodes[r];
            t0(r) = std::exp(-delta / x);
            t1(r) = x * t0(r);
        }
        double n0 = t0.lpNorm<Eigen::Infinity>(), n1 = t1.lpNorm<Eigen::Infinity>();
        if (n0 > 0.0) t0 /= n0;
        if (n1 > 0.0) t1 /= n1;
        S.block(0, nw, nx, 1) = t0;
        S.block(0, nw + 1, nx, 1) = t1;
        double ridge = 1e-3 * std::sqrt(mu);
        S(nx + nw - 2, nw) = ridge;
        S(nx + nw - 1, nw + 1) = ridge;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(S);
    if (qr.rank() < static_cast<Eigen::Index>(ncols)) {
        double cond = 0.0;
        auto Rd = qr.matrixR().diagonal();
        if (Rd.size() > 0 && Rd(Rd.size() - 1) != 0.0)
            cond = std::abs(Rd(0) / Rd(Rd.size() - 1));
        throw std::runtime_error(
            "inverse_laplace_regularized: rank-deficient system (rank " +
            std::to_string(qr.rank()) + " of " + std::to_string(ncols) +
            ", condition estimate " + std::to_string(cond) +
            "); increase mu or supply more samples");
    }

    GridFunction A(0.0, h, nw, m);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nrows);
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t r = 0; r < nx; ++r) rhs(r) = samples.values[r][c];
        Eigen::VectorXd sol = qr.solve(rhs);
        for (std::size_t i = 0; i < nw; ++i) A(i, c) = sol(i);
    }
    return A;
}

DecayFit fit_decay_rate(const std::vector<double>& x_nodes,
                        const std::vector<double>& residuals) {
    if (x_nodes.size() != residuals.size())
        throw std::invalid_argument("fit_decay_rate: size mismatch");
    std::vector<double> u, y;
    for (std::size_t i = 0; i < x_nodes.size(); ++i) {
        double r = residuals[i];
        if (!(x_nodes[i] > 0.0)) throw std::invalid_argument("fit_decay_rate: x nodes must be positive");
        if (!std::isfinite(r) || r <= 0.0 || r < 1e-300) continue;
        u.push_back(1.0 / x_nodes[i]);
        y.push_back(std::log(r));
    }
    if (u.size() < 3) throw std::runtime_error("fit_decay_rate: fewer than 3 usable residuals");
    double n = static_cast<double>(u.size());
    double su = 0.0, sy = 0.0, suu = 0.0, suy = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        su += u[i];
        sy += y[i];
        suu += u[i] * u[i];
        suy += u[i] * y[i];
    }
    double denom = n * suu - su * su;
    if (denom == 0.0) throw std::runtime_error("fit_decay_rate: degenerate x nodes");
    double slope = (n * suy - su * sy) / denom;
    double inter = (sy - slope * su) / n;
    double ssres = 0.0, sstot = 0.0, ymean = sy / n;
    for (std::size_t i = 0; i < u.size(); ++i) {
        double e = y[i] - (inter + slope * u[i]);
        ssres += e * e;
        double d = y[i] - ymean;
        sstot += d * d;
    }
    DecayFit fit;
    fit.gamma = -slope;
    fit.r2 = (sstot > 0.0) ? 1.0 - ssres / sstot : 1.0;
    fit.n_used = u.size();
    return fit;
}

} // namespace dq
